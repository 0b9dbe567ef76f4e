#include "doctest.h"

#include <cmath>
#include <cstdlib>

#include "klbp/oracle.hpp"
#include "klbp/random.hpp"

using namespace klbp;

namespace {

DistVec random_interior(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (double& x : w) x = uniform(rng, 0.05, 1.0);
  return DistVec::normalized(w);
}

JointShape random_pair_shape(Rng& rng) {
  return JointShape({uniform_int(rng, 2, 4), uniform_int(rng, 2, 4)}, {{0}, {1}});
}

}  // namespace

TEST_CASE("factor-graph enumeration examples") {
  const auto one = enumerate_fg_marginals(FactorGraph({{"X", 2}}, {{"g", {0}, {3.0, 1.0}}}));
  CHECK(one[0][0] == doctest::Approx(0.75).epsilon(1e-15));
  const auto flat = enumerate_fg_marginals(FactorGraph({{"X", 3}}, {{"g", {0}, {2.0, 2.0, 2.0}}}));
  CHECK(flat[0][1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto pair =
      enumerate_fg_marginals(FactorGraph({{"X", 2}, {"Y", 2}}, {{"xy", {0, 1}, {2.0, 1.0, 1.0, 2.0}}}));
  CHECK(pair[0][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pair[1][0] == doctest::Approx(0.5).epsilon(1e-15));

  std::vector<FgVariable> big;
  for (int i = 0; i < 21; ++i) big.push_back({"v" + std::to_string(i), 2});
  CHECK_THROWS_AS(enumerate_fg_marginals(FactorGraph(big, {})), BudgetError);
}

TEST_CASE("circuit enumeration examples") {
  const RawSpn sym{{{"A", "leaf", {}, "X", 0},
                    {"B", "leaf", {}, "X", 1},
                    {"s", "sum", {{"A", 0.5}, {"B", 0.5}}, std::nullopt, std::nullopt}},
                   "s"};
  const auto c = SpnCircuit::build(sym);
  CHECK(enumerate_spn_marginals(c, {{{1.0, 1.0}}})[0].dist[0] == doctest::Approx(0.5).epsilon(1e-15));
  const auto hard = enumerate_spn_marginals(c, {{{0.0, 1.0}}});
  CHECK(hard[0].support == std::vector<std::size_t>{1});
  CHECK(hard[0].full()[0] == 0.0);
}

TEST_CASE("finite differences") {
  const std::vector<double> x{3.0};
  const auto g = finite_diff_grad([](std::span<const double> p) { return p[0] * p[0]; }, x);
  CHECK(std::abs(g[0] - 6.0) <= 1e-6);
  const std::vector<double> y{1.0, -2.0, 5.0};
  for (double d : finite_diff_grad([](std::span<const double>) { return 4.0; }, y)) CHECK(d == 0.0);
  CHECK_THROWS_AS(finite_diff_grad([](std::span<const double>) { return NAN; }, y), NumericError);
  CHECK_THROWS_AS(finite_diff_grad([](std::span<const double>) { return 0.0; }, y, 0.0), DomainError);
}

TEST_CASE("numeric projection examples") {
  const JointShape pair({2, 2}, {{0, 1}});
  const DistVec diag(std::vector<double>{0.3, 1e-300, 1e-300, 0.7});
  const auto face = numeric_projection(NegativeEntropy{}, DiagonalFace{pair}, diag, Side::Left);
  CHECK(face.result[0] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(face.objective <= 1e-10);

  CHECK_THROWS_AS(numeric_projection(NegativeEntropy{}, DiagonalFace{pair}, diag, Side::Right), DomainError);
  const DistVec tabs[] = {DistVec::uniform(2), DistVec::uniform(3)};
  CHECK_THROWS_AS(numeric_projection(NegativeEntropy{}, EqualCopies{2}, tabs, Side::Left), ShapeError);
  const JointShape wide({65}, {{0}});
  CHECK_THROWS_AS(numeric_projection(NegativeEntropy{}, ProductFamily{wide}, DistVec::uniform(65), Side::Right),
                  BudgetError);
}

TEST_CASE("closed-form projections agree with the numeric oracle") {
  Rng rng(81);
  for (int t = 0; t < 50; ++t) {
    const auto shape = random_pair_shape(rng);
    const auto q = random_interior(rng, shape.size());
    const auto num = numeric_projection(NegativeEntropy{}, ProductFamily{shape}, q, Side::Right);
    CHECK(max_abs_diff(num.result.probs(), m_project_product(q, shape).probs()) <= 1e-6);
    CHECK(num.spread <= 1e-8);
  }
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = uniform_int(rng, 2, 4);
    const JointShape shape({n, n, 2}, {{0, 1}, {2}});
    const auto q = random_interior(rng, shape.size());
    const auto num = numeric_projection(NegativeEntropy{}, DiagonalFace{shape}, q, Side::Left);
    CHECK(max_abs_diff(num.result.probs(), i_project_diagonal(q, shape).probs()) <= 1e-6);
    CHECK(num.spread <= 1e-8);
  }
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = uniform_int(rng, 2, 4), n = uniform_int(rng, 2, 5);
    std::vector<DistVec> tabs;
    for (std::size_t j = 0; j < k; ++j) tabs.push_back(random_interior(rng, n));
    const auto num = numeric_projection(NegativeEntropy{}, EqualCopies{k}, tabs, Side::Left);
    CHECK(max_abs_diff(num.result.probs(), consensus_geomean(tabs).probs()) <= 1e-6);
    CHECK(num.spread <= 1e-8);
  }
}

TEST_CASE("multi-start is reproducible in the seed") {
  Rng rng(83);
  const JointShape shape({3, 2}, {{0}, {1}});
  const auto q = random_interior(rng, 6);
  NumericProjectionOptions opt;
  opt.seed = 99;
  const auto a = numeric_projection(NegativeEntropy{}, ProductFamily{shape}, q, Side::Right, opt);
  const auto b = numeric_projection(NegativeEntropy{}, ProductFamily{shape}, q, Side::Right, opt);
  CHECK(a.result.vector() == b.result.vector());
  CHECK(a.steps == b.steps);
}

TEST_CASE("enumeration budget override") {
  ::setenv("KLBP_BUDGET", "4", 1);
  std::vector<FgVariable> three;
  for (int i = 0; i < 3; ++i) three.push_back({"v" + std::to_string(i), 2});
  CHECK_THROWS_AS(enumerate_fg_marginals(FactorGraph(three, {})), BudgetError);
  ::unsetenv("KLBP_BUDGET");
  CHECK_NOTHROW(enumerate_fg_marginals(FactorGraph(three, {})));
}
