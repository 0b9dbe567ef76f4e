#include "doctest.h"

#include <cmath>
#include <random>

#include "klbp/oracle.hpp"
#include "klbp/projection.hpp"

using namespace klbp;

namespace {

DistVec random_interior(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> w(n);
  for (double& x : w) x = u(rng);
  return DistVec::normalized(w);
}

double kl(const DistVec& r, const DistVec& q) { return divergence(NegativeEntropy{}, r, q); }

}  // namespace

TEST_CASE("DistVec construction") {
  CHECK_NOTHROW(DistVec(std::vector<double>{0.3, 0.7}));
  CHECK_THROWS_AS(DistVec(std::vector<double>{0.0, 1.0}), DomainError);
  CHECK_THROWS_AS(DistVec(std::vector<double>{0.3, 0.6}), DomainError);
  CHECK_THROWS_AS(DistVec(std::vector<double>{}), ShapeError);
  const DistVec drift(std::vector<double>{0.3, 0.7 + 5e-10});
  CHECK(drift[0] + drift[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("divergence closed forms") {
  const DistVec a(std::vector<double>{0.3, 0.7});
  CHECK(kl(a, a) == 0.0);
  const DistVec r(std::vector<double>{0.5, 0.5}), q(std::vector<double>{0.9, 0.1});
  CHECK(kl(r, q) == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)).epsilon(1e-14));
  CHECK(kl(r, q) == doctest::Approx(0.5108256).epsilon(1e-7));
  const DistVec q2(std::vector<double>{0.25, 0.75});
  CHECK(divergence(Mahalanobis::identity(2), r, q2) == doctest::Approx(0.0625).epsilon(1e-14));
  CHECK_THROWS_AS(kl(r, DistVec::uniform(3)), ShapeError);
}

TEST_CASE("divergence is nonnegative and vanishes only on the diagonal") {
  std::mt19937_64 rng(3);
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 5);
  const Mahalanobis m(Eigen::MatrixXd::Identity(5, 5) + a * a.transpose());
  for (int t = 0; t < 200; ++t) {
    const auto r = random_interior(rng, 5), q = random_interior(rng, 5);
    CHECK(kl(r, q) > 0.0);
    CHECK(divergence(m, r, q) > 0.0);
    CHECK(std::abs(kl(r, r)) <= 1e-12);
    CHECK(std::abs(divergence(m, q, q)) <= 1e-12);
  }
}

TEST_CASE("Mahalanobis rejects indefinite or asymmetric matrices") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1, 2, 2, 1;
  CHECK_THROWS_AS(Mahalanobis{bad}, DomainError);
  Eigen::MatrixXd asym(2, 2);
  asym << 2, 1, 0, 2;
  CHECK_THROWS_AS(Mahalanobis{asym}, DomainError);
}

TEST_CASE("dual coordinates") {
  CHECK(to_dual(DistVec(std::vector<double>{1.0})).values[0] == 1.0);
  const auto t = to_dual(DistVec(std::vector<double>{0.5, 0.5}));
  CHECK(t.values[0] == doctest::Approx(1.0 + std::log(0.5)).epsilon(1e-15));
  CHECK(t.values[1] == doctest::Approx(0.3068528).epsilon(1e-7));

  const auto half = from_dual({{0.0, 0.0}, {}});
  CHECK(half[0] == doctest::Approx(0.5));
  const auto third = from_dual({{std::log(2.0), 0.0}, {}});
  CHECK(third[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(third[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto shifted = from_dual({{std::log(2.0) + 700.0, 700.0}, {}});
  CHECK(max_abs_diff(third.probs(), shifted.probs()) <= 1e-13);
  CHECK_THROWS_AS(from_dual({{NAN, 0.0}, {}}), DomainError);

  std::mt19937_64 rng(5);
  for (std::size_t n = 1; n <= 64; n *= 2)
    for (int t = 0; t < 20; ++t) {
      const auto p = random_interior(rng, n);
      CHECK(max_abs_diff(from_dual(to_dual(p)).probs(), p.probs()) <= 1e-12);
    }
}

TEST_CASE("diagonal I-projection") {
  const JointShape pair({2, 2}, {{0, 1}});
  const auto u = i_project_diagonal(DistVec::uniform(4), pair);
  CHECK(u.size() == 2);
  CHECK(u[0] == doctest::Approx(0.5));

  const DistVec q(std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const auto d = i_project_diagonal(q, pair);
  CHECK(d[0] == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(d[1] == doctest::Approx(0.8).epsilon(1e-14));
  CHECK_THROWS_AS(i_project_diagonal(DistVec::uniform(3), pair), ShapeError);
}

TEST_CASE("diagonal projection of a nearly diagonal joint keeps its weights") {
  const JointShape pair({2, 2}, {{0, 1}});
  const DistVec q(std::vector<double>{0.3, 1e-300, 1e-300, 0.7});
  const auto d = i_project_diagonal(q, pair);
  CHECK(d[0] == doctest::Approx(0.3).epsilon(1e-14));
}

TEST_CASE("diagonal face Pythagorean identity") {
  std::mt19937_64 rng(11);
  const JointShape shape({3, 3, 2}, {{0, 1}, {2}});
  for (int t = 0; t < 50; ++t) {
    const auto q = random_interior(rng, shape.size());
    const auto proj = i_project_diagonal(q, shape);
    const auto rf = random_interior(rng, shape.face_size());
    // KL restricted to the face support, with r and the projection embedded.
    auto kl_face = [&](const DistVec& face, const DistVec& target) {
      double s = 0.0;
      for (std::size_t f = 0; f < face.size(); ++f) s += face[f] * std::log(face[f] / target[shape.face_to_full(f)]);
      return s;
    };
    const double lhs = kl_face(rf, q);
    const double rhs = kl(rf, proj) + kl_face(proj, q);
    CHECK(std::abs(lhs - rhs) <= 1e-10);
  }
}

TEST_CASE("product M-projection") {
  const JointShape two({2, 2}, {{0}, {1}});
  const DistVec q(std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const auto p = m_project_product(q, two);
  const double expect[] = {0.12, 0.18, 0.28, 0.42};
  for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  CHECK(max_abs_diff(m_project_product(p, two).probs(), p.probs()) <= 1e-15);
  CHECK(max_abs_diff(m_project_product(DistVec::uniform(4), two).probs(), DistVec::uniform(4).probs()) <= 1e-15);

  const auto oracle = numeric_projection(NegativeEntropy{}, ProductFamily{two}, q, Side::Right);
  CHECK(max_abs_diff(oracle.result.probs(), p.probs()) <= 1e-6);
  CHECK(oracle.spread <= 1e-8);
}

TEST_CASE("product M-projection matches the numeric oracle") {
  std::mt19937_64 rng(17);
  for (const auto& axes : {std::vector<std::size_t>{2, 2}, std::vector<std::size_t>{2, 3}}) {
    const JointShape shape(axes, {{0}, {1}});
    for (int t = 0; t < 10; ++t) {
      const auto q = random_interior(rng, shape.size());
      const auto oracle = numeric_projection(NegativeEntropy{}, ProductFamily{shape}, q, Side::Right);
      CHECK(max_abs_diff(oracle.result.probs(), m_project_product(q, shape).probs()) <= 1e-6);
    }
  }
}

TEST_CASE("block product projection") {
  const JointShape three({2, 2, 2}, {{0}, {1}, {2}});
  std::mt19937_64 rng(2);
  const auto q = random_interior(rng, 8);
  const auto all_singletons = m_project_product(q, three, {{0}, {1}, {2}});
  CHECK(max_abs_diff(all_singletons.probs(), m_project_product(q, three).probs()) <= 1e-15);
  const auto one_block = m_project_product(q, three, {{0, 1, 2}});
  CHECK(max_abs_diff(one_block.probs(), q.probs()) <= 1e-15);
  CHECK_THROWS_AS(m_project_product(q, three, {{0}, {0, 1, 2}}), ShapeError);
}

TEST_CASE("consensus geometric mean") {
  const DistVec q1(std::vector<double>{0.5, 0.5}), q2(std::vector<double>{0.9, 0.1});
  const DistVec tabs[] = {q1, q2};
  const auto g = consensus_geomean(tabs);
  CHECK(g[0] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(g[1] == doctest::Approx(0.25).epsilon(1e-14));
  const DistVec one[] = {q2};
  CHECK(max_abs_diff(consensus_geomean(one).probs(), q2.probs()) <= 1e-15);
  const DistVec same[] = {q2, q2, q2};
  CHECK(max_abs_diff(consensus_geomean(same).probs(), q2.probs()) <= 1e-15);
  CHECK_THROWS_AS(consensus_geomean(std::span<const DistVec>{}), ShapeError);

  const auto oracle = numeric_projection(NegativeEntropy{}, EqualCopies{2}, tabs, Side::Left);
  CHECK(max_abs_diff(oracle.result.probs(), g.probs()) <= 1e-6);

  // No grid point beats the closed form on the summed objective.
  auto objective = [&](const DistVec& r) { return kl(r, q1) + kl(r, q2); };
  const double best = objective(g);
  for (int i = 1; i < 1000; ++i) {
    const DistVec cand(std::vector<double>{i / 1000.0, 1.0 - i / 1000.0});
    CHECK(best <= objective(cand) + 1e-8);
  }
}
