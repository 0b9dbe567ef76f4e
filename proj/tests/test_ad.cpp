#include "doctest.h"

#include <cmath>

#include "klbp/comp_graph.hpp"
#include "klbp/random.hpp"
#include "support.hpp"

using namespace klbp;
using klbp::testing::rel_err;

namespace {

CompGraph logistic_unit() {
  return CompGraphBuilder()
      .input("w")
      .input("x")
      .binary("u", Op::Mul, "w", "x")
      .unary("z", Op::Sigmoid, "u")
      .build("z");
}

double adjoint(const CompGraph& g, const AdjointSet& a, const std::string& id) { return a.s[g.index_of(id)]; }

std::vector<double> centered_grid(double c, double h) { return {c - h, c, c + h}; }

}  // namespace

TEST_CASE("DAG validation") {
  CHECK(validate_dag(CompGraphBuilder().input("x").raw("x")).valid);

  RawCompGraph cyc{{{"a", "exp", {"b"}, std::nullopt}, {"b", "exp", {"a"}, std::nullopt}}, "a"};
  const auto rc = validate_dag(cyc);
  CHECK_FALSE(rc.valid);
  CHECK(rc.violations[0].find("cycle") != std::string::npos);

  RawCompGraph relu{{{"x", "input", {}, std::nullopt}, {"r", "relu", {"x"}, std::nullopt}}, "r"};
  const auto rr = validate_dag(relu);
  CHECK_FALSE(rr.valid);
  CHECK(rr.violations[0].find("continuously differentiable") != std::string::npos);
  CHECK_THROWS_AS(CompGraph::build(relu), ValidationError);

  RawCompGraph arity{{{"x", "input", {}, std::nullopt}, {"r", "add", {"x"}, std::nullopt}}, "r"};
  CHECK_FALSE(validate_dag(arity).valid);

  RawCompGraph hazard{{{"x", "input", {}, std::nullopt}, {"l", "log", {"x"}, std::nullopt}}, "l"};
  const auto rh = validate_dag(hazard);
  CHECK(rh.valid);
  CHECK(rh.warnings.size() == 1);
}

TEST_CASE("forward evaluation") {
  const auto g = logistic_unit();
  const auto t = forward_eval(g, {{"w", 3.0}, {"x", 2.0}});
  CHECK(t.values[g.index_of("u")] == 6.0);
  const auto t0 = forward_eval(g, {{"w", 0.0}, {"x", 1.0}});
  CHECK(t0.values[g.index_of("u")] == 0.0);
  CHECK(t0.values[g.output()] == 0.5);

  const auto lg = CompGraphBuilder().input("x").unary("l", Op::Log, "x").build("l");
  CHECK_THROWS_WITH_AS(forward_eval(lg, {{"x", -1.0}}), doctest::Contains("'l'"), DomainError);
  const auto dv = CompGraphBuilder().input("x").input("y").binary("d", Op::Div, "x", "y").build("d");
  CHECK_THROWS_AS(forward_eval(dv, {{"x", 1.0}, {"y", 0.0}}), DomainError);
  CHECK_THROWS_AS(forward_eval(dv, {{"x", 1.0}}), ShapeError);
}

TEST_CASE("seed scores") {
  CHECK(seed_score(ExpScale{2.0}, 17.0) == 2.0);
  CHECK(seed_score(NegLossTemp{LossKind::Squared, 0.3, 1.0}, 0.3) == 0.0);
  CHECK(seed_score(NegLossTemp{LossKind::Squared, 1.0, 2.0}, 0.5) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(seed_score(NegLossTemp{LossKind::Logistic, 1.0, 1.0}, 0.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(seed_score(NegLossTemp{LossKind::Squared, 1.0, 0.0}, 0.5), DomainError);
}

TEST_CASE("logistic unit adjoints") {
  const auto g = logistic_unit();
  const auto t = forward_eval(g, {{"w", 0.0}, {"x", 1.0}});
  const auto a = backward_adjoints(g, t, ExpScale{2.0});
  CHECK(adjoint(g, a, "w") == 0.5);
  CHECK(adjoint(g, a, "x") == 0.0);
  CHECK(adjoint(g, a, "z") == 2.0);

  const auto id = CompGraphBuilder().input("x").build("x");
  CHECK(backward_adjoints(id, forward_eval(id, {{"x", 0.7}}), ExpScale{1.0}).s[0] == 1.0);

  const auto zero = backward_adjoints(g, forward_eval(g, {{"w", 0.3}, {"x", -1.2}}), ExpScale{0.0});
  for (double s : zero.s) CHECK(s == 0.0);
}

TEST_CASE("adjoints on random DAGs") {
  Rng rng(41);
  for (int k = 0; k < 200; ++k) {
    const auto gd = random_dag(rng);
    const auto g = CompGraph::build(gd.graph);
    const auto t = forward_eval(g, gd.point);
    const double alpha = uniform(rng, -2.0, 2.0);
    const auto a = backward_adjoints(g, t, ExpScale{alpha});
    const auto a1 = backward_adjoints(g, t, ExpScale{1.0});
    const auto tape = klbp::testing::tape_gradient(gd.graph, gd.point);
    for (const auto& [id, x] : gd.point) {
      const double s = adjoint(g, a, id);
      CHECK(rel_err(s, alpha * tape.at(id)) <= 1e-12);
      CHECK(rel_err(s, alpha * klbp::testing::forward_derivative(gd.graph, gd.point, id)) <= 1e-12);
      CHECK(std::abs(s - alpha * adjoint(g, a1, id)) <= 1e-12 * std::max(1.0, std::abs(s)));
      // Central differences of alpha z.
      const double h = fd_step(x);
      auto up = gd.point, dn = gd.point;
      up[id] += h;
      dn[id] -= h;
      const double fd = alpha * (forward_eval(g, up).values[g.output()] - forward_eval(g, dn).values[g.output()]) / (2.0 * h);
      CHECK(rel_err(s, fd) <= 1e-6);
    }
  }
}

TEST_CASE("loss-tempered output factors") {
  Rng rng(43);
  for (int k = 0; k < 50; ++k) {
    const auto gd = random_dag(rng);
    const auto g = CompGraph::build(gd.graph);
    const auto t = forward_eval(g, gd.point);
    const double z = t.values[g.output()];
    const NegLossTemp f{k % 2 ? LossKind::Squared : LossKind::Logistic, static_cast<double>(k % 2),
                        uniform(rng, 0.5, 2.0)};
    const auto a = backward_adjoints(g, t, f);
    for (const auto& [id, x] : gd.point) {
      const double h = fd_step(x);
      auto up = gd.point, dn = gd.point;
      up[id] += h;
      dn[id] -= h;
      const double dz = (forward_eval(g, up).values[g.output()] - forward_eval(g, dn).values[g.output()]) / (2.0 * h);
      CHECK(rel_err(adjoint(g, a, id), -loss_derivative(f, z) / f.temperature * dz) <= 1e-6);
    }
  }
}

TEST_CASE("delta-factor chain rule") {
  const auto [l0, r0] = delta_chain_check(Primitive{Op::Add, 0.0, 0}, 3.0, 0.0);
  CHECK(l0 == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(r0 == 3.0);
  const auto [l1, r1] = delta_chain_check(Primitive{Op::Sigmoid}, 1.0, 0.0);
  CHECK(std::abs(l1 - 0.25) <= 1e-6);
  CHECK(r1 == 0.25);
  const auto [l2, r2] = delta_chain_check(Primitive{Op::Tanh}, 0.0, 0.4);
  CHECK(l2 == 0.0);
  CHECK(r2 == 0.0);

  Rng rng(45);
  const Primitive prims[] = {
      {Op::Exp},       {Op::Log},       {Op::Sigmoid},   {Op::Tanh},          {Op::Softplus},
      {Op::Pow, 0, 0, 3.0}, {Op::Pow, 0, 0, 0.5}, {Op::Add, 0.7, 0}, {Op::Sub, 0.7, 1}, {Op::Mul, -1.3, 1},
      {Op::Div, 2.0, 0}, {Op::Div, 2.0, 1}};
  for (const auto& p : prims)
    for (int k = 0; k < 20; ++k) {
      const double x = uniform(rng, 0.2, 2.0);
      const double s = uniform(rng, -2.0, 2.0);
      const auto [l, r] = delta_chain_check(p, s, x);
      CHECK(std::abs(l - r) <= 1e-6 * std::max(1.0, std::abs(r)));
    }
}

TEST_CASE("downward log-belief slopes and gauge invariance") {
  const auto g = logistic_unit();
  const auto t = forward_eval(g, {{"w", 0.4}, {"x", 1.5}});
  const auto a = backward_adjoints(g, t, ExpScale{2.0});
  const double w = 0.4, h = 1e-5;
  const auto grid = centered_grid(w, h);
  const auto base = downward_log_belief(g, t, ExpScale{2.0}, "w", grid);
  CHECK(std::abs(grid_slope(grid, base) - adjoint(g, a, "w")) <= 1e-6);

  const EdgeScales scaled{{{"w", "u"}, 7.0}};
  const auto shifted = downward_log_belief(g, t, ExpScale{2.0}, "w", grid, scaled);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(shifted[i] - base[i] == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK(std::abs(grid_slope(grid, shifted) - grid_slope(grid, base)) <= 1e-12);

  // A node nothing depends on: constant log-belief.
  const auto side = CompGraphBuilder().input("x").input("y").unary("z", Op::Exp, "x").build("z");
  const auto ts = forward_eval(side, {{"x", 0.1}, {"y", 0.2}});
  const auto flat = downward_log_belief(side, ts, ExpScale{1.0}, "y", centered_grid(0.2, 1e-3));
  CHECK(grid_slope(centered_grid(0.2, 1e-3), flat) == 0.0);

  CHECK_THROWS_AS(downward_log_belief(g, t, ExpScale{1.0}, "w", grid, {{{"x", "w"}, 2.0}}), ShapeError);
  CHECK_THROWS_AS(downward_log_belief(g, t, ExpScale{1.0}, "w", grid, {{{"w", "u"}, -1.0}}), DomainError);
}

TEST_CASE("gauge invariance on random DAGs") {
  Rng rng(47);
  int checked = 0;
  for (int k = 0; k < 50; ++k) {
    const auto gd = random_dag(rng);
    const auto g = CompGraph::build(gd.graph);
    const auto t = forward_eval(g, gd.point);
    EdgeScales scales;
    for (const auto& n : g.nodes())
      for (std::size_t in : n.inputs) scales[{g.nodes()[in].id, n.id}] = std::exp(uniform(rng, -1.0, 1.0));
    for (const auto& [id, x] : gd.point) {
      const auto grid = centered_grid(x, 1e-2);
      std::vector<double> plain;
      try {
        plain = downward_log_belief(g, t, ExpScale{1.5}, id, grid);
      } catch (const DomainError&) {
        continue;  // grid leaves the domain of some downstream op
      }
      const auto gauged = downward_log_belief(g, t, ExpScale{1.5}, id, grid, scales);
      ++checked;
      CHECK(std::abs(grid_slope(grid, plain) - grid_slope(grid, gauged)) <= 1e-12 * std::max(1.0, std::abs(grid_slope(grid, plain))));
    }
  }
  CHECK(checked >= 100);
}
