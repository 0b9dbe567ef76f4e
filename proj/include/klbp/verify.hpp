#pragma once

// Per-instance comparison suites: engine results against the brute-force
// references, summarized as the worst error per named check.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "klbp/comp_graph.hpp"
#include "klbp/lift.hpp"
#include "klbp/oracle.hpp"
#include "klbp/posterior.hpp"
#include "klbp/random.hpp"
#include "klbp/spn_fg.hpp"

namespace klbp {

struct CheckResult {
  double worst = 0.0;
  double tolerance = 0.0;
  std::size_t count = 0;
  std::size_t failures = 0;
};

class CheckSet {
 public:
  void record(const std::string& name, double error, double tolerance) {
    auto& c = checks_[name];
    c.tolerance = tolerance;
    ++c.count;
    // NaN counts as a failure.
    if (!(error <= tolerance)) ++c.failures;
    if (!(error <= c.worst)) c.worst = error;
  }

  void merge(const CheckSet& other) {
    for (const auto& [name, o] : other.checks_) {
      auto& c = checks_[name];
      c.tolerance = o.tolerance;
      c.count += o.count;
      c.failures += o.failures;
      if (!(o.worst <= c.worst)) c.worst = o.worst;
    }
  }

  bool passed() const {
    for (const auto& [_, c] : checks_)
      if (c.failures) return false;
    return true;
  }

  const std::map<std::string, CheckResult>& checks() const { return checks_; }

 private:
  std::map<std::string, CheckResult> checks_;
};

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

inline double max_belief_error(const std::vector<VariableBelief>& a, const std::vector<VariableBelief>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i].full(), b[i].full()));
  return m;
}

inline double max_belief_error(const std::vector<DistVec>& a, const std::vector<DistVec>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i].probs(), b[i].probs()));
  return m;
}

//==============================================================================
inline CheckSet verify_spn(const SpnCircuit& c, const Evidence& e) {
  CheckSet cs;
  const auto v = upward_pass(c, e);
  const auto a = downward_pass(c, v);
  const auto b = variable_marginals(c, e, v, a);
  cs.record("marginals_vs_enumeration", max_belief_error(b, enumerate_spn_marginals(c, e)), 1e-10);

  double norm = 0.0;
  for (const auto& vb : b) {
    double s = 0.0;
    for (double x : vb.full()) s += x;
    norm = std::max(norm, std::abs(s - 1.0));
  }
  cs.record("normalization", norm, 1e-12);

  const auto d = indicator_derivatives(c, e, a);
  for (std::size_t i = 0; i < c.num_variables(); ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t < d[i].size(); ++t) s += e.lambda[i][t] * d[i][t];
    cs.record("euler_identity", std::abs(s - v.root()) / v.root(), 1e-10);
  }

  // d log S / d log lambda against the marginals, on positive indicators.
  for (std::size_t i = 0; i < c.num_variables(); ++i)
    for (std::size_t t = 0; t < e.lambda[i].size(); ++t) {
      if (!(e.lambda[i][t] > 0.0)) continue;
      const double h = 1e-5;
      auto up = e, dn = e;
      up.lambda[i][t] *= std::exp(h);
      dn.lambda[i][t] *= std::exp(-h);
      const double fd = (std::log(upward_pass(c, up).root()) - std::log(upward_pass(c, dn).root())) / (2.0 * h);
      cs.record("log_derivative_fd", std::abs(fd - b[i].full()[t]), 1e-6);
    }

  bool positive = v.root() > 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) positive = positive && v.S[i] >= 0.0 && a.D[i] >= 0.0;
  cs.record("positivity", positive ? 0.0 : 1.0, 0.0);

  if (e.soft()) {
    const auto gates = gate_report(c, v, a);
    for (const auto& g : gates) {
      for (std::size_t k = 0; k < g.local.size(); ++k)
        cs.record("gate_factorization", std::abs(g.global[k] - g.visit * g.local[k]), 1e-12);
      if (g.node == c.root()) cs.record("root_visit", std::abs(g.visit - 1.0), 1e-12);
    }
    const auto k = kkt_multipliers(c, v, a);
    cs.record("kkt_sum_identity", k.sum_identity_residual, 1e-12);
    cs.record("kkt_edge_identity", k.edge_identity_residual, 1e-12);
    cs.record("kkt_positivity", k.positive ? 0.0 : 1.0, 0.0);

    const auto lv = log_upward_pass(c, e);
    cs.record("log_domain", max_belief_error(log_variable_marginals(c, e, lv, log_downward_pass(c, lv)), b), 1e-9);

    if (c.is_tree()) {
      const auto sfg = spn_to_factor_graph(c, e);
      const auto nb = spn_fg_node_beliefs(sfg);
      const auto vm = spn_fg_variable_marginals(c, e, sfg, nb);
      double m = 0.0;
      for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, max_abs_diff(b[i].full(), vm[i]));
      cs.record("factor_graph_bp", m, 1e-10);
      for (const auto& g : gates) {
        const auto fg_gate = spn_fg_gate(sfg, nb, g.node);
        double err = 0.0;
        for (std::size_t k2 = 0; k2 < fg_gate.size(); ++k2) err = std::max(err, std::abs(fg_gate[k2] - g.global[k2]));
        cs.record("factor_graph_gate", err, 1e-10);
      }
    }
  }
  return cs;
}

//==============================================================================
inline CheckSet verify_fg(const FactorGraph& fg) {
  CheckSet cs;
  const auto exact = enumerate_fg_marginals(fg);
  if (fg_is_tree(fg)) {
    cs.record("tree_bp_vs_enumeration", max_belief_error(bp_run_tree(fg), exact), 1e-10);
    const WrContext ctx(replicate_lift(fg), NegativeEntropy{});
    const auto s1 = wr_step(ctx.initial_state(), ctx);
    const auto wr = wr_beliefs(s1, ctx.space());
    double m = 0.0;
    for (std::size_t i = 0; i < wr.size(); ++i) m = std::max(m, max_abs_diff(wr[i], exact[i].probs()));
    cs.record("wr_one_step_vs_enumeration", m, 1e-10);
    auto s = s1;
    for (int k = 0; k < 3; ++k) s = wr_step(s, ctx);
    cs.record("wr_extra_iterations", max_abs_diff(s.q, s1.q), 1e-12);
  } else {
    const auto res = bp_run_loopy(fg);
    cs.record("loopy_converged", res.converged ? 0.0 : 1.0, 0.0);
    if (res.converged) {
      const auto space = replicate_lift(fg);
      const auto q = message_lift(fg, res.messages, space);
      cs.record("fixed_point_residual",
                max_abs_diff(t_proj(q, space).probs(), i_project_diagonal(q, space.shape).probs()), 1e-8);
    }
  }
  return cs;
}

//==============================================================================
//! Adjoints against central differences and output-factor linearity, and
//! log-belief slopes under per-edge rescalings drawn from `rng`.
inline CheckSet verify_dag(const CompGraph& g, const std::map<std::string, double>& point, const OutputFactor& f,
                           Rng& rng) {
  CheckSet cs;
  const auto t = forward_eval(g, point);
  const auto a = backward_adjoints(g, t, f);
  const double z = t.values[g.output()];
  const double dlog = seed_score(f, z);
  const auto unit = backward_adjoints(g, t, ExpScale{1.0});
  for (const auto& [id, x] : point) {
    const double s = a.s[g.index_of(id)];
    const double h = fd_step(x);
    auto up = point, dn = point;
    up[id] += h;
    dn[id] -= h;
    const double dz = (forward_eval(g, up).values[g.output()] - forward_eval(g, dn).values[g.output()]) / (2.0 * h);
    cs.record("adjoint_vs_finite_difference", relative_error(s, dlog * dz), 1e-6);
    cs.record("seed_linearity", std::abs(s - dlog * unit.s[g.index_of(id)]) / std::max(1.0, std::abs(s)), 1e-12);
  }
  EdgeScales scales;
  for (const auto& n : g.nodes())
    for (std::size_t in : n.inputs) scales[{g.nodes()[in].id, n.id}] = std::exp(uniform(rng, -1.0, 1.0));
  for (const auto& [id, x] : point) {
    const std::vector<double> grid{x - 1e-3, x, x + 1e-3};
    std::vector<double> plain;
    try {
      plain = downward_log_belief(g, t, f, id, grid);
    } catch (const DomainError&) {
      continue;
    }
    const double s0 = grid_slope(grid, plain);
    const double s1 = grid_slope(grid, downward_log_belief(g, t, f, id, grid, scales));
    cs.record("gauge_slope", std::abs(s0 - s1) / std::max(1.0, std::abs(s0)), 1e-12);
  }
  return cs;
}

//==============================================================================
inline CheckSet verify_posterior(const PosteriorModel& m) {
  CheckSet cs;
  const auto g = posterior_grad_enum(m, m.theta);
  const auto fd = finite_diff_grad([&](std::span<const double> th) { return log_marginal_likelihood_enum(m, th); },
                                   m.theta);
  for (std::size_t k = 0; k < fd.size(); ++k) cs.record("gradient_vs_finite_difference", relative_error(g.gradient[k], fd[k]), 1e-6);
  if (std::holds_alternative<ExpScale>(m.likelihood)) {
    const auto bp = posterior_grad_bp(m, m.theta);
    for (std::size_t k = 0; k < bp.size(); ++k) cs.record("bp_vs_enumeration", std::abs(bp[k] - g.gradient[k]), 1e-10);
  }
  std::vector<double> x_star;
  for (const auto& in : m.inputs) x_star.push_back(in.grid.front());
  const auto [left, right] = dirac_limit_check(m, m.theta, x_star);
  for (std::size_t k = 0; k < left.size(); ++k) cs.record("dirac_limit", std::abs(left[k] - right[k]), 1e-10);
  return cs;
}

//==============================================================================
//! Closed-form projections against the numeric oracle on random targets.
inline CheckSet verify_projections(Rng& rng) {
  CheckSet cs;
  auto interior = [&](std::size_t n) {
    std::vector<double> w(n);
    for (double& x : w) x = uniform(rng, 0.05, 1.0);
    return DistVec::normalized(w);
  };
  {
    const JointShape shape({uniform_int(rng, 2, 4), uniform_int(rng, 2, 4)}, {{0}, {1}});
    const auto q = interior(shape.size());
    const auto num = numeric_projection(NegativeEntropy{}, ProductFamily{shape}, q, Side::Right);
    cs.record("product_family", max_abs_diff(num.result.probs(), m_project_product(q, shape).probs()), 1e-6);
    cs.record("multistart_spread", num.spread, 1e-8);
  }
  {
    const std::size_t n = uniform_int(rng, 2, 4);
    const JointShape shape({n, n, 2}, {{0, 1}, {2}});
    const auto q = interior(shape.size());
    const auto num = numeric_projection(NegativeEntropy{}, DiagonalFace{shape}, q, Side::Left);
    const auto proj = i_project_diagonal(q, shape);
    cs.record("diagonal_face", max_abs_diff(num.result.probs(), proj.probs()), 1e-6);
    cs.record("multistart_spread", num.spread, 1e-8);
    // Pythagorean identity against a random face point.
    const auto rf = interior(shape.face_size());
    auto kl_face = [&](const DistVec& face, const DistVec& target) {
      double s = 0.0;
      for (std::size_t k = 0; k < face.size(); ++k) s += face[k] * std::log(face[k] / target[shape.face_to_full(k)]);
      return s;
    };
    const double lhs = kl_face(rf, q);
    const double rhs = divergence(NegativeEntropy{}, rf, proj) + kl_face(proj, q);
    cs.record("pythagorean_identity", std::abs(lhs - rhs), 1e-10);
  }
  {
    const std::size_t k = uniform_int(rng, 2, 4), n = uniform_int(rng, 2, 5);
    std::vector<DistVec> tabs;
    for (std::size_t j = 0; j < k; ++j) tabs.push_back(interior(n));
    const auto num = numeric_projection(NegativeEntropy{}, EqualCopies{k}, tabs, Side::Left);
    cs.record("equal_copies", max_abs_diff(num.result.probs(), consensus_geomean(tabs).probs()), 1e-6);
    cs.record("multistart_spread", num.spread, 1e-8);
  }
  return cs;
}

}  // namespace klbp
