#pragma once

// Posterior-expected sensitivities for discrete models with a factored prior
// and an additive score z(x, theta) = sum_i z_i(x_i, theta).

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "klbp/comp_graph.hpp"
#include "klbp/dist.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/spn.hpp"

namespace klbp {

//! One input variable: a grid of real values, its prior, and the graph of
//! z_i. The graph reads the grid value from input "x" and parameter k from
//! input "theta<k>"; either may be absent.
struct PriorInput {
  std::vector<double> grid;
  DistVec prior;
  CompGraph graph;
};

//! The likelihood l(z) is represented by an output factor: ExpScale(alpha)
//! for exp(alpha z), NegLossTemp for exp(-L(z)/T).
struct PosteriorModel {
  std::vector<PriorInput> inputs;
  std::vector<double> theta;
  OutputFactor likelihood = ExpScale{1.0};
};

inline std::string theta_name(std::size_t k) { return "theta" + std::to_string(k); }

inline void check_model(const PosteriorModel& m, std::span<const double> theta) {
  if (m.inputs.empty()) throw ShapeError("posterior model has no inputs");
  check_factor(m.likelihood);
  for (std::size_t i = 0; i < m.inputs.size(); ++i) {
    const auto& in = m.inputs[i];
    if (in.grid.empty() || in.grid.size() != in.prior.size())
      throw ShapeError("input " + std::to_string(i) + ": grid and prior sizes differ");
    for (const auto& id : in.graph.input_ids()) {
      if (id == "x") continue;
      bool known = false;
      for (std::size_t k = 0; k < theta.size(); ++k) known = known || id == theta_name(k);
      if (!known) throw ShapeError("input " + std::to_string(i) + ": graph input '" + id + "' is neither x nor a parameter");
    }
  }
}

namespace detail {

//! z_i and dz_i/dtheta at every grid point of every input.
struct LocalScores {
  std::vector<std::vector<double>> z;                  //!< [input][grid point]
  std::vector<std::vector<std::vector<double>>> dz;    //!< [input][grid point][theta]
};

inline LocalScores local_scores(const PosteriorModel& m, std::span<const double> theta) {
  check_model(m, theta);
  LocalScores out;
  for (const auto& in : m.inputs) {
    const auto ids = in.graph.input_ids();
    std::vector<double> zs;
    std::vector<std::vector<double>> dzs;
    for (double x : in.grid) {
      std::map<std::string, double> assign;
      for (const auto& id : ids) {
        if (id == "x") {
          assign[id] = x;
        } else {
          assign[id] = theta[static_cast<std::size_t>(std::stoul(id.substr(5)))];
        }
      }
      const auto tr = forward_eval(in.graph, assign);
      const auto adj = backward_adjoints(in.graph, tr, ExpScale{1.0});
      std::vector<double> g(theta.size(), 0.0);
      for (std::size_t k = 0; k < theta.size(); ++k)
        if (in.graph.contains(theta_name(k))) g[k] = adj.s[in.graph.index_of(theta_name(k))];
      zs.push_back(tr.values[in.graph.output()]);
      dzs.push_back(std::move(g));
    }
    out.z.push_back(std::move(zs));
    out.dz.push_back(std::move(dzs));
  }
  return out;
}

//! Calls f(indices) for every joint grid assignment, last input fastest.
template <class F>
void for_each_assignment(const PosteriorModel& m, F&& f) {
  std::vector<std::size_t> sizes;
  for (const auto& in : m.inputs) sizes.push_back(in.grid.size());
  const std::size_t total = checked_product(sizes, enumeration_budget(), "posterior enumeration");
  std::vector<std::size_t> idx(sizes.size(), 0);
  for (std::size_t n = 0; n < total; ++n) {
    f(idx);
    for (std::size_t j = sizes.size(); j-- > 0;) {
      if (++idx[j] < sizes[j]) break;
      idx[j] = 0;
    }
  }
}

}  // namespace detail

//! log sum_x l(z(x, theta)) p(x) by enumeration.
inline double log_marginal_likelihood_enum(const PosteriorModel& m, std::span<const double> theta) {
  const auto sc = detail::local_scores(m, theta);
  std::vector<double> logw;
  detail::for_each_assignment(m, [&](const std::vector<std::size_t>& idx) {
    double z = 0.0, lp = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      z += sc.z[i][idx[i]];
      lp += std::log(m.inputs[i].prior[idx[i]]);
    }
    logw.push_back(lp + log_output_factor(m.likelihood, z));
  });
  return log_sum_exp(logw);
}

//! Factorized form for exp(alpha z): sum_i log sum_{x_i} p_i(x_i) exp(alpha z_i).
inline double log_marginal_likelihood_factorized(const PosteriorModel& m, std::span<const double> theta) {
  const auto* e = std::get_if<ExpScale>(&m.likelihood);
  if (!e) throw DomainError("factorized marginal likelihood needs an exponential likelihood");
  const auto sc = detail::local_scores(m, theta);
  double total = 0.0;
  for (std::size_t i = 0; i < m.inputs.size(); ++i) {
    std::vector<double> terms;
    for (std::size_t t = 0; t < sc.z[i].size(); ++t)
      terms.push_back(std::log(m.inputs[i].prior[t]) + e->alpha * sc.z[i][t]);
    total += log_sum_exp(terms);
  }
  return total;
}

inline double marginal_likelihood(const PosteriorModel& m, std::span<const double> theta) {
  if (std::holds_alternative<ExpScale>(m.likelihood)) return std::exp(log_marginal_likelihood_factorized(m, theta));
  return std::exp(log_marginal_likelihood_enum(m, theta));
}

struct PosteriorGradient {
  std::vector<double> gradient;
  double posterior_mass = 0.0;  //!< sum of normalized posterior weights
};

//! E[s(z) dz/dtheta | y] under the enumerated posterior.
inline PosteriorGradient posterior_grad_enum(const PosteriorModel& m, std::span<const double> theta) {
  const auto sc = detail::local_scores(m, theta);
  std::vector<double> logw;
  std::vector<std::vector<std::size_t>> assignments;
  detail::for_each_assignment(m, [&](const std::vector<std::size_t>& idx) {
    double z = 0.0, lp = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      z += sc.z[i][idx[i]];
      lp += std::log(m.inputs[i].prior[idx[i]]);
    }
    logw.push_back(lp + log_output_factor(m.likelihood, z));
    assignments.push_back(idx);
  });
  const double lz = log_sum_exp(logw);
  PosteriorGradient out{std::vector<double>(theta.size(), 0.0)};
  for (std::size_t n = 0; n < logw.size(); ++n) {
    const double w = std::exp(logw[n] - lz);
    out.posterior_mass += w;
    double z = 0.0;
    for (std::size_t i = 0; i < m.inputs.size(); ++i) z += sc.z[i][assignments[n][i]];
    const double s = seed_score(m.likelihood, z);
    for (std::size_t i = 0; i < m.inputs.size(); ++i)
      for (std::size_t k = 0; k < theta.size(); ++k) out.gradient[k] += w * s * sc.dz[i][assignments[n][i]][k];
  }
  return out;
}

//! Exponential likelihood only: builds the product-form factor graph with
//! unaries p_i(x_i) exp(alpha z_i), runs one scheduled tree pass, and returns
//! alpha sum_i E_{q_i}[dz_i/dtheta].
inline std::vector<double> posterior_grad_bp(const PosteriorModel& m, std::span<const double> theta) {
  const auto* e = std::get_if<ExpScale>(&m.likelihood);
  if (!e) throw DomainError("posterior_grad_bp: needs an exponential likelihood (use the enumeration path)");
  const auto sc = detail::local_scores(m, theta);
  std::vector<FgVariable> vars;
  std::vector<FgFactor> factors;
  for (std::size_t i = 0; i < m.inputs.size(); ++i) {
    std::vector<double> logt;
    for (std::size_t t = 0; t < sc.z[i].size(); ++t)
      logt.push_back(std::log(m.inputs[i].prior[t]) + e->alpha * sc.z[i][t]);
    vars.push_back({"x" + std::to_string(i), logt.size()});
    factors.push_back({"u" + std::to_string(i), {i}, DistVec::from_log_weights(logt).vector()});
  }
  const auto beliefs = bp_run_tree(FactorGraph(std::move(vars), std::move(factors)));
  std::vector<double> g(theta.size(), 0.0);
  for (std::size_t i = 0; i < m.inputs.size(); ++i)
    for (std::size_t t = 0; t < beliefs[i].size(); ++t)
      for (std::size_t k = 0; k < theta.size(); ++k) g[k] += e->alpha * beliefs[i][t] * sc.dz[i][t][k];
  return g;
}

//! Model with every prior collapsed to a point mass at x_star (grid values).
inline PosteriorModel dirac_model(const PosteriorModel& m, std::span<const double> x_star) {
  if (x_star.size() != m.inputs.size()) throw ShapeError("dirac: one point per input required");
  PosteriorModel d = m;
  for (std::size_t i = 0; i < m.inputs.size(); ++i) {
    const auto& grid = m.inputs[i].grid;
    if (std::find(grid.begin(), grid.end(), x_star[i]) == grid.end())
      throw DomainError("dirac: point " + std::to_string(x_star[i]) + " is not on the grid of input " + std::to_string(i));
    d.inputs[i].grid = {x_star[i]};
    d.inputs[i].prior = DistVec(std::vector<double>{1.0});
  }
  return d;
}

//! Left: the enumerated posterior gradient under the point-mass prior.
//! Right: adjoints of each z_i seeded with s(z*), summed over inputs.
inline std::pair<std::vector<double>, std::vector<double>> dirac_limit_check(const PosteriorModel& m,
                                                                             std::span<const double> theta,
                                                                             std::span<const double> x_star) {
  const auto d = dirac_model(m, x_star);
  auto left = posterior_grad_enum(d, theta).gradient;
  std::vector<ForwardTrace> traces;
  double z_star = 0.0;
  for (std::size_t i = 0; i < d.inputs.size(); ++i) {
    std::map<std::string, double> assign;
    for (const auto& id : d.inputs[i].graph.input_ids())
      assign[id] = id == "x" ? x_star[i] : theta[static_cast<std::size_t>(std::stoul(id.substr(5)))];
    traces.push_back(forward_eval(d.inputs[i].graph, assign));
    z_star += traces.back().values[d.inputs[i].graph.output()];
  }
  const ExpScale seeded{seed_score(m.likelihood, z_star)};
  std::vector<double> right(theta.size(), 0.0);
  for (std::size_t i = 0; i < d.inputs.size(); ++i) {
    const auto& g = d.inputs[i].graph;
    const auto adj = backward_adjoints(g, traces[i], seeded);
    for (std::size_t k = 0; k < theta.size(); ++k)
      if (g.contains(theta_name(k))) right[k] += adj.s[g.index_of(theta_name(k))];
  }
  return {std::move(left), std::move(right)};
}

}  // namespace klbp
