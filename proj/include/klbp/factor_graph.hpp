#pragma once

// Discrete factor graphs and normalized sum-product message passing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "klbp/dist.hpp"
#include "klbp/projection.hpp"

namespace klbp {

struct FgVariable {
  std::string id;
  std::size_t cardinality = 0;
};

//! Factor over an ordered list of variable indices. The table is row-major
//! with the last listed variable varying fastest.
struct FgFactor {
  std::string id;
  std::vector<std::size_t> vars;
  std::vector<double> table;
};

//! Bipartite variable/factor graph. Construction checks only that indices are
//! in range; use validate_fg for the full structural report.
class FactorGraph {
 public:
  //! Position of a variable inside a factor's neighbor list.
  struct Incidence {
    std::size_t factor;
    std::size_t position;
  };

  FactorGraph() = default;

  FactorGraph(std::vector<FgVariable> variables, std::vector<FgFactor> factors,
              bool allow_structural_zeros = false)
      : variables_(std::move(variables)),
        factors_(std::move(factors)),
        allow_zeros_(allow_structural_zeros) {
    incidences_.resize(variables_.size());
    edge_offset_.reserve(factors_.size() + 1);
    std::size_t edges = 0;
    for (std::size_t f = 0; f < factors_.size(); ++f) {
      edge_offset_.push_back(edges);
      for (std::size_t k = 0; k < factors_[f].vars.size(); ++k) {
        const std::size_t v = factors_[f].vars[k];
        if (v >= variables_.size())
          throw ShapeError("factor '" + factors_[f].id + "' references unknown variable index " +
                           std::to_string(v));
        incidences_[v].push_back({f, k});
      }
      edges += factors_[f].vars.size();
    }
    edge_offset_.push_back(edges);
  }

  const std::vector<FgVariable>& variables() const { return variables_; }
  const std::vector<FgFactor>& factors() const { return factors_; }
  std::size_t num_variables() const { return variables_.size(); }
  std::size_t num_factors() const { return factors_.size(); }
  std::size_t num_edges() const { return edge_offset_.empty() ? 0 : edge_offset_.back(); }
  bool allows_structural_zeros() const { return allow_zeros_; }

  //! Factors adjacent to variable v, in factor order.
  const std::vector<Incidence>& incidences(std::size_t v) const { return incidences_[v]; }

  //! Flat index of the edge (factor f, neighbor position k).
  std::size_t edge(std::size_t f, std::size_t k) const { return edge_offset_[f] + k; }

  std::size_t cardinality(std::size_t v) const { return variables_[v].cardinality; }

  std::vector<std::size_t> factor_axes(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t v : factors_[f].vars) out.push_back(variables_[v].cardinality);
    return out;
  }

 private:
  std::vector<FgVariable> variables_;
  std::vector<FgFactor> factors_;
  std::vector<std::vector<Incidence>> incidences_;
  std::vector<std::size_t> edge_offset_;
  bool allow_zeros_ = false;
};

struct ValidationReport {
  bool valid = true;
  std::vector<std::string> violations;
  std::vector<std::string> warnings;

  void fail(std::string msg) {
    valid = false;
    violations.push_back(std::move(msg));
  }
};

inline std::vector<std::vector<std::size_t>> fg_components(const FactorGraph& fg) {
  const std::size_t nv = fg.num_variables();
  std::vector<std::size_t> parent(nv);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& f : fg.factors())
    for (std::size_t k = 1; k < f.vars.size(); ++k) {
      const std::size_t a = find(f.vars[0]), b = find(f.vars[k]);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::size_t> index(nv, static_cast<std::size_t>(-1));
  for (std::size_t v = 0; v < nv; ++v) {
    const std::size_t r = find(v);
    if (index[r] == static_cast<std::size_t>(-1)) {
      index[r] = comps.size();
      comps.emplace_back();
    }
    comps[index[r]].push_back(v);
  }
  return comps;
}

inline ValidationReport validate_fg(const FactorGraph& fg) {
  ValidationReport rep;
  if (fg.num_variables() == 0) rep.fail("graph has no variables");
  for (const auto& v : fg.variables())
    if (v.cardinality == 0) rep.fail("variable '" + v.id + "' has an empty alphabet");
  for (const auto& f : fg.factors()) {
    if (f.vars.empty()) {
      rep.fail("factor '" + f.id + "' has no neighbors");
      continue;
    }
    std::vector<std::size_t> sorted = f.vars;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      rep.fail("factor '" + f.id + "' lists a variable twice");
    std::size_t expected = 1;
    for (std::size_t v : f.vars) expected *= fg.variables()[v].cardinality;
    if (f.table.size() != expected) {
      rep.fail("factor '" + f.id + "' table has " + std::to_string(f.table.size()) +
               " entries, expected " + std::to_string(expected));
      continue;
    }
    for (std::size_t i = 0; i < f.table.size(); ++i) {
      const double t = f.table[i];
      const bool ok = std::isfinite(t) && (t > 0.0 || (fg.allows_structural_zeros() && t == 0.0));
      if (!ok)
        rep.fail("factor '" + f.id + "' entry " + std::to_string(i) + " is not strictly positive");
    }
  }
  if (rep.valid) {
    const auto comps = fg_components(fg);
    if (comps.size() > 1)
      rep.warnings.push_back("graph has " + std::to_string(comps.size()) +
                             " connected components; each is handled separately");
  }
  return rep;
}

inline void require_valid(const FactorGraph& fg) {
  const auto rep = validate_fg(fg);
  if (!rep.valid) throw ValidationError("invalid factor graph: " + rep.violations.front());
}

//==============================================================================
//! One normalized message per directed edge, indexed by FactorGraph::edge.
struct MessageState {
  std::vector<std::vector<double>> factor_to_var;
  std::vector<std::vector<double>> var_to_factor;
};

inline MessageState uniform_messages(const FactorGraph& fg) {
  MessageState m;
  for (std::size_t f = 0; f < fg.num_factors(); ++f)
    for (std::size_t v : fg.factors()[f].vars) {
      const std::size_t c = fg.cardinality(v);
      m.factor_to_var.emplace_back(c, 1.0 / static_cast<double>(c));
      m.var_to_factor.emplace_back(c, 1.0 / static_cast<double>(c));
    }
  return m;
}

namespace detail {

inline void normalize_message(std::vector<double>& m, const char* what) {
  double s = 0.0;
  for (double v : m) s += v;
  if (!(s > 0.0) || !std::isfinite(s))
    throw NumericError(std::string(what) + ": message underflowed to zero");
  for (double& v : m) v /= s;
}

//! Geometric damping: normalize(old^d * fresh^(1-d)).
inline void damp(std::vector<double>& fresh, const std::vector<double>& old, double d) {
  if (d == 0.0) return;
  for (std::size_t i = 0; i < fresh.size(); ++i)
    fresh[i] = (fresh[i] == 0.0 || old[i] == 0.0) ? 0.0
                                                 : std::pow(old[i], d) * std::pow(fresh[i], 1.0 - d);
  normalize_message(fresh, "bp_sweep");
}

inline std::vector<double> factor_message(const FactorGraph& fg, const MessageState& m,
                                          std::size_t f, std::size_t k) {
  const auto& fac = fg.factors()[f];
  const auto axes = fg.factor_axes(f);
  const std::size_t n = axes.size();
  std::vector<double> out(axes[k], 0.0);
  std::vector<std::size_t> state(n, 0);
  for (double t : fac.table) {
    if (t != 0.0) {
      double w = t;
      for (std::size_t j = 0; j < n; ++j)
        if (j != k) w *= m.var_to_factor[fg.edge(f, j)][state[j]];
      out[state[k]] += w;
    }
    for (std::size_t j = n; j-- > 0;) {
      if (++state[j] < axes[j]) break;
      state[j] = 0;
    }
  }
  normalize_message(out, "factor message");
  return out;
}

inline std::vector<double> variable_message(const FactorGraph& fg, const MessageState& m,
                                            std::size_t v, std::size_t to_factor) {
  std::vector<double> out(fg.cardinality(v), 1.0);
  for (const auto& inc : fg.incidences(v)) {
    if (inc.factor == to_factor) continue;
    const auto& in = m.factor_to_var[fg.edge(inc.factor, inc.position)];
    for (std::size_t x = 0; x < out.size(); ++x) out[x] *= in[x];
  }
  normalize_message(out, "variable message");
  return out;
}

inline std::vector<double> belief_raw(const FactorGraph& fg, const MessageState& m, std::size_t v) {
  std::vector<double> b(fg.cardinality(v), 1.0);
  for (const auto& inc : fg.incidences(v)) {
    const auto& in = m.factor_to_var[fg.edge(inc.factor, inc.position)];
    for (std::size_t x = 0; x < b.size(); ++x) b[x] *= in[x];
  }
  normalize_message(b, "bp_beliefs");
  return b;
}

}  // namespace detail

//! One synchronous round: all factor-to-variable updates from the old
//! variable-to-factor messages, then all variable-to-factor updates from the
//! new factor messages. Each update is normalized and geometrically damped.
inline MessageState bp_sweep(const FactorGraph& fg, const MessageState& msgs, double damping = 0.0) {
  if (!(damping >= 0.0 && damping < 1.0)) throw DomainError("bp_sweep: damping must be in [0,1)");
  if (msgs.factor_to_var.size() != fg.num_edges() || msgs.var_to_factor.size() != fg.num_edges())
    throw ShapeError("bp_sweep: message state does not match graph");
  MessageState next = msgs;
  for (std::size_t f = 0; f < fg.num_factors(); ++f)
    for (std::size_t k = 0; k < fg.factors()[f].vars.size(); ++k) {
      auto fresh = detail::factor_message(fg, msgs, f, k);
      detail::damp(fresh, msgs.factor_to_var[fg.edge(f, k)], damping);
      next.factor_to_var[fg.edge(f, k)] = std::move(fresh);
    }
  for (std::size_t f = 0; f < fg.num_factors(); ++f)
    for (std::size_t k = 0; k < fg.factors()[f].vars.size(); ++k) {
      auto fresh = detail::variable_message(fg, next, fg.factors()[f].vars[k], f);
      detail::damp(fresh, msgs.var_to_factor[fg.edge(f, k)], damping);
      next.var_to_factor[fg.edge(f, k)] = std::move(fresh);
    }
  return next;
}

//! Normalized products of incoming factor messages, one per variable.
inline std::vector<DistVec> bp_beliefs(const FactorGraph& fg, const MessageState& msgs) {
  std::vector<DistVec> out;
  out.reserve(fg.num_variables());
  for (std::size_t v = 0; v < fg.num_variables(); ++v)
    out.push_back(DistVec::normalized(detail::belief_raw(fg, msgs, v)));
  return out;
}

//! Factor beliefs b_g(x_g) proportional to g(x_g) times incoming variable messages.
inline std::vector<double> factor_belief(const FactorGraph& fg, const MessageState& msgs, std::size_t f) {
  const auto& fac = fg.factors()[f];
  const auto axes = fg.factor_axes(f);
  std::vector<double> out(fac.table.size());
  std::vector<std::size_t> state(axes.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double w = fac.table[i];
    for (std::size_t j = 0; j < axes.size(); ++j) w *= msgs.var_to_factor[fg.edge(f, j)][state[j]];
    out[i] = w;
    for (std::size_t j = axes.size(); j-- > 0;) {
      if (++state[j] < axes[j]) break;
      state[j] = 0;
    }
  }
  detail::normalize_message(out, "factor_belief");
  return out;
}

inline double message_change(const MessageState& a, const MessageState& b) {
  double m = 0.0;
  for (std::size_t e = 0; e < a.factor_to_var.size(); ++e) {
    m = std::max(m, max_abs_diff(a.factor_to_var[e], b.factor_to_var[e]));
    m = std::max(m, max_abs_diff(a.var_to_factor[e], b.var_to_factor[e]));
  }
  return m;
}

struct LoopyBpOptions {
  double damping = 0.0;
  double tolerance = 1e-10;
  int max_iterations = 10'000;
};

struct LoopyBpResult {
  MessageState messages;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

//! Synchronous sweeps from uniform messages until the max-norm message
//! change drops below the tolerance or the iteration cap is reached.
inline LoopyBpResult bp_run_loopy(const FactorGraph& fg, const LoopyBpOptions& opt = {}) {
  require_valid(fg);
  LoopyBpResult res{uniform_messages(fg)};
  for (res.iterations = 1; res.iterations <= opt.max_iterations; ++res.iterations) {
    auto next = bp_sweep(fg, res.messages, opt.damping);
    res.residual = message_change(next, res.messages);
    res.messages = std::move(next);
    if (res.residual < opt.tolerance) {
      res.converged = true;
      break;
    }
  }
  res.iterations = std::min(res.iterations, opt.max_iterations);
  return res;
}

//==============================================================================
//! True when every connected component is a tree (as a bipartite graph).
inline bool fg_is_tree(const FactorGraph& fg) {
  std::size_t edges = fg.num_edges();
  const auto comps = fg_components(fg);
  // A forest on V variables and F factors has V + F - (#components) edges;
  // every factor belongs to the component of its first variable.
  return edges + comps.size() == fg.num_variables() + fg.num_factors();
}

//! Upward then downward scheduled pass on a tree. Each component is rooted at
//! its lowest-index variable; neighbors are visited in ascending index order.
inline MessageState bp_tree_messages(const FactorGraph& fg) {
  require_valid(fg);
  if (!fg_is_tree(fg)) throw ValidationError("bp_run_tree: factor graph is not a tree");
  MessageState m = uniform_messages(fg);
  const std::size_t nv = fg.num_variables();
  // Node ids: variables 0..nv-1, factors nv..nv+nf-1.
  struct Step {
    std::size_t node, parent;
  };
  std::vector<Step> order;
  std::vector<char> seen(nv + fg.num_factors(), 0);
  auto neighbors = [&](std::size_t n) {
    std::vector<std::size_t> out;
    if (n < nv) {
      for (const auto& inc : fg.incidences(n)) out.push_back(nv + inc.factor);
    } else {
      for (std::size_t v : fg.factors()[n - nv].vars) out.push_back(v);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  const std::size_t none = static_cast<std::size_t>(-1);
  for (std::size_t root = 0; root < nv; ++root) {
    if (seen[root]) continue;
    std::vector<Step> stack{{root, none}};
    seen[root] = 1;
    while (!stack.empty()) {
      const Step s = stack.back();
      stack.pop_back();
      order.push_back(s);
      const auto nb = neighbors(s.node);
      for (auto it = nb.rbegin(); it != nb.rend(); ++it)
        if (!seen[*it]) {
          seen[*it] = 1;
          stack.push_back({*it, s.node});
        }
    }
  }
  auto position = [&](std::size_t f, std::size_t v) {
    const auto& vars = fg.factors()[f].vars;
    return static_cast<std::size_t>(std::find(vars.begin(), vars.end(), v) - vars.begin());
  };
  auto send = [&](std::size_t from, std::size_t to) {
    if (from < nv) {
      const std::size_t f = to - nv;
      m.var_to_factor[fg.edge(f, position(f, from))] = detail::variable_message(fg, m, from, f);
    } else {
      const std::size_t f = from - nv;
      const std::size_t k = position(f, to);
      m.factor_to_var[fg.edge(f, k)] = detail::factor_message(fg, m, f, k);
    }
  };
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (it->parent != none) send(it->node, it->parent);
  for (const auto& s : order)
    if (s.parent != none) send(s.parent, s.node);
  return m;
}

inline std::vector<DistVec> bp_run_tree(const FactorGraph& fg) {
  return bp_beliefs(fg, bp_tree_messages(fg));
}

}  // namespace klbp
