#pragma once

// Factor-graph view of a tree circuit and the region-level two-step
// projection built on it.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "klbp/factor_graph.hpp"
#include "klbp/lift.hpp"
#include "klbp/projection.hpp"
#include "klbp/spn.hpp"

namespace klbp {

//! Factor graph over one activity variable per circuit node. A sum's variable
//! ranges over its children (plus "off" when the sum may be skipped); every
//! other node is {off, on} or just {on} when it is always visited. Weight and
//! evidence unaries plus 0/1 selection factors on tree edges make the joint
//! proportional to the induced-tree expansion of S(e).
struct SpnFactorGraph {
  FactorGraph graph;
  std::vector<std::size_t> node_variable;  //!< circuit node -> graph variable (same index)
  std::vector<bool> has_off;               //!< state 0 is "off" for this node's variable
};

inline SpnFactorGraph spn_to_factor_graph(const SpnCircuit& c, const Evidence& e) {
  if (!c.is_tree()) throw ValidationError("spn_to_factor_graph: circuit shares nodes; unroll it first");
  check_evidence(c, e);
  if (!e.soft()) throw DomainError("spn_to_factor_graph: evidence must be strictly positive");
  const std::size_t n = c.size();
  const auto parents = c.parents();
  // A node may be skipped iff some sum ancestor has more than one child.
  std::vector<bool> may_skip(n, false);
  for (std::size_t i = n; i-- > 0;) {
    if (i == c.root()) continue;
    const std::size_t p = parents[i].front();
    may_skip[i] = may_skip[p] || (c.nodes()[p].kind == SpnKind::Sum && c.nodes()[p].children.size() > 1);
  }
  SpnFactorGraph out;
  out.has_off = may_skip;
  std::vector<FgVariable> vars;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = c.nodes()[i];
    const std::size_t active = node.kind == SpnKind::Sum ? node.children.size() : 1;
    vars.push_back({node.id, active + (may_skip[i] ? 1 : 0)});
    out.node_variable.push_back(i);
  }
  // State index of "active with choice k" (k = 0 for non-sums).
  auto on = [&](std::size_t i, std::size_t k) { return k + (may_skip[i] ? 1 : 0); };
  std::vector<FgFactor> factors;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = c.nodes()[i];
    if (node.kind == SpnKind::Sum) {
      std::vector<double> t(vars[i].cardinality, 1.0);
      for (std::size_t k = 0; k < node.children.size(); ++k) t[on(i, k)] = node.weights[k];
      factors.push_back({"w:" + node.id, {i}, std::move(t)});
    } else if (node.kind == SpnKind::Leaf) {
      std::vector<double> t(vars[i].cardinality, 1.0);
      t[on(i, 0)] = e.lambda[node.var][node.state];
      factors.push_back({"lambda:" + node.id, {i}, std::move(t)});
    }
    for (std::size_t k = 0; k < node.children.size(); ++k) {
      const std::size_t ch = node.children[k];
      const std::size_t pc = vars[i].cardinality, cc = vars[ch].cardinality;
      std::vector<double> t(pc * cc, 0.0);
      for (std::size_t ps = 0; ps < pc; ++ps) {
        const bool parent_off = may_skip[i] && ps == 0;
        bool child_active;
        if (parent_off)
          child_active = false;
        else if (node.kind == SpnKind::Sum)
          child_active = ps == on(i, k);
        else
          child_active = true;
        if (child_active) {
          for (std::size_t cs = (may_skip[ch] ? 1 : 0); cs < cc; ++cs) t[ps * cc + cs] = 1.0;
        } else if (may_skip[ch]) {
          t[ps * cc + 0] = 1.0;
        }
      }
      factors.push_back({"sel:" + node.id + ">" + c.nodes()[ch].id, {i, ch}, std::move(t)});
    }
  }
  out.graph = FactorGraph(std::move(vars), std::move(factors), true);
  return out;
}

//! Raw per-node beliefs from tree BP on the circuit's factor graph.
inline std::vector<std::vector<double>> spn_fg_node_beliefs(const SpnFactorGraph& sfg) {
  const auto msgs = bp_tree_messages(sfg.graph);
  std::vector<std::vector<double>> out;
  for (std::size_t v = 0; v < sfg.graph.num_variables(); ++v)
    out.push_back(detail::belief_raw(sfg.graph, msgs, v));
  return out;
}

//! Variable marginals read off node beliefs: Pr(X_i = t) is the total
//! probability that a leaf carrying (i, t) is active.
inline std::vector<std::vector<double>> spn_fg_variable_marginals(const SpnCircuit& c, const Evidence& e,
                                                                  const SpnFactorGraph& sfg,
                                                                  const std::vector<std::vector<double>>& node_beliefs) {
  std::vector<std::vector<double>> out;
  for (const auto& l : e.lambda) out.emplace_back(l.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind != SpnKind::Leaf) continue;
    const auto& b = node_beliefs[sfg.node_variable[i]];
    out[n.var][n.state] += sfg.has_off[i] ? b[1] : b[0];
  }
  return out;
}

//! Distribution of a sum's selection over its children (the "off" state
//! dropped), i.e. the global gate; equals the local gate at the root.
inline std::vector<double> spn_fg_gate(const SpnFactorGraph& sfg, const std::vector<std::vector<double>>& node_beliefs,
                                       std::size_t sum_node) {
  const auto& b = node_beliefs[sfg.node_variable[sum_node]];
  return {b.begin() + (sfg.has_off[sum_node] ? 1 : 0), b.end()};
}

//==============================================================================
//! Result of the region-level two-step projection.
struct RegionResult {
  std::size_t joint_size = 0;
  std::vector<std::vector<double>> node_marginals;      //!< per circuit node region
  std::vector<std::vector<double>> variable_marginals;  //!< per circuit variable
  double consensus_residual = 0.0;  //!< replica disagreement after the consensus step
  double product_residual = 0.0;    //!< distance of the result from the product of its marginals
};

//! Region tables (the circuit's weight, evidence and selection tables) are
//! replicated onto one axis per (region, table) incidence; the initial joint
//! is their normalized product. The consensus I-projection restricts it to
//! the diagonal, and the product projection replaces it by the outer product
//! of per-region marginals.
inline RegionResult region_two_step(const SpnCircuit& c, const Evidence& e, std::size_t budget = kJointBudget) {
  const auto sfg = spn_to_factor_graph(c, e);
  const auto& fg = sfg.graph;
  std::vector<std::size_t> axes;
  std::vector<std::vector<std::size_t>> var_axes(fg.num_variables());
  for (std::size_t f = 0; f < fg.num_factors(); ++f)
    for (std::size_t v : fg.factors()[f].vars) {
      var_axes[v].push_back(axes.size());
      axes.push_back(fg.cardinality(v));
    }
  RegionResult res;
  res.joint_size = checked_product(axes, budget, "region_two_step");
  const JointShape shape(axes, var_axes);

  std::vector<double> q(res.joint_size, 1.0);
  std::size_t stride = res.joint_size;
  for (std::size_t f = 0; f < fg.num_factors(); ++f) {
    const auto& t = fg.factors()[f].table;
    stride /= t.size();
    double mass = 0.0;
    for (double x : t) mass += x;
    for (std::size_t idx = 0; idx < q.size(); ++idx) q[idx] *= t[(idx / stride) % t.size()] / mass;
  }
  const auto face = detail::diagonal_restrict(q, shape);
  // Every replica of a region sees the same marginal on the face by
  // construction; measure it on the embedded table.
  const auto embedded = detail::embed_face(face, shape);
  for (const auto& group : shape.groups()) {
    const std::size_t first[] = {group.front()};
    const auto ref = detail::marginal(embedded, axes, first);
    for (std::size_t a : group) {
      const std::size_t keep[] = {a};
      res.consensus_residual = std::max(res.consensus_residual, max_abs_diff(ref, detail::marginal(embedded, axes, keep)));
    }
  }
  const auto projected = t_proj_table(q, shape);
  const auto face_axes = shape.face_axes();
  for (std::size_t v = 0; v < face_axes.size(); ++v) {
    const std::size_t keep[] = {v};
    res.node_marginals.push_back(detail::marginal(projected, face_axes, keep));
  }
  std::vector<std::vector<std::size_t>> singles;
  for (std::size_t v = 0; v < face_axes.size(); ++v) singles.push_back({v});
  res.product_residual = max_abs_diff(projected, detail::block_product(projected, face_axes, singles));
  res.variable_marginals = spn_fg_variable_marginals(c, e, sfg, res.node_marginals);
  return res;
}

}  // namespace klbp
