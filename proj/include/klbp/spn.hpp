#pragma once

// Sum-product networks over indicator leaves: structural validation,
// upward/downward passes (linear and log domain), marginals, gate
// distributions, KKT multipliers, unrolling, and a threaded batch API.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "klbp/dist.hpp"
#include "klbp/factor_graph.hpp"

namespace klbp {

enum class SpnKind { Sum, Product, Leaf };

inline const char* kind_name(SpnKind k) {
  switch (k) {
    case SpnKind::Sum: return "sum";
    case SpnKind::Product: return "product";
    case SpnKind::Leaf: return "leaf";
  }
  return "?";
}

struct RawSpnChild {
  std::string id;
  std::optional<double> weight;
};

struct RawSpnNode {
  std::string id;
  std::string kind;
  std::vector<RawSpnChild> children;
  std::optional<std::string> var;
  std::optional<long long> state;
};

struct RawSpn {
  std::vector<RawSpnNode> nodes;
  std::string root;
};

//! Validated circuit. Nodes are stored children-before-parents; variables are
//! numbered in order of first appearance among the leaves.
class SpnCircuit {
 public:
  struct Node {
    std::string id;
    SpnKind kind;
    std::vector<std::size_t> children;
    std::vector<double> weights;  //!< sums only
    std::size_t var = 0;          //!< leaves only
    std::size_t state = 0;        //!< leaves only
    std::vector<std::size_t> scope;  //!< sorted variable indices
  };

  //! Structural report. Scopes are computed bottom-up where possible.
  static ValidationReport validate(const RawSpn& raw) {
    ValidationReport rep;
    build_impl(raw, rep);
    return rep;
  }

  static SpnCircuit build(const RawSpn& raw) {
    ValidationReport rep;
    auto c = build_impl(raw, rep);
    if (!rep.valid) throw ValidationError("invalid circuit: " + rep.violations.front());
    return *c;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t root() const { return nodes_.size() - 1; }
  const std::vector<std::string>& variables() const { return variables_; }
  std::size_t num_variables() const { return variables_.size(); }

  //! Highest state index used by any leaf of each variable, plus one.
  const std::vector<std::size_t>& min_cardinality() const { return min_card_; }

  std::size_t index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ShapeError("unknown node id '" + id + "'");
    return it->second;
  }

  std::size_t variable_index(const std::string& name) const {
    for (std::size_t i = 0; i < variables_.size(); ++i)
      if (variables_[i] == name) return i;
    throw ShapeError("unknown variable '" + name + "'");
  }

  //! Parents of every node (one entry per edge).
  std::vector<std::vector<std::size_t>> parents() const {
    std::vector<std::vector<std::size_t>> out(nodes_.size());
    for (std::size_t p = 0; p < nodes_.size(); ++p)
      for (std::size_t c : nodes_[p].children) out[c].push_back(p);
    return out;
  }

  //! No node is reachable along two distinct edges.
  bool is_tree() const {
    std::vector<int> in(nodes_.size(), 0);
    for (const auto& n : nodes_)
      for (std::size_t c : n.children)
        if (++in[c] > 1) return false;
    return true;
  }

  std::size_t depth() const {
    std::vector<std::size_t> d(nodes_.size(), 1);
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (std::size_t c : nodes_[i].children) d[i] = std::max(d[i], d[c] + 1);
    return d[root()];
  }

  RawSpn to_raw() const {
    RawSpn raw;
    for (const auto& n : nodes_) {
      RawSpnNode r{n.id, kind_name(n.kind), {}, std::nullopt, std::nullopt};
      for (std::size_t k = 0; k < n.children.size(); ++k)
        r.children.push_back({nodes_[n.children[k]].id,
                              n.kind == SpnKind::Sum ? std::optional<double>(n.weights[k]) : std::nullopt});
      if (n.kind == SpnKind::Leaf) {
        r.var = variables_[n.var];
        r.state = static_cast<long long>(n.state);
      }
      raw.nodes.push_back(std::move(r));
    }
    raw.root = nodes_[root()].id;
    return raw;
  }

 private:
  static std::optional<SpnCircuit> build_impl(const RawSpn& raw, ValidationReport& rep) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < raw.nodes.size(); ++i)
      if (!index.emplace(raw.nodes[i].id, i).second) rep.fail("duplicate node id '" + raw.nodes[i].id + "'");
    if (raw.nodes.empty()) rep.fail("circuit has no nodes");
    if (!index.count(raw.root)) rep.fail("root '" + raw.root + "' is not a node");

    std::vector<SpnKind> kinds(raw.nodes.size(), SpnKind::Leaf);
    std::vector<std::string> variables;
    for (std::size_t i = 0; i < raw.nodes.size(); ++i) {
      const auto& n = raw.nodes[i];
      const std::string where = "node '" + n.id + "'";
      if (n.kind == "sum") {
        kinds[i] = SpnKind::Sum;
      } else if (n.kind == "product") {
        kinds[i] = SpnKind::Product;
      } else if (n.kind == "leaf") {
        kinds[i] = SpnKind::Leaf;
      } else {
        rep.fail(where + ": unknown kind '" + n.kind + "'");
        continue;
      }
      if (kinds[i] == SpnKind::Leaf) {
        if (!n.children.empty()) rep.fail(where + ": leaf has children");
        if (!n.var) rep.fail(where + ": leaf has no variable");
        if (!n.state || *n.state < 0) rep.fail(where + ": leaf has no valid state");
        if (n.var && std::find(variables.begin(), variables.end(), *n.var) == variables.end())
          variables.push_back(*n.var);
      } else {
        if (n.children.empty()) rep.fail(where + ": " + n.kind + " node has no children");
        for (const auto& ch : n.children) {
          if (!index.count(ch.id)) rep.fail(where + ": unknown child '" + ch.id + "'");
          if (kinds[i] == SpnKind::Sum) {
            if (!ch.weight)
              rep.fail(where + ": missing weight for child '" + ch.id + "'");
            else if (!(*ch.weight > 0.0) || !std::isfinite(*ch.weight))
              rep.fail(where + ": weight for child '" + ch.id + "' is not strictly positive");
          }
        }
      }
    }
    if (!rep.valid) return std::nullopt;

    // Topological order (children first) from the root; detects cycles.
    const std::size_t root = index.at(raw.root);
    std::vector<int> state(raw.nodes.size(), 0);
    std::vector<std::size_t> order;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty() && rep.valid) {
      auto& [n, next] = stack.back();
      if (next < raw.nodes[n].children.size()) {
        const std::size_t c = index.at(raw.nodes[n].children[next++].id);
        if (state[c] == 1) {
          rep.fail("cycle through node '" + raw.nodes[c].id + "'");
        } else if (state[c] == 0) {
          state[c] = 1;
          stack.push_back({c, 0});
        }
      } else {
        state[n] = 2;
        order.push_back(n);
        stack.pop_back();
      }
    }
    if (!rep.valid) return std::nullopt;
    for (std::size_t i = 0; i < raw.nodes.size(); ++i)
      if (!state[i]) rep.fail("node '" + raw.nodes[i].id + "' is not reachable from the root");

    SpnCircuit c;
    c.variables_ = variables;
    c.min_card_.assign(variables.size(), 0);
    std::vector<std::size_t> pos(raw.nodes.size(), 0);
    for (std::size_t k = 0; k < order.size(); ++k) pos[order[k]] = k;
    for (std::size_t k : order) {
      const auto& rn = raw.nodes[k];
      Node n{rn.id, kinds[k], {}, {}, 0, 0, {}};
      for (const auto& ch : rn.children) {
        n.children.push_back(pos[index.at(ch.id)]);
        if (n.kind == SpnKind::Sum) n.weights.push_back(*ch.weight);
      }
      if (n.kind == SpnKind::Leaf) {
        n.var = static_cast<std::size_t>(std::find(variables.begin(), variables.end(), *rn.var) - variables.begin());
        n.state = static_cast<std::size_t>(*rn.state);
        n.scope = {n.var};
        c.min_card_[n.var] = std::max(c.min_card_[n.var], n.state + 1);
      } else if (n.kind == SpnKind::Sum) {
        const auto& first = c.nodes_[n.children.front()].scope;
        n.scope = first;
        for (std::size_t ch : n.children)
          if (c.nodes_[ch].scope != first) {
            rep.fail("completeness violated at sum '" + n.id + "': child '" + c.nodes_[ch].id +
                     "' has a different scope than '" + c.nodes_[n.children.front()].id + "'");
            std::vector<std::size_t> u;
            std::set_union(n.scope.begin(), n.scope.end(), c.nodes_[ch].scope.begin(),
                           c.nodes_[ch].scope.end(), std::back_inserter(u));
            n.scope = std::move(u);
          }
      } else {
        for (std::size_t a = 0; a < n.children.size(); ++a) {
          const auto& sa = c.nodes_[n.children[a]].scope;
          for (std::size_t b = a + 1; b < n.children.size(); ++b) {
            const auto& sb = c.nodes_[n.children[b]].scope;
            std::vector<std::size_t> inter;
            std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
            if (!inter.empty())
              rep.fail("decomposability violated at product '" + n.id + "': children '" +
                       c.nodes_[n.children[a]].id + "' and '" + c.nodes_[n.children[b]].id +
                       "' share variable '" + variables[inter.front()] + "'");
          }
          std::vector<std::size_t> u;
          std::set_union(n.scope.begin(), n.scope.end(), sa.begin(), sa.end(), std::back_inserter(u));
          n.scope = std::move(u);
        }
      }
      c.index_[n.id] = c.nodes_.size();
      c.nodes_.push_back(std::move(n));
    }
    if (!rep.valid) return std::nullopt;
    return c;
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> variables_;
  std::vector<std::size_t> min_card_;
};

//==============================================================================
//! Indicator values lambda[i][t] for each circuit variable. Zeros are hard
//! evidence; a variable must keep at least one positive state.
struct Evidence {
  std::vector<std::vector<double>> lambda;

  bool soft() const {
    for (const auto& v : lambda)
      for (double x : v)
        if (!(x > 0.0)) return false;
    return true;
  }

  std::size_t total_states() const {
    std::size_t n = 0;
    for (const auto& v : lambda) n += v.size();
    return n;
  }
};

inline void check_evidence(const SpnCircuit& c, const Evidence& e) {
  if (e.lambda.size() != c.num_variables())
    throw ShapeError("evidence covers " + std::to_string(e.lambda.size()) + " variables, circuit has " +
                     std::to_string(c.num_variables()));
  for (std::size_t i = 0; i < e.lambda.size(); ++i) {
    const auto& v = e.lambda[i];
    if (v.size() < c.min_cardinality()[i])
      throw ShapeError("evidence for variable '" + c.variables()[i] + "' has " + std::to_string(v.size()) +
                       " states but a leaf uses state " + std::to_string(c.min_cardinality()[i] - 1));
    bool any = false;
    for (double x : v) {
      if (!std::isfinite(x) || x < 0.0)
        throw DomainError("evidence for variable '" + c.variables()[i] + "' has a negative or non-finite entry");
      any = any || x > 0.0;
    }
    if (!any) throw NumericError("evidence for variable '" + c.variables()[i] + "' has empty support");
  }
}

//! Evidence keyed by variable name, reordered to the circuit's variables.
inline Evidence evidence_from_map(const SpnCircuit& c, const std::map<std::string, std::vector<double>>& m) {
  Evidence e;
  for (const auto& name : c.variables()) {
    const auto it = m.find(name);
    if (it == m.end()) throw ShapeError("evidence has no entry for variable '" + name + "'");
    e.lambda.push_back(it->second);
  }
  for (const auto& [name, _] : m)
    if (std::find(c.variables().begin(), c.variables().end(), name) == c.variables().end())
      throw ShapeError("evidence names unknown variable '" + name + "'");
  check_evidence(c, e);
  return e;
}

//==============================================================================
struct ValueMap {
  std::vector<double> S;
  double root() const { return S.back(); }
};

struct AdjointMap {
  std::vector<double> D;
  //! D_{p->c}(c) for each product p and child position; empty for other kinds.
  std::vector<std::vector<double>> product_edge;
};

inline ValueMap upward_pass(const SpnCircuit& c, const Evidence& e) {
  check_evidence(c, e);
  ValueMap v{std::vector<double>(c.size())};
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    switch (n.kind) {
      case SpnKind::Leaf: v.S[i] = e.lambda[n.var][n.state]; break;
      case SpnKind::Product: {
        double s = 1.0;
        for (std::size_t ch : n.children) s *= v.S[ch];
        v.S[i] = s;
        break;
      }
      case SpnKind::Sum: {
        double s = 0.0;
        for (std::size_t k = 0; k < n.children.size(); ++k) s += n.weights[k] * v.S[n.children[k]];
        v.S[i] = s;
        break;
      }
    }
  }
  if (!(v.root() > 0.0)) throw NumericError("upward_pass: S(e) = 0 (evidence has empty support under the circuit)");
  if (!std::isfinite(v.root())) throw NumericError("upward_pass: S(e) overflowed; use the log-domain path");
  return v;
}

//! Reverse sweep from D(root) = 1. Products pass D(p) times the product of the
//! other children's values, computed with prefix/suffix products so zeros
//! need no division.
inline AdjointMap downward_pass(const SpnCircuit& c, const ValueMap& v) {
  if (v.S.size() != c.size()) throw ShapeError("downward_pass: value map does not match circuit");
  AdjointMap a{std::vector<double>(c.size(), 0.0), std::vector<std::vector<double>>(c.size())};
  a.D[c.root()] = 1.0;
  for (std::size_t i = c.size(); i-- > 0;) {
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Sum) {
      for (std::size_t k = 0; k < n.children.size(); ++k) a.D[n.children[k]] += a.D[i] * n.weights[k];
    } else if (n.kind == SpnKind::Product) {
      const std::size_t m = n.children.size();
      std::vector<double> suffix(m + 1, 1.0);
      for (std::size_t k = m; k-- > 0;) suffix[k] = suffix[k + 1] * v.S[n.children[k]];
      double prefix = 1.0;
      auto& edge = a.product_edge[i];
      edge.resize(m);
      for (std::size_t k = 0; k < m; ++k) {
        edge[k] = a.D[i] * prefix * suffix[k + 1];
        a.D[n.children[k]] += edge[k];
        prefix *= v.S[n.children[k]];
      }
    }
  }
  return a;
}

//! dS/dlambda_{i,t}: the sum of D over every leaf carrying indicator (i,t).
inline std::vector<std::vector<double>> indicator_derivatives(const SpnCircuit& c, const Evidence& e,
                                                              const AdjointMap& a) {
  std::vector<std::vector<double>> out;
  for (const auto& l : e.lambda) out.emplace_back(l.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Leaf) out[n.var][n.state] += a.D[i];
  }
  return out;
}

//! Marginal of one variable: an interior distribution on its support (states
//! with positive probability) together with the full-alphabet vector.
struct VariableBelief {
  std::vector<std::size_t> support;
  DistVec dist;
  std::size_t cardinality = 0;

  std::vector<double> full() const {
    std::vector<double> out(cardinality, 0.0);
    for (std::size_t k = 0; k < support.size(); ++k) out[support[k]] = dist[k];
    return out;
  }
};

inline VariableBelief belief_from_full(const std::vector<double>& full) {
  VariableBelief b;
  b.cardinality = full.size();
  std::vector<double> w;
  for (std::size_t t = 0; t < full.size(); ++t)
    if (full[t] > 0.0) {
      b.support.push_back(t);
      w.push_back(full[t]);
    }
  b.dist = DistVec::normalized(w);
  return b;
}

//! b_i(t) = lambda_{i,t} * dS/dlambda_{i,t} / S(e).
inline std::vector<VariableBelief> variable_marginals(const SpnCircuit& c, const Evidence& e,
                                                      const ValueMap& v, const AdjointMap& a) {
  const auto d = indicator_derivatives(c, e, a);
  std::vector<VariableBelief> out;
  for (std::size_t i = 0; i < c.num_variables(); ++i) {
    std::vector<double> full(e.lambda[i].size());
    for (std::size_t t = 0; t < full.size(); ++t) full[t] = e.lambda[i][t] * d[i][t] / v.root();
    out.push_back(belief_from_full(full));
  }
  return out;
}

inline std::vector<VariableBelief> spn_marginals(const SpnCircuit& c, const Evidence& e) {
  const auto v = upward_pass(c, e);
  return variable_marginals(c, e, v, downward_pass(c, v));
}

//==============================================================================
struct SumGate {
  std::size_t node;
  std::vector<double> local;   //!< b_s(c) = w_sc S(c) / S(s)
  double visit = 0.0;          //!< pi(s) = D(s) S(s) / S(e)
  std::vector<double> global;  //!< p_s(c) = D(s) w_sc S(c) / S(e)
};

inline std::vector<SumGate> gate_report(const SpnCircuit& c, const ValueMap& v, const AdjointMap& a) {
  std::vector<SumGate> out;
  const double se = v.root();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind != SpnKind::Sum) continue;
    if (!(v.S[i] > 0.0)) throw NumericError("gate_report: sum '" + n.id + "' has zero value");
    SumGate g{i, {}, a.D[i] * v.S[i] / se, {}};
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      const double ws = n.weights[k] * v.S[n.children[k]];
      g.local.push_back(ws / v.S[i]);
      g.global.push_back(a.D[i] * ws / se);
    }
    out.push_back(std::move(g));
  }
  return out;
}

struct KktReport {
  std::vector<std::pair<std::size_t, double>> visit;  //!< (sum node, pi(s))
  //! (product node, child position, mu_{p->c})
  struct EdgeMultiplier {
    std::size_t product, position;
    double mu;
  };
  std::vector<EdgeMultiplier> edges;
  double sum_identity_residual = 0.0;   //!< max |D(s)/S(e) - pi(s)/S(s)| (relative)
  double edge_identity_residual = 0.0;  //!< max |D_{p->c}(c)/S(e) - mu_{p->c}| (relative)
  bool positive = true;                 //!< pi in (0,1] and every mu > 0
};

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline KktReport kkt_multipliers(const SpnCircuit& c, const ValueMap& v, const AdjointMap& a) {
  KktReport r;
  const double se = v.root();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Sum) {
      const double pi = a.D[i] * v.S[i] / se;
      r.visit.push_back({i, pi});
      r.positive = r.positive && pi > 0.0 && pi <= 1.0 + 1e-12;
      r.sum_identity_residual = std::max(r.sum_identity_residual, rel_diff(a.D[i] / se, pi / v.S[i]));
    } else if (n.kind == SpnKind::Product) {
      for (std::size_t k = 0; k < n.children.size(); ++k) {
        const double mu = a.product_edge[i][k] / se;
        r.edges.push_back({i, k, mu});
        r.positive = r.positive && mu > 0.0;
        // Recompute D_{p->c} from the printed formula D(p) prod_{c' != c} S(c').
        double others = 1.0;
        for (std::size_t j = 0; j < n.children.size(); ++j)
          if (j != k) others *= v.S[n.children[j]];
        r.edge_identity_residual = std::max(r.edge_identity_residual, rel_diff(a.D[i] * others / se, mu));
      }
    }
  }
  return r;
}

//==============================================================================
// Log-domain path.

inline double log_sum_exp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

struct LogValueMap {
  std::vector<double> logS;
  double root() const { return logS.back(); }
};

struct LogAdjointMap {
  std::vector<double> logD;
};

inline LogValueMap log_upward_pass(const SpnCircuit& c, const Evidence& e) {
  check_evidence(c, e);
  LogValueMap v{std::vector<double>(c.size())};
  std::vector<double> terms;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    switch (n.kind) {
      case SpnKind::Leaf: v.logS[i] = std::log(e.lambda[n.var][n.state]); break;
      case SpnKind::Product: {
        double s = 0.0;
        for (std::size_t ch : n.children) s += v.logS[ch];
        v.logS[i] = s;
        break;
      }
      case SpnKind::Sum: {
        terms.clear();
        for (std::size_t k = 0; k < n.children.size(); ++k)
          terms.push_back(std::log(n.weights[k]) + v.logS[n.children[k]]);
        v.logS[i] = log_sum_exp(terms);
        break;
      }
    }
  }
  if (!std::isfinite(v.root())) throw NumericError("log_upward_pass: S(e) = 0");
  return v;
}

inline LogAdjointMap log_downward_pass(const SpnCircuit& c, const LogValueMap& v) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> incoming(c.size());
  LogAdjointMap a{std::vector<double>(c.size(), ninf)};
  a.logD[c.root()] = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) {
    if (i != c.root()) a.logD[i] = log_sum_exp(incoming[i]);
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Sum) {
      for (std::size_t k = 0; k < n.children.size(); ++k)
        incoming[n.children[k]].push_back(a.logD[i] + std::log(n.weights[k]));
    } else if (n.kind == SpnKind::Product) {
      const std::size_t m = n.children.size();
      std::vector<double> suffix(m + 1, 0.0);
      for (std::size_t k = m; k-- > 0;) suffix[k] = suffix[k + 1] + v.logS[n.children[k]];
      double prefix = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        incoming[n.children[k]].push_back(a.logD[i] + prefix + suffix[k + 1]);
        prefix += v.logS[n.children[k]];
      }
    }
    incoming[i].clear();
    incoming[i].shrink_to_fit();
  }
  return a;
}

inline std::vector<VariableBelief> log_variable_marginals(const SpnCircuit& c, const Evidence& e,
                                                          const LogValueMap& v, const LogAdjointMap& a) {
  std::vector<std::vector<std::vector<double>>> leaf_terms(c.num_variables());
  for (std::size_t i = 0; i < c.num_variables(); ++i) leaf_terms[i].resize(e.lambda[i].size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Leaf) leaf_terms[n.var][n.state].push_back(a.logD[i]);
  }
  std::vector<VariableBelief> out;
  for (std::size_t i = 0; i < c.num_variables(); ++i) {
    std::vector<double> full(e.lambda[i].size(), 0.0);
    for (std::size_t t = 0; t < full.size(); ++t) {
      if (!(e.lambda[i][t] > 0.0) || leaf_terms[i][t].empty()) continue;
      full[t] = std::exp(std::log(e.lambda[i][t]) + log_sum_exp(leaf_terms[i][t]) - v.root());
    }
    out.push_back(belief_from_full(full));
  }
  return out;
}

//==============================================================================
//! Equivalent tree obtained by duplicating shared sub-circuits. Copies of a
//! node after the first get the id suffix "#k".
inline SpnCircuit unroll(const SpnCircuit& c, std::size_t max_nodes = 10'000) {
  // Tree size below each node, saturating at max_nodes + 1.
  std::vector<std::size_t> tree_size(c.size(), 1);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t ch : c.nodes()[i].children)
      tree_size[i] = std::min(max_nodes + 1, tree_size[i] + tree_size[ch]);
  if (tree_size[c.root()] > max_nodes)
    throw BudgetError("unroll: unrolled circuit exceeds " + std::to_string(max_nodes) + " nodes");
  RawSpn raw;
  std::vector<std::size_t> copies(c.size(), 0);
  // Emit node i (and its subtree) and return the id used.
  auto emit = [&](auto&& self, std::size_t i) -> std::string {
    const auto& n = c.nodes()[i];
    const std::string id = copies[i]++ == 0 ? n.id : n.id + "#" + std::to_string(copies[i] - 1);
    RawSpnNode r{id, kind_name(n.kind), {}, std::nullopt, std::nullopt};
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      const std::string cid = self(self, n.children[k]);
      r.children.push_back({cid, n.kind == SpnKind::Sum ? std::optional<double>(n.weights[k]) : std::nullopt});
    }
    if (n.kind == SpnKind::Leaf) {
      r.var = c.variables()[n.var];
      r.state = static_cast<long long>(n.state);
    }
    raw.nodes.push_back(std::move(r));
    return id;
  };
  raw.root = emit(emit, c.root());
  return SpnCircuit::build(raw);
}

//==============================================================================
//! Marginals for many evidence vectors, evaluated on up to `threads` workers.
//! Output order matches input order.
inline std::vector<std::vector<VariableBelief>> batch_marginals(const SpnCircuit& c,
                                                                const std::vector<Evidence>& evidence,
                                                                unsigned threads = 0) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, evidence.size())));
  std::vector<std::vector<VariableBelief>> out(evidence.size());
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < evidence.size(); k += threads) out[k] = spn_marginals(c, evidence[k]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace klbp
