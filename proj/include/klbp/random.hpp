#pragma once

// Seeded random instance generators for circuits, factor graphs,
// computation DAGs and posterior models.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "klbp/comp_graph.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/posterior.hpp"
#include "klbp/spn.hpp"

namespace klbp {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

//==============================================================================
struct SpnGenOptions {
  std::size_t max_vars = 4;
  std::size_t max_states = 3;
  std::size_t min_states = 2;
  std::size_t max_nodes = 25;
  bool tree = false;           //!< forbid node sharing
  std::size_t max_depth = 0;   //!< 0: no constraint beyond the node budget
  double lambda_lo = 0.1, lambda_hi = 2.0;
};

struct GeneratedSpn {
  RawSpn circuit;
  std::map<std::string, std::vector<double>> evidence;
};

namespace detail {

class SpnBuilder {
 public:
  SpnBuilder(Rng& rng, const SpnGenOptions& opt, std::vector<std::size_t> cards)
      : rng_(rng), opt_(opt), cards_(std::move(cards)) {}

  //! Returns the id of a node with the given scope, or throws when the node
  //! budget is exhausted.
  std::string build(const std::vector<std::size_t>& scope, std::size_t depth) {
    if (!opt_.tree) {
      const auto it = cache_.find(scope);
      if (it != cache_.end() && uniform(rng_, 0, 1) < 0.4) return it->second;
    }
    std::string id = scope.size() == 1 ? univariate(scope.front()) : mixture(scope, depth);
    cache_[scope] = id;
    return id;
  }

  RawSpn finish(std::string root) {
    return {std::move(nodes_), std::move(root)};
  }

  struct Budget {};

 private:
  std::string fresh(const char* prefix) {
    if (nodes_.size() >= opt_.max_nodes) throw Budget{};
    return std::string(prefix) + std::to_string(counter_++);
  }

  std::string leaf(std::size_t var, std::size_t state) {
    if (!opt_.tree) {
      const auto key = std::make_pair(var, state);
      if (const auto it = leaves_.find(key); it != leaves_.end()) return it->second;
    }
    const std::string id = fresh("L");
    nodes_.push_back({id, "leaf", {}, "X" + std::to_string(var), static_cast<long long>(state)});
    leaves_[{var, state}] = id;
    return id;
  }

  std::string univariate(std::size_t var) {
    const std::size_t card = cards_[var];
    if (card == 1 || uniform(rng_, 0, 1) < 0.3) return leaf(var, uniform_int(rng_, 0, card - 1));
    std::vector<std::size_t> states(card);
    for (std::size_t t = 0; t < card; ++t) states[t] = t;
    std::shuffle(states.begin(), states.end(), rng_);
    states.resize(uniform_int(rng_, 2, card));
    std::sort(states.begin(), states.end());
    RawSpnNode s{"", "sum", {}, std::nullopt, std::nullopt};
    for (std::size_t t : states) s.children.push_back({leaf(var, t), uniform(rng_, 0.1, 1.0)});
    s.id = fresh("S");
    nodes_.push_back(s);
    return s.id;
  }

  std::string mixture(const std::vector<std::size_t>& scope, std::size_t depth) {
    const bool deep_ok = opt_.max_depth == 0 || depth + 2 < opt_.max_depth;
    const std::size_t k = deep_ok ? uniform_int(rng_, 1, 3) : 1;
    RawSpnNode s{"", "sum", {}, std::nullopt, std::nullopt};
    for (std::size_t c = 0; c < k; ++c) s.children.push_back({product(scope, depth + 1), uniform(rng_, 0.1, 1.0)});
    if (k == 1 && uniform(rng_, 0, 1) < 0.5) return s.children.front().id;
    s.id = fresh("S");
    nodes_.push_back(s);
    return s.id;
  }

  std::string product(const std::vector<std::size_t>& scope, std::size_t depth) {
    // Random partition into 2..|scope| nonempty parts.
    std::vector<std::size_t> shuffled = scope;
    std::shuffle(shuffled.begin(), shuffled.end(), rng_);
    const std::size_t parts = uniform_int(rng_, 2, scope.size());
    std::vector<std::vector<std::size_t>> blocks(parts);
    for (std::size_t i = 0; i < shuffled.size(); ++i)
      blocks[i < parts ? i : uniform_int(rng_, 0, parts - 1)].push_back(shuffled[i]);
    RawSpnNode p{"", "product", {}, std::nullopt, std::nullopt};
    for (auto& b : blocks) {
      std::sort(b.begin(), b.end());
      p.children.push_back({build(b, depth + 1), std::nullopt});
    }
    p.id = fresh("P");
    nodes_.push_back(p);
    return p.id;
  }

  Rng& rng_;
  const SpnGenOptions& opt_;
  std::vector<std::size_t> cards_;
  std::vector<RawSpnNode> nodes_;
  std::map<std::vector<std::size_t>, std::string> cache_;
  std::map<std::pair<std::size_t, std::size_t>, std::string> leaves_;
  std::size_t counter_ = 0;
};

}  // namespace detail

//! Random complete, decomposable circuit with random soft evidence. Sum and
//! product layers alternate over random scope partitions; structures over the
//! node budget are redrawn.
inline GeneratedSpn random_spn(Rng& rng, const SpnGenOptions& opt = {}) {
  if (opt.max_vars == 0 || opt.max_states == 0 || opt.min_states > opt.max_states || opt.max_nodes == 0)
    throw DomainError("random_spn: infeasible size parameters");
  for (int attempt = 0; attempt < 10'000; ++attempt) {
    const std::size_t nv = uniform_int(rng, 1, opt.max_vars);
    std::vector<std::size_t> cards(nv);
    for (auto& c : cards) c = uniform_int(rng, opt.min_states, opt.max_states);
    detail::SpnBuilder b(rng, opt, cards);
    std::vector<std::size_t> scope(nv);
    for (std::size_t i = 0; i < nv; ++i) scope[i] = i;
    try {
      GeneratedSpn g;
      g.circuit = b.finish(b.build(scope, 0));
      const auto c = SpnCircuit::build(g.circuit);
      if (opt.max_depth && c.depth() > opt.max_depth) continue;
      for (std::size_t i = 0; i < nv; ++i) {
        std::vector<double> l(cards[i]);
        for (double& x : l) x = uniform(rng, opt.lambda_lo, opt.lambda_hi);
        g.evidence["X" + std::to_string(i)] = std::move(l);
      }
      // Variables never reached by a leaf do not exist in the circuit.
      for (auto it = g.evidence.begin(); it != g.evidence.end();) {
        const auto& vars = c.variables();
        it = std::find(vars.begin(), vars.end(), it->first) == vars.end() ? g.evidence.erase(it) : std::next(it);
      }
      return g;
    } catch (const detail::SpnBuilder::Budget&) {
    }
  }
  throw DomainError("random_spn: could not fit a circuit in the node budget");
}

//==============================================================================
struct FgGenOptions {
  std::size_t max_vars = 6;
  std::size_t max_card = 3;
  std::size_t lift_budget = std::size_t{1} << 16;  //!< cap on the replicated joint size
  double lo = 0.2, hi = 2.0;
};

//! Random tree: each variable after the first attaches to an earlier one by a
//! pairwise factor; some variables get unary factors.
inline FactorGraph random_tree_fg(Rng& rng, const FgGenOptions& opt = {}) {
  for (int attempt = 0; attempt < 10'000; ++attempt) {
    const std::size_t n = uniform_int(rng, 1, opt.max_vars);
    std::vector<FgVariable> vars;
    for (std::size_t i = 0; i < n; ++i) vars.push_back({"v" + std::to_string(i), uniform_int(rng, 2, opt.max_card)});
    std::vector<FgFactor> factors;
    std::size_t lift = 1;
    auto table = [&](std::size_t size) {
      std::vector<double> t(size);
      for (double& x : t) x = uniform(rng, opt.lo, opt.hi);
      return t;
    };
    for (std::size_t i = 1; i < n; ++i) {
      const std::size_t p = uniform_int(rng, 0, i - 1);
      factors.push_back({"f" + std::to_string(p) + "_" + std::to_string(i), {p, i},
                         table(vars[p].cardinality * vars[i].cardinality)});
      lift *= vars[p].cardinality * vars[i].cardinality;
    }
    for (std::size_t i = 0; i < n; ++i)
      if (n == 1 || uniform(rng, 0, 1) < 0.5) {
        factors.push_back({"u" + std::to_string(i), {i}, table(vars[i].cardinality)});
        lift *= vars[i].cardinality;
      }
    if (lift > opt.lift_budget) continue;
    return FactorGraph(std::move(vars), std::move(factors));
  }
  throw DomainError("random_tree_fg: could not meet the lift budget");
}

//! Three binary variables in a cycle of pairwise factors, optionally with
//! unary factors.
inline FactorGraph three_cycle(Rng& rng, bool unaries = false, double lo = 0.5, double hi = 2.0) {
  std::vector<FgVariable> vars{{"a", 2}, {"b", 2}, {"c", 2}};
  auto table = [&](std::size_t size) {
    std::vector<double> t(size);
    for (double& x : t) x = uniform(rng, lo, hi);
    return t;
  };
  std::vector<FgFactor> f{{"ab", {0, 1}, table(4)}, {"bc", {1, 2}, table(4)}, {"ca", {2, 0}, table(4)}};
  if (unaries)
    for (std::size_t i = 0; i < 3; ++i) f.push_back({"u" + vars[i].id, {i}, table(2)});
  return FactorGraph(std::move(vars), std::move(f));
}

//==============================================================================
struct DagGenOptions {
  std::size_t max_nodes = 30;
  std::vector<std::string> inputs = {"x0", "x1", "x2"};
  double input_lo = -1.5, input_hi = 1.5;
  double max_abs_value = 50.0;
};

struct GeneratedDag {
  RawCompGraph graph;
  std::map<std::string, double> point;
};

//! Random DAG over the C1 primitive set, redrawn until it evaluates at a
//! random point with every value bounded and away from domain edges.
inline GeneratedDag random_dag(Rng& rng, const DagGenOptions& opt = {}) {
  static const Op unary_ops[] = {Op::Exp, Op::Log, Op::Sigmoid, Op::Tanh, Op::Softplus, Op::Pow};
  static const Op binary_ops[] = {Op::Add, Op::Sub, Op::Mul, Op::Div};
  if (opt.inputs.empty() || opt.max_nodes < opt.inputs.size() + 1) throw DomainError("random_dag: infeasible size");
  for (int attempt = 0; attempt < 100'000; ++attempt) {
    CompGraphBuilder b;
    std::vector<std::string> ids;
    std::vector<double> vals;
    GeneratedDag g;
    for (const auto& in : opt.inputs) {
      b.input(in);
      ids.push_back(in);
      const double v = uniform(rng, opt.input_lo, opt.input_hi);
      g.point[in] = v;
      vals.push_back(v);
    }
    const std::size_t total = uniform_int(rng, opt.inputs.size() + 1, opt.max_nodes);
    bool ok = true;
    // Prefer recent nodes so graphs get deep rather than wide.
    auto pick = [&]() {
      const std::size_t n = ids.size();
      const std::size_t back = std::min<std::size_t>(n - 1, uniform_int(rng, 0, 3));
      return uniform(rng, 0, 1) < 0.7 ? n - 1 - back : uniform_int(rng, 0, n - 1);
    };
    for (std::size_t k = ids.size(); k < total && ok; ++k) {
      const std::string id = "n" + std::to_string(k);
      const double r = uniform(rng, 0, 1);
      double v = 0.0;
      if (r < 0.08) {
        v = std::round(uniform(rng, -2.0, 2.0) * 4.0) / 4.0;
        b.constant(id, v);
      } else if (r < 0.5) {
        const Op op = binary_ops[uniform_int(rng, 0, 3)];
        const std::size_t a = pick(), c = pick();
        if (op == Op::Div && std::abs(vals[c]) < 0.2) {
          ok = false;
          break;
        }
        v = detail::apply_op(op, vals[a], vals[c], 0.0, id);
        b.binary(id, op, ids[a], ids[c]);
      } else {
        const Op op = unary_ops[uniform_int(rng, 0, 5)];
        const std::size_t a = pick();
        double expo = 0.0;
        if (op == Op::Log && vals[a] < 0.1) {
          ok = false;
          break;
        }
        if (op == Op::Pow) {
          static const double exps[] = {2.0, 3.0, -1.0, 0.5};
          expo = exps[uniform_int(rng, 0, 3)];
          if ((expo < 0.0 && std::abs(vals[a]) < 0.2) || (expo == 0.5 && vals[a] < 0.1)) {
            ok = false;
            break;
          }
          b.pow(id, ids[a], expo);
        } else {
          b.unary(id, op, ids[a]);
        }
        v = detail::apply_op(op, vals[a], 0.0, expo, id);
      }
      if (!std::isfinite(v) || std::abs(v) > opt.max_abs_value) ok = false;
      ids.push_back(id);
      vals.push_back(v);
    }
    if (!ok) continue;
    g.graph = b.raw(ids.back());
    return g;
  }
  throw DomainError("random_dag: no admissible graph found");
}

//==============================================================================
struct PosteriorGenOptions {
  std::size_t max_inputs = 4;
  std::size_t max_grid = 5;
  std::size_t max_theta = 3;
  bool exp_only = false;
};

//! Random model: per-input graphs read "x" and a random subset of the
//! parameters; the likelihood is drawn from all three families unless
//! exp_only is set.
inline PosteriorModel random_posterior(Rng& rng, const PosteriorGenOptions& opt = {}) {
  PosteriorModel m;
  const std::size_t nt = uniform_int(rng, 1, opt.max_theta);
  for (std::size_t k = 0; k < nt; ++k) m.theta.push_back(uniform(rng, -1.0, 1.0));
  const std::size_t ni = uniform_int(rng, 1, opt.max_inputs);
  for (std::size_t i = 0; i < ni; ++i) {
    const std::size_t ng = uniform_int(rng, 2, opt.max_grid);
    std::vector<double> grid;
    for (std::size_t t = 0; t < ng; ++t) grid.push_back(std::round(uniform(rng, -1.0, 1.0) * 100.0) / 100.0);
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    std::vector<double> w;
    for (std::size_t t = 0; t < grid.size(); ++t) w.push_back(uniform(rng, 0.1, 1.0));
    // Graph over x and theta, rejected unless it evaluates on every grid point.
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10'000) throw DomainError("random_posterior: no admissible score graph");
      DagGenOptions dopt;
      dopt.max_nodes = 10;
      dopt.inputs = {"x"};
      for (std::size_t k = 0; k < nt; ++k) dopt.inputs.push_back(theta_name(k));
      dopt.max_abs_value = 10.0;
      auto gd = random_dag(rng, dopt);
      try {
        auto g = CompGraph::build(gd.graph);
        bool ok = true;
        for (double x : grid) {
          std::map<std::string, double> assign{{"x", x}};
          for (std::size_t k = 0; k < nt; ++k) assign[theta_name(k)] = m.theta[k];
          const auto tr = forward_eval(g, assign);
          for (double v : tr.values) ok = ok && std::abs(v) <= 10.0;
        }
        if (!ok) continue;
        m.inputs.push_back({grid, DistVec::normalized(w), std::move(g)});
        break;
      } catch (const DomainError&) {
      }
    }
  }
  const double r = opt.exp_only ? 0.0 : uniform(rng, 0, 1);
  if (r < 0.4)
    m.likelihood = ExpScale{std::round(uniform(rng, -2.0, 2.0) * 100.0) / 100.0};
  else if (r < 0.7)
    m.likelihood = NegLossTemp{LossKind::Squared, std::round(uniform(rng, -1.0, 1.0) * 100.0) / 100.0,
                               std::round(uniform(rng, 0.5, 2.0) * 100.0) / 100.0};
  else
    m.likelihood = NegLossTemp{LossKind::Logistic, static_cast<double>(uniform_int(rng, 0, 1)),
                               std::round(uniform(rng, 0.5, 2.0) * 100.0) / 100.0};
  return m;
}

}  // namespace klbp
