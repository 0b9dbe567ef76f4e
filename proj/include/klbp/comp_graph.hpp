#pragma once

// Scalar computation DAGs over C1 primitives, forward evaluation, and
// adjoints as log-derivatives of downward messages under an output factor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "klbp/error.hpp"
#include "klbp/factor_graph.hpp"

namespace klbp {

enum class Op { Input, Constant, Add, Sub, Mul, Div, Exp, Log, Sigmoid, Tanh, Softplus, Pow };

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Softplus: return "softplus";
    case Op::Pow: return "pow";
  }
  return "?";
}

inline std::optional<Op> parse_op(const std::string& s) {
  static const std::map<std::string, Op> table = {
      {"input", Op::Input}, {"constant", Op::Constant}, {"add", Op::Add},
      {"sub", Op::Sub},     {"mul", Op::Mul},           {"div", Op::Div},
      {"exp", Op::Exp},     {"log", Op::Log},           {"sigmoid", Op::Sigmoid},
      {"tanh", Op::Tanh},   {"softplus", Op::Softplus}, {"pow", Op::Pow}};
  const auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

inline std::size_t op_arity(Op op) {
  switch (op) {
    case Op::Input:
    case Op::Constant: return 0;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: return 2;
    default: return 1;
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

//! Node as read from a file, before validation.
struct RawNode {
  std::string id;
  std::string op;
  std::vector<std::string> inputs;
  std::optional<double> value;
};

struct RawCompGraph {
  std::vector<RawNode> nodes;
  std::string output;
};

//! Structural checks: known C1 op, arity, unique ids, resolvable inputs,
//! acyclicity, an existing output. Domain hazards (div, log, fractional pow)
//! are listed as warnings and re-checked at evaluation.
inline ValidationReport validate_dag(const RawCompGraph& g) {
  ValidationReport rep;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (!index.emplace(g.nodes[i].id, i).second) rep.fail("duplicate node id '" + g.nodes[i].id + "'");
  for (const auto& n : g.nodes) {
    const auto op = parse_op(n.op);
    if (!op) {
      if (n.op == "relu" || n.op == "abs" || n.op == "max" || n.op == "min")
        rep.fail("node '" + n.id + "': op '" + n.op + "' is not continuously differentiable");
      else
        rep.fail("node '" + n.id + "': unknown op '" + n.op + "'");
      continue;
    }
    if (n.inputs.size() != op_arity(*op))
      rep.fail("node '" + n.id + "': op '" + n.op + "' takes " + std::to_string(op_arity(*op)) +
               " inputs, got " + std::to_string(n.inputs.size()));
    if ((*op == Op::Constant || *op == Op::Pow) && (!n.value || !std::isfinite(*n.value)))
      rep.fail("node '" + n.id + "': op '" + n.op + "' needs a finite value");
    for (const auto& in : n.inputs)
      if (!index.count(in)) rep.fail("node '" + n.id + "': unknown input '" + in + "'");
    if (*op == Op::Div || *op == Op::Log)
      rep.warnings.push_back("node '" + n.id + "': domain of '" + n.op + "' checked at evaluation");
    if (*op == Op::Pow && n.value && std::floor(*n.value) != *n.value)
      rep.warnings.push_back("node '" + n.id + "': fractional power needs a positive base");
  }
  if (g.output.empty())
    rep.fail("no output node designated");
  else if (!index.count(g.output))
    rep.fail("output '" + g.output + "' is not a node");
  if (!rep.valid) return rep;
  // Kahn's algorithm for cycle detection.
  std::vector<std::size_t> indeg(g.nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    for (const auto& in : g.nodes[i].inputs) {
      users[index[in]].push_back(i);
      ++indeg[i];
    }
  std::vector<std::size_t> ready;
  for (std::size_t i = 0; i < indeg.size(); ++i)
    if (!indeg[i]) ready.push_back(i);
  std::size_t done = 0;
  while (!ready.empty()) {
    const std::size_t i = ready.back();
    ready.pop_back();
    ++done;
    for (std::size_t u : users[i])
      if (!--indeg[u]) ready.push_back(u);
  }
  if (done != g.nodes.size()) {
    std::string ids;
    for (std::size_t i = 0; i < indeg.size(); ++i)
      if (indeg[i]) ids += (ids.empty() ? "" : ", ") + g.nodes[i].id;
    rep.fail("graph has a cycle through: " + ids);
  }
  return rep;
}

//! Validated DAG with nodes stored in a topological order.
class CompGraph {
 public:
  struct Node {
    std::string id;
    Op op;
    std::vector<std::size_t> inputs;
    double value = 0.0;  //!< constant value or pow exponent
  };

  static CompGraph build(const RawCompGraph& raw) {
    const auto rep = validate_dag(raw);
    if (!rep.valid) throw ValidationError("invalid computation graph: " + rep.violations.front());
    std::unordered_map<std::string, std::size_t> raw_index;
    for (std::size_t i = 0; i < raw.nodes.size(); ++i) raw_index[raw.nodes[i].id] = i;
    // Depth-first topological sort, visiting nodes in declaration order.
    std::vector<int> state(raw.nodes.size(), 0);
    std::vector<std::size_t> order;
    for (std::size_t start = 0; start < raw.nodes.size(); ++start) {
      if (state[start]) continue;
      std::vector<std::pair<std::size_t, std::size_t>> stack{{start, 0}};
      state[start] = 1;
      while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < raw.nodes[n].inputs.size()) {
          const std::size_t c = raw_index[raw.nodes[n].inputs[next++]];
          if (!state[c]) {
            state[c] = 1;
            stack.push_back({c, 0});
          }
        } else {
          order.push_back(n);
          stack.pop_back();
        }
      }
    }
    CompGraph g;
    std::vector<std::size_t> pos(raw.nodes.size());
    for (std::size_t k = 0; k < order.size(); ++k) pos[order[k]] = k;
    for (std::size_t k : order) {
      const auto& rn = raw.nodes[k];
      Node n{rn.id, *parse_op(rn.op), {}, rn.value.value_or(0.0)};
      for (const auto& in : rn.inputs) n.inputs.push_back(pos[raw_index[in]]);
      g.index_[n.id] = g.nodes_.size();
      g.nodes_.push_back(std::move(n));
    }
    g.output_ = g.index_.at(raw.output);
    return g;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t output() const { return output_; }

  std::size_t index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ShapeError("unknown node id '" + id + "'");
    return it->second;
  }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  std::vector<std::string> input_ids() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.op == Op::Input) out.push_back(n.id);
    return out;
  }

  RawCompGraph to_raw() const {
    RawCompGraph raw;
    for (const auto& n : nodes_) {
      RawNode r{n.id, op_name(n.op), {}, std::nullopt};
      for (std::size_t i : n.inputs) r.inputs.push_back(nodes_[i].id);
      if (n.op == Op::Constant || n.op == Op::Pow) r.value = n.value;
      raw.nodes.push_back(std::move(r));
    }
    raw.output = nodes_[output_].id;
    return raw;
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t output_ = 0;
};

//! Incremental construction of a RawCompGraph.
class CompGraphBuilder {
 public:
  CompGraphBuilder& input(std::string id) { return add({std::move(id), "input", {}, std::nullopt}); }
  CompGraphBuilder& constant(std::string id, double v) { return add({std::move(id), "constant", {}, v}); }
  CompGraphBuilder& unary(std::string id, Op op, std::string in) {
    return add({std::move(id), op_name(op), {std::move(in)}, std::nullopt});
  }
  CompGraphBuilder& binary(std::string id, Op op, std::string a, std::string b) {
    return add({std::move(id), op_name(op), {std::move(a), std::move(b)}, std::nullopt});
  }
  CompGraphBuilder& pow(std::string id, std::string in, double exponent) {
    return add({std::move(id), "pow", {std::move(in)}, exponent});
  }
  RawCompGraph raw(std::string output) const { return {nodes_, std::move(output)}; }
  CompGraph build(std::string output) const { return CompGraph::build(raw(std::move(output))); }

 private:
  CompGraphBuilder& add(RawNode n) {
    nodes_.push_back(std::move(n));
    return *this;
  }
  std::vector<RawNode> nodes_;
};

//==============================================================================
namespace detail {

inline double apply_op(Op op, double a, double b, double param, const std::string& id) {
  auto domain = [&](const std::string& what) { return DomainError("node '" + id + "': " + what); };
  switch (op) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a * b;
    case Op::Div:
      if (b == 0.0) throw domain("division by zero");
      return a / b;
    case Op::Exp: return std::exp(a);
    case Op::Log:
      if (!(a > 0.0)) throw domain("log of nonpositive argument");
      return std::log(a);
    case Op::Sigmoid: return sigmoid(a);
    case Op::Tanh: return std::tanh(a);
    case Op::Softplus: return softplus(a);
    case Op::Pow:
      if (std::floor(param) != param && !(a > 0.0)) throw domain("fractional power of nonpositive base");
      if (param < 1.0 && a == 0.0) throw domain("power not differentiable at zero");
      return std::pow(a, param);
    default: throw domain("not an operation");
  }
}

//! Partial derivative of the op output with respect to input slot k.
inline double op_partial(Op op, double a, double b, double param, double out, std::size_t k) {
  switch (op) {
    case Op::Add: return 1.0;
    case Op::Sub: return k == 0 ? 1.0 : -1.0;
    case Op::Mul: return k == 0 ? b : a;
    case Op::Div: return k == 0 ? 1.0 / b : -a / (b * b);
    case Op::Exp: return out;
    case Op::Log: return 1.0 / a;
    case Op::Sigmoid: return out * (1.0 - out);
    case Op::Tanh: return 1.0 - out * out;
    case Op::Softplus: return sigmoid(a);
    case Op::Pow: return param == 0.0 ? 0.0 : param * std::pow(a, param - 1.0);
    default: return 0.0;
  }
}

}  // namespace detail

//! Node values at a forward point, indexed like CompGraph::nodes().
struct ForwardTrace {
  std::vector<double> values;
};

//! Evaluates nodes in topological order. Values of any node listed in
//! `overrides` are replaced before its users are evaluated.
inline ForwardTrace forward_eval(const CompGraph& g, const std::map<std::string, double>& inputs,
                                 const std::map<std::size_t, double>& overrides = {}) {
  ForwardTrace t{std::vector<double>(g.size())};
  for (const auto& [id, _] : inputs)
    if (!g.contains(id) || g.nodes()[g.index_of(id)].op != Op::Input)
      throw ShapeError("forward_eval: '" + id + "' is not an input node");
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& n = g.nodes()[i];
    double v = 0.0;
    if (n.op == Op::Input) {
      const auto it = inputs.find(n.id);
      if (it == inputs.end()) throw ShapeError("forward_eval: input '" + n.id + "' not assigned");
      v = it->second;
    } else if (n.op == Op::Constant) {
      v = n.value;
    } else {
      const double a = t.values[n.inputs[0]];
      const double b = n.inputs.size() > 1 ? t.values[n.inputs[1]] : 0.0;
      v = detail::apply_op(n.op, a, b, n.value, n.id);
    }
    if (const auto o = overrides.find(i); o != overrides.end()) v = o->second;
    if (!std::isfinite(v)) throw DomainError("node '" + n.id + "': non-finite value");
    t.values[i] = v;
  }
  return t;
}

//==============================================================================
//! Output factor phi(z) = exp(alpha z).
struct ExpScale {
  double alpha = 1.0;
};

enum class LossKind { Squared, Logistic };

//! Output factor phi(z) = exp(-L(z)/T). Squared: L = (z - target)^2 / 2.
//! Logistic: L = softplus(z) - label z with label in {0, 1}.
struct NegLossTemp {
  LossKind kind = LossKind::Squared;
  double param = 0.0;
  double temperature = 1.0;
};

using OutputFactor = std::variant<ExpScale, NegLossTemp>;

inline void check_factor(const OutputFactor& f) {
  if (const auto* n = std::get_if<NegLossTemp>(&f)) {
    if (!(n->temperature > 0.0) || !std::isfinite(n->temperature))
      throw DomainError("output factor: temperature must be positive");
    if (n->kind == LossKind::Logistic && n->param != 0.0 && n->param != 1.0)
      throw DomainError("output factor: logistic label must be 0 or 1");
  } else if (!std::isfinite(std::get<ExpScale>(f).alpha)) {
    throw DomainError("output factor: alpha must be finite");
  }
}

inline double loss_value(const NegLossTemp& f, double z) {
  if (f.kind == LossKind::Squared) return 0.5 * (z - f.param) * (z - f.param);
  return softplus(z) - f.param * z;
}

inline double loss_derivative(const NegLossTemp& f, double z) {
  if (f.kind == LossKind::Squared) return z - f.param;
  return sigmoid(z) - f.param;
}

//! log phi(z)
inline double log_output_factor(const OutputFactor& f, double z) {
  if (const auto* e = std::get_if<ExpScale>(&f)) return e->alpha * z;
  const auto& n = std::get<NegLossTemp>(f);
  return -loss_value(n, z) / n.temperature;
}

//! phi'(z*) / phi(z*)
inline double seed_score(const OutputFactor& f, double z_star) {
  check_factor(f);
  if (const auto* e = std::get_if<ExpScale>(&f)) return e->alpha;
  const auto& n = std::get<NegLossTemp>(f);
  return -loss_derivative(n, z_star) / n.temperature;
}

//! s(v) for every node, indexed like CompGraph::nodes().
struct AdjointSet {
  std::vector<double> s;
};

//! Reverse sweep s(x) = sum over users y of s(y) dy/dx, seeded at the output.
inline AdjointSet backward_adjoints(const CompGraph& g, const ForwardTrace& t, const OutputFactor& f) {
  if (t.values.size() != g.size()) throw ShapeError("backward_adjoints: trace does not match graph");
  AdjointSet adj{std::vector<double>(g.size(), 0.0)};
  adj.s[g.output()] = seed_score(f, t.values[g.output()]);
  for (std::size_t i = g.size(); i-- > 0;) {
    const auto& n = g.nodes()[i];
    if (n.inputs.empty() || adj.s[i] == 0.0) continue;
    const double a = t.values[n.inputs[0]];
    const double b = n.inputs.size() > 1 ? t.values[n.inputs[1]] : 0.0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k)
      adj.s[n.inputs[k]] += adj.s[i] * detail::op_partial(n.op, a, b, n.value, t.values[i], k);
  }
  return adj;
}

//==============================================================================
//! A primitive viewed as a unary map of one argument. For binary ops the
//! other argument is clamped; `slot` selects which argument varies.
struct Primitive {
  Op op = Op::Sigmoid;
  double clamped = 0.0;
  std::size_t slot = 0;
  double exponent = 2.0;

  double value(double x) const {
    if (op_arity(op) == 2) {
      const double a = slot == 0 ? x : clamped;
      const double b = slot == 0 ? clamped : x;
      return detail::apply_op(op, a, b, exponent, op_name(op));
    }
    return detail::apply_op(op, x, 0.0, exponent, op_name(op));
  }

  double derivative(double x) const {
    const double out = value(x);
    if (op_arity(op) == 2) {
      const double a = slot == 0 ? x : clamped;
      const double b = slot == 0 ? clamped : x;
      return detail::op_partial(op, a, b, exponent, out, slot);
    }
    return detail::op_partial(op, x, 0.0, exponent, out, 0);
  }
};

inline double fd_step(double x) { return 1e-5 * std::max(1.0, std::abs(x)); }

//! Left: central difference of log m(x) = s_y psi(x), the log of the
//! exponential witness message pulled back through psi. Right: s_y psi'(x*).
inline std::pair<double, double> delta_chain_check(const Primitive& psi, double s_y, double x_star) {
  if (psi.op == Op::Input || psi.op == Op::Constant) throw DomainError("delta_chain_check: not a primitive");
  const double h = fd_step(x_star);
  const double left = (s_y * psi.value(x_star + h) - s_y * psi.value(x_star - h)) / (2.0 * h);
  return {left, s_y * psi.derivative(x_star)};
}

//! Edge (from, to) in node ids, with from an input of to.
using EdgeScales = std::map<std::pair<std::string, std::string>, double>;

//! log b(v) on a grid of values for one node: downstream nodes are recomputed
//! with every other node clamped to its trace value, and log phi(z(v)) is
//! offset by the logs of the scales on edges downstream of the node.
inline std::vector<double> downward_log_belief(const CompGraph& g, const ForwardTrace& t,
                                               const OutputFactor& f, const std::string& var,
                                               std::span<const double> grid,
                                               const EdgeScales& edge_scales = {}) {
  check_factor(f);
  const std::size_t vi = g.index_of(var);
  std::vector<char> downstream(g.size(), 0);
  downstream[vi] = 1;
  for (std::size_t i = vi + 1; i < g.size(); ++i)
    for (std::size_t in : g.nodes()[i].inputs)
      if (downstream[in]) downstream[i] = 1;
  double offset = 0.0;
  for (const auto& [edge, scale] : edge_scales) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw DomainError("downward_log_belief: edge scale must be positive");
    const std::size_t from = g.index_of(edge.first);
    const std::size_t to = g.index_of(edge.second);
    const auto& ins = g.nodes()[to].inputs;
    if (std::find(ins.begin(), ins.end(), from) == ins.end())
      throw ShapeError("downward_log_belief: '" + edge.first + "' is not an input of '" + edge.second + "'");
    if (downstream[from]) offset += std::log(scale);
  }
  std::vector<double> out;
  out.reserve(grid.size());
  std::vector<double> vals = t.values;
  for (double v : grid) {
    vals[vi] = v;
    for (std::size_t i = vi + 1; i < g.size(); ++i) {
      if (!downstream[i]) continue;
      const auto& n = g.nodes()[i];
      const double a = vals[n.inputs[0]];
      const double b = n.inputs.size() > 1 ? vals[n.inputs[1]] : 0.0;
      vals[i] = detail::apply_op(n.op, a, b, n.value, n.id);
    }
    const double lb = log_output_factor(f, vals[g.output()]) + offset;
    if (!std::isfinite(lb)) throw DomainError("downward_log_belief: non-finite value at grid point");
    out.push_back(lb);
  }
  return out;
}

//! Central-difference slope at the middle of an odd-length uniform grid.
inline double grid_slope(std::span<const double> grid, std::span<const double> values) {
  if (grid.size() < 3 || grid.size() % 2 == 0 || values.size() != grid.size())
    throw ShapeError("grid_slope: need an odd grid of at least three points");
  const std::size_t c = grid.size() / 2;
  return (values[c + 1] - values[c - 1]) / (grid[c + 1] - grid[c - 1]);
}

}  // namespace klbp
