#pragma once

// Reference implementations used only by the tests. Nothing here calls into
// the library's derivative rules, so agreement is evidence rather than
// tautology.

#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "klbp/comp_graph.hpp"

namespace klbp::testing {

//! Forward-mode dual number.
struct Dual {
  double v = 0.0, d = 0.0;
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

inline Dual dual_apply(const std::string& op, Dual a, Dual b, double p) {
  if (op == "add") return a + b;
  if (op == "sub") return a - b;
  if (op == "mul") return a * b;
  if (op == "div") return a / b;
  if (op == "exp") return {std::exp(a.v), std::exp(a.v) * a.d};
  if (op == "log") return {std::log(a.v), a.d / a.v};
  if (op == "tanh") {
    const double t = std::tanh(a.v);
    return {t, (1.0 - t * t) * a.d};
  }
  if (op == "sigmoid") {
    const double s = 1.0 / (1.0 + std::exp(-a.v));
    return {s, s * (1.0 - s) * a.d};
  }
  if (op == "softplus") return {std::log1p(std::exp(a.v)), a.d / (1.0 + std::exp(-a.v))};
  if (op == "pow") return {std::pow(a.v, p), p * std::pow(a.v, p - 1.0) * a.d};
  throw std::runtime_error("dual_apply: unknown op " + op);
}

//! d output / d input `wrt` by forward mode over the raw node list.
inline double forward_derivative(const RawCompGraph& g, const std::map<std::string, double>& point,
                                 const std::string& wrt) {
  std::map<std::string, Dual> val;
  std::vector<const RawNode*> pending;
  for (const auto& n : g.nodes) pending.push_back(&n);
  while (!pending.empty()) {
    std::vector<const RawNode*> later;
    for (const auto* n : pending) {
      bool ready = true;
      for (const auto& in : n->inputs) ready = ready && val.count(in);
      if (!ready) {
        later.push_back(n);
        continue;
      }
      if (n->op == "input") {
        val[n->id] = {point.at(n->id), n->id == wrt ? 1.0 : 0.0};
      } else if (n->op == "constant") {
        val[n->id] = {*n->value, 0.0};
      } else {
        const Dual a = val[n->inputs[0]];
        const Dual b = n->inputs.size() > 1 ? val[n->inputs[1]] : Dual{};
        val[n->id] = dual_apply(n->op, a, b, n->value.value_or(0.0));
      }
    }
    if (later.size() == pending.size()) throw std::runtime_error("forward_derivative: cycle");
    pending = std::move(later);
  }
  return val.at(g.output).d;
}

//! Reverse mode on a tape recorded from the raw node list: each record keeps
//! its local partials, then a single backward sweep accumulates adjoints.
inline std::map<std::string, double> tape_gradient(const RawCompGraph& g, const std::map<std::string, double>& point) {
  struct Record {
    std::string id;
    std::vector<std::pair<std::string, double>> partials;
  };
  std::map<std::string, double> val;
  std::vector<Record> tape;
  std::vector<const RawNode*> pending;
  for (const auto& n : g.nodes) pending.push_back(&n);
  while (!pending.empty()) {
    std::vector<const RawNode*> later;
    for (const auto* n : pending) {
      bool ready = true;
      for (const auto& in : n->inputs) ready = ready && val.count(in);
      if (!ready) {
        later.push_back(n);
        continue;
      }
      Record r{n->id, {}};
      if (n->op == "input") {
        val[n->id] = point.at(n->id);
      } else if (n->op == "constant") {
        val[n->id] = *n->value;
      } else {
        // Partials from two dual evaluations, one per argument.
        const double a = val[n->inputs[0]];
        const double b = n->inputs.size() > 1 ? val[n->inputs[1]] : 0.0;
        const double p = n->value.value_or(0.0);
        const Dual da = dual_apply(n->op, {a, 1.0}, {b, 0.0}, p);
        val[n->id] = da.v;
        r.partials.push_back({n->inputs[0], da.d});
        if (n->inputs.size() > 1) r.partials.push_back({n->inputs[1], dual_apply(n->op, {a, 0.0}, {b, 1.0}, p).d});
      }
      tape.push_back(std::move(r));
    }
    if (later.size() == pending.size()) throw std::runtime_error("tape_gradient: cycle");
    pending = std::move(later);
  }
  std::map<std::string, double> adj;
  adj[g.output] = 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    const double a = adj[it->id];
    for (const auto& [in, d] : it->partials) adj[in] += a * d;
  }
  return adj;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace klbp::testing
