#pragma once

// Brute-force references: exhaustive enumeration, central finite
// differences, and Bregman projections by direct numerical minimization.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "klbp/dist.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/projection.hpp"
#include "klbp/spn.hpp"

namespace klbp {

//! Joint of a factor graph by table product (not normalized), row-major over
//! variables in index order.
inline std::vector<double> enumerate_fg_joint(const FactorGraph& fg) {
  require_valid(fg);
  std::vector<std::size_t> cards;
  for (const auto& v : fg.variables()) cards.push_back(v.cardinality);
  const std::size_t total = checked_product(cards, enumeration_budget(), "enumerate_fg_marginals");
  std::vector<double> joint(total, 1.0);
  std::vector<std::size_t> x(cards.size(), 0);
  for (std::size_t n = 0; n < total; ++n) {
    double w = 1.0;
    for (const auto& f : fg.factors()) {
      std::size_t idx = 0;
      for (std::size_t v : f.vars) idx = idx * cards[v] + x[v];
      w *= f.table[idx];
    }
    joint[n] = w;
    for (std::size_t j = cards.size(); j-- > 0;) {
      if (++x[j] < cards[j]) break;
      x[j] = 0;
    }
  }
  return joint;
}

//! Per-variable marginals of the normalized joint (entries may be zero when
//! the graph has structural zeros).
inline std::vector<std::vector<double>> enumerate_fg_marginals_raw(const FactorGraph& fg) {
  const auto joint = enumerate_fg_joint(fg);
  std::vector<std::size_t> cards;
  for (const auto& v : fg.variables()) cards.push_back(v.cardinality);
  double total = 0.0;
  for (double w : joint) total += w;
  if (!(total > 0.0)) throw NumericError("enumerate_fg_marginals: joint has zero mass");
  std::vector<std::vector<double>> out;
  for (std::size_t v = 0; v < cards.size(); ++v) {
    const std::size_t keep[] = {v};
    auto m = detail::marginal(joint, cards, keep);
    for (double& x : m) x /= total;
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<DistVec> enumerate_fg_marginals(const FactorGraph& fg) {
  std::vector<DistVec> out;
  for (const auto& m : enumerate_fg_marginals_raw(fg)) out.push_back(DistVec::normalized(m));
  return out;
}

//==============================================================================
namespace detail {

//! Plain bottom-up evaluation, written independently of the engine.
inline double evaluate_circuit(const SpnCircuit& c, const std::vector<std::vector<double>>& lambda) {
  std::vector<double> s(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.nodes()[i];
    if (n.kind == SpnKind::Leaf) {
      s[i] = lambda[n.var][n.state];
    } else if (n.kind == SpnKind::Product) {
      s[i] = 1.0;
      for (std::size_t ch : n.children) s[i] *= s[ch];
    } else {
      s[i] = 0.0;
      for (std::size_t k = 0; k < n.children.size(); ++k) s[i] += n.weights[k] * s[n.children[k]];
    }
  }
  return s.back();
}

}  // namespace detail

//! Network-polynomial coefficients by one-hot evaluation of every complete
//! assignment, weighted by the evidence.
inline std::vector<VariableBelief> enumerate_spn_marginals(const SpnCircuit& c, const Evidence& e) {
  check_evidence(c, e);
  std::vector<std::size_t> cards;
  for (const auto& l : e.lambda) cards.push_back(l.size());
  const std::size_t total = checked_product(cards, enumeration_budget(), "enumerate_spn_marginals");
  std::vector<std::vector<double>> acc;
  for (std::size_t card : cards) acc.emplace_back(card, 0.0);
  std::vector<std::size_t> x(cards.size(), 0);
  std::vector<std::vector<double>> onehot;
  for (std::size_t card : cards) onehot.emplace_back(card, 0.0);
  double z = 0.0;
  for (std::size_t n = 0; n < total; ++n) {
    double w = 1.0;
    for (std::size_t i = 0; i < cards.size(); ++i) {
      std::fill(onehot[i].begin(), onehot[i].end(), 0.0);
      onehot[i][x[i]] = 1.0;
      w *= e.lambda[i][x[i]];
    }
    if (w != 0.0) {
      w *= detail::evaluate_circuit(c, onehot);
      z += w;
      for (std::size_t i = 0; i < cards.size(); ++i) acc[i][x[i]] += w;
    }
    for (std::size_t j = cards.size(); j-- > 0;) {
      if (++x[j] < cards[j]) break;
      x[j] = 0;
    }
  }
  if (!(z > 0.0)) throw NumericError("enumerate_spn_marginals: S(e) = 0");
  std::vector<VariableBelief> out;
  for (auto& a : acc) {
    for (double& v : a) v /= z;
    out.push_back(belief_from_full(a));
  }
  return out;
}

//==============================================================================
//! Central differences with per-coordinate step h * max(1, |x_i|).
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> point, double h = 1e-5) {
  if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double step = h * std::max(1.0, std::abs(xi));
    x[i] = xi + step;
    const double up = f(x);
    x[i] = xi - step;
    const double dn = f(x);
    x[i] = xi;
    if (!std::isfinite(up) || !std::isfinite(dn)) throw NumericError("finite_diff_grad: evaluation failed");
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

//==============================================================================
struct DiagonalFace {
  JointShape shape;
};
struct ProductFamily {
  JointShape shape;
};
struct EqualCopies {
  std::size_t count = 2;
};
using ConstraintSpec = std::variant<DiagonalFace, ProductFamily, EqualCopies>;

enum class Side { Left, Right };

struct NumericProjectionOptions {
  int starts = 8;
  std::uint64_t seed = 1;
  int max_steps = 100'000;
  double gradient_tolerance = 1e-12;
};

struct NumericProjection {
  DistVec result;
  double objective = 0.0;
  double spread = 0.0;  //!< max distance between the minimizers of different starts
  int steps = 0;        //!< steps used by the best start
};

namespace detail {

//! Softmax over blocks of the parameter vector; the last logit of each block
//! is pinned to zero.
struct SoftmaxBlocks {
  std::vector<std::size_t> sizes;

  std::size_t params() const {
    std::size_t n = 0;
    for (std::size_t s : sizes) n += s - 1;
    return n;
  }

  std::vector<std::vector<double>> probs(const Eigen::VectorXd& theta) const {
    std::vector<std::vector<double>> out;
    Eigen::Index k = 0;
    for (std::size_t s : sizes) {
      std::vector<double> logits(s, 0.0);
      for (std::size_t t = 0; t + 1 < s; ++t) logits[t] = theta[k++];
      out.push_back(conjugate_gradient(NegativeEntropy{}, logits));
    }
    return out;
  }

  //! Maps block-wise gradients with respect to probabilities to theta.
  Eigen::VectorXd pullback(const std::vector<std::vector<double>>& p,
                           const std::vector<std::vector<double>>& dp) const {
    Eigen::VectorXd g(static_cast<Eigen::Index>(params()));
    Eigen::Index k = 0;
    for (std::size_t b = 0; b < sizes.size(); ++b) {
      double dot = 0.0;
      for (std::size_t t = 0; t < sizes[b]; ++t) dot += p[b][t] * dp[b][t];
      for (std::size_t t = 0; t + 1 < sizes[b]; ++t) g[k++] = p[b][t] * (dp[b][t] - dot);
    }
    return g;
  }
};

//! Objective value and gradient with respect to the probability vector r.
inline std::pair<double, std::vector<double>> bregman_and_gradient(const Generator& gen, Side side,
                                                                   std::span<const double> r,
                                                                   std::span<const double> q) {
  std::vector<double> g(r.size());
  if (is_negative_entropy(gen)) {
    double f = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (side == Side::Left) {
        if (r[i] > 0.0) f += r[i] * std::log(r[i] / q[i]);
        g[i] = std::log(r[i] / q[i]) + 1.0;
      } else {
        if (q[i] > 0.0) f += q[i] * std::log(q[i] / r[i]);
        g[i] = -q[i] / r[i];
      }
    }
    return {f, g};
  }
  const auto& m = std::get<Mahalanobis>(gen).matrix();
  const Eigen::VectorXd d = as_eigen(r) - as_eigen(q);
  const Eigen::VectorXd md = m * d;
  for (std::size_t i = 0; i < r.size(); ++i) g[i] = md[static_cast<Eigen::Index>(i)];
  return {0.5 * d.dot(md), g};
}

struct Problem {
  SoftmaxBlocks blocks;
  //! objective and gradient in theta; also returns the feasible point
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> eval;
  std::function<std::vector<double>(const Eigen::VectorXd&)> point;
};

inline Eigen::VectorXd bfgs(const Problem& pb, Eigen::VectorXd x, const NumericProjectionOptions& opt, int& steps) {
  const Eigen::Index n = x.size();
  if (n == 0) return x;
  Eigen::VectorXd g;
  double f = pb.eval(x, &g);
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n);
  for (steps = 0; steps < opt.max_steps; ++steps) {
    if (g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance) return x;
    Eigen::VectorXd d = -h * g;
    if (d.dot(g) >= 0.0) {
      h.setIdentity();
      d = -g;
    }
    // Bounded moves in logit space keep the softmax out of saturation, where
    // the gradient vanishes without a minimizer.
    double t = std::min(1.0, 4.0 / d.lpNorm<Eigen::Infinity>());
    Eigen::VectorXd xn, gn;
    double fn = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + t * d;
      fn = pb.eval(xn, &gn);
      if (!std::isfinite(fn)) {
        t *= 0.5;
        continue;
      }
      // Armijo, or near the rounding floor of f the approximate Wolfe test,
      // which only asks the directional derivative to shrink.
      const bool armijo = fn <= f + 1e-4 * t * g.dot(d);
      const bool approx = fn <= f + 1e-12 * std::max(1.0, std::abs(f)) && std::abs(gn.dot(d)) <= 0.9 * std::abs(g.dot(d));
      if (armijo || approx) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // At the rounding floor of the objective: accept if the gradient is tiny.
      if (g.lpNorm<Eigen::Infinity>() < 1e-8) return x;
      h.setIdentity();
      continue;
    }
    const Eigen::VectorXd s = xn - x, y = gn - g;
    const double sy = s.dot(y);
    if (sy > 1e-300) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd i = Eigen::MatrixXd::Identity(n, n);
      h = (i - rho * s * y.transpose()) * h * (i - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    x = xn;
    f = fn;
    g = gn;
  }
  throw ConvergenceError("numeric_projection: no convergence within the step budget");
}

inline NumericProjection multistart(const Problem& pb, const NumericProjectionOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  NumericProjection best;
  best.objective = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> minimizers;
  for (int s = 0; s < opt.starts; ++s) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(pb.blocks.params()));
    for (Eigen::Index k = 0; k < x.size(); ++k) x[k] = normal(rng);
    int steps = 0;
    x = bfgs(pb, x, opt, steps);
    const double f = pb.eval(x, nullptr);
    auto p = pb.point(x);
    if (f < best.objective) {
      best.objective = f;
      best.result = DistVec::normalized(p);
      best.steps = steps;
    }
    minimizers.push_back(std::move(p));
  }
  for (std::size_t a = 0; a < minimizers.size(); ++a)
    for (std::size_t b = a + 1; b < minimizers.size(); ++b)
      best.spread = std::max(best.spread, max_abs_diff(minimizers[a], minimizers[b]));
  return best;
}

}  // namespace detail

//! Minimizes the Bregman objective over the constraint set: D(r, q) for the
//! left side, D(q, r) for the right. For EqualCopies the objective is the
//! sum over the given tables. Results on a diagonal face are in face
//! coordinates.
inline NumericProjection numeric_projection(const Generator& gen, const ConstraintSpec& spec,
                                            std::span<const DistVec> qs, Side side,
                                            const NumericProjectionOptions& opt = {}) {
  if (qs.empty()) throw ShapeError("numeric_projection: no target");
  detail::Problem pb;
  if (const auto* face = std::get_if<DiagonalFace>(&spec)) {
    if (side != Side::Left) throw DomainError("numeric_projection: diagonal face supports the left side only");
    const auto& shape = face->shape;
    const auto& q = qs.front();
    shape.require_size(q.size(), "numeric_projection");
    if (shape.face_size() > 64) throw BudgetError("numeric_projection: dimension above 64");
    pb.blocks.sizes = {shape.face_size()};
    pb.point = [blocks = pb.blocks](const Eigen::VectorXd& th) { return blocks.probs(th).front(); };
    pb.eval = [&gen, shape, q, blocks = pb.blocks](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
      const auto p = blocks.probs(th);
      const auto r = detail::embed_face(p.front(), shape);
      if (is_negative_entropy(gen)) {
        // Off-diagonal entries of r are zero and contribute nothing.
        std::vector<double> qd(p.front().size());
        for (std::size_t f = 0; f < qd.size(); ++f) qd[f] = q[shape.face_to_full(f)];
        auto [f, g] = detail::bregman_and_gradient(gen, Side::Left, p.front(), qd);
        if (grad) *grad = blocks.pullback(p, {g});
        return f;
      }
      auto [f, g] = detail::bregman_and_gradient(gen, Side::Left, r, q.probs());
      std::vector<double> gf(p.front().size());
      for (std::size_t f2 = 0; f2 < gf.size(); ++f2) gf[f2] = g[shape.face_to_full(f2)];
      if (grad) *grad = blocks.pullback(p, {gf});
      return f;
    };
  } else if (const auto* prod = std::get_if<ProductFamily>(&spec)) {
    const auto& shape = prod->shape;
    const auto& q = qs.front();
    shape.require_size(q.size(), "numeric_projection");
    if (q.size() > 64) throw BudgetError("numeric_projection: dimension above 64");
    pb.blocks.sizes = shape.axes();
    auto joint = [shape](const std::vector<std::vector<double>>& p) {
      std::vector<double> r(shape.size(), 1.0);
      for (std::size_t idx = 0; idx < r.size(); ++idx)
        for (std::size_t a = 0; a < p.size(); ++a) r[idx] *= p[a][(idx / shape.strides()[a]) % shape.axes()[a]];
      return r;
    };
    pb.point = [joint, blocks = pb.blocks](const Eigen::VectorXd& th) { return joint(blocks.probs(th)); };
    pb.eval = [&gen, shape, q, side, joint, blocks = pb.blocks](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
      const auto p = blocks.probs(th);
      const auto r = joint(p);
      auto [f, g] = detail::bregman_and_gradient(gen, side, r, q.probs());
      if (grad) {
        std::vector<std::vector<double>> dp;
        for (std::size_t a = 0; a < p.size(); ++a) dp.emplace_back(p[a].size(), 0.0);
        for (std::size_t idx = 0; idx < r.size(); ++idx)
          for (std::size_t a = 0; a < p.size(); ++a) {
            const std::size_t xa = (idx / shape.strides()[a]) % shape.axes()[a];
            double others = 1.0;
            for (std::size_t b = 0; b < p.size(); ++b)
              if (b != a) others *= p[b][(idx / shape.strides()[b]) % shape.axes()[b]];
            dp[a][xa] += g[idx] * others;
          }
        *grad = blocks.pullback(p, dp);
      }
      return f;
    };
  } else {
    const auto& eq = std::get<EqualCopies>(spec);
    if (side != Side::Left) throw DomainError("numeric_projection: equal copies support the left side only");
    if (qs.size() != eq.count) throw ShapeError("numeric_projection: table count does not match EqualCopies");
    for (const auto& q : qs) require_same_outcomes(qs.front(), q, "numeric_projection");
    if (qs.front().size() > 64) throw BudgetError("numeric_projection: dimension above 64");
    std::vector<DistVec> tables(qs.begin(), qs.end());
    pb.blocks.sizes = {qs.front().size()};
    pb.point = [blocks = pb.blocks](const Eigen::VectorXd& th) { return blocks.probs(th).front(); };
    pb.eval = [&gen, tables, blocks = pb.blocks](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
      const auto p = blocks.probs(th);
      double total = 0.0;
      std::vector<double> gsum(p.front().size(), 0.0);
      for (const auto& q : tables) {
        auto [f, g] = detail::bregman_and_gradient(gen, Side::Left, p.front(), q.probs());
        total += f;
        for (std::size_t i = 0; i < g.size(); ++i) gsum[i] += g[i];
      }
      if (grad) *grad = blocks.pullback(p, {gsum});
      return total;
    };
  }
  return detail::multistart(pb, opt);
}

inline NumericProjection numeric_projection(const Generator& gen, const ConstraintSpec& spec, const DistVec& q,
                                            Side side, const NumericProjectionOptions& opt = {}) {
  return numeric_projection(gen, spec, std::span<const DistVec>(&q, 1), side, opt);
}

}  // namespace klbp
