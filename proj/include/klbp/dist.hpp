#pragma once

// Interior-simplex vectors, Bregman generators, and dual-coordinate maps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "klbp/error.hpp"

namespace klbp {

inline constexpr double kMinEntry = 1e-300;
inline constexpr double kSumTolerance = 1e-12;
inline constexpr double kRenormalizeTolerance = 1e-9;

//! Default enumeration budget (assignments); KLBP_BUDGET overrides it.
inline std::size_t enumeration_budget() {
  if (const char* env = std::getenv("KLBP_BUDGET")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return 1'000'000;
}

//! Largest replicated joint table we are willing to materialize.
inline constexpr std::size_t kJointBudget = std::size_t{1} << 22;

//==============================================================================
//! Strictly positive probability vector over an ordered finite outcome set.
//! Labels are optional; an empty label list means outcomes 0..n-1.
class DistVec {
 public:
  DistVec() = default;

  explicit DistVec(std::vector<double> probs, std::vector<std::string> labels = {})
      : probs_(std::move(probs)), labels_(std::move(labels)) {
    if (probs_.empty()) throw ShapeError("DistVec: empty outcome set");
    if (!labels_.empty() && labels_.size() != probs_.size())
      throw ShapeError("DistVec: label count does not match probability count");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      const double p = probs_[i];
      if (!std::isfinite(p) || p < kMinEntry)
        throw DomainError("DistVec: entry " + std::to_string(i) +
                          " is not strictly positive (" + std::to_string(p) + ")");
      sum += p;
    }
    const double drift = std::abs(sum - 1.0);
    if (drift > kRenormalizeTolerance)
      throw DomainError("DistVec: entries sum to " + std::to_string(sum));
    if (drift > kSumTolerance)
      for (double& p : probs_) p /= sum;
  }

  //! Normalizes positive weights onto the simplex.
  static DistVec normalized(std::span<const double> weights,
                            std::vector<std::string> labels = {}) {
    double sum = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0)
        throw DomainError("DistVec::normalized: weight is negative or non-finite");
      sum += w;
    }
    if (!(sum > 0.0)) throw NumericError("DistVec::normalized: zero total mass");
    std::vector<double> p(weights.begin(), weights.end());
    for (double& v : p) {
      v /= sum;
      if (v < kMinEntry)
        throw NumericError("DistVec::normalized: entry underflows the interior");
    }
    return DistVec(std::move(p), std::move(labels));
  }

  //! Normalizes log-weights with the max subtracted first.
  static DistVec from_log_weights(std::span<const double> log_weights,
                                  std::vector<std::string> labels = {}) {
    if (log_weights.empty()) throw ShapeError("DistVec: empty outcome set");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : log_weights) {
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw DomainError("DistVec::from_log_weights: non-finite value");
      mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) throw NumericError("DistVec::from_log_weights: all weights zero");
    std::vector<double> w(log_weights.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_weights[i] - mx);
    return normalized(w, std::move(labels));
  }

  static DistVec uniform(std::size_t n) {
    return DistVec(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }
  const std::vector<double>& vector() const { return probs_; }
  const std::vector<std::string>& labels() const { return labels_; }

  bool same_outcomes(const DistVec& other) const {
    if (size() != other.size()) return false;
    if (labels_.empty() || other.labels_.empty()) return true;
    return labels_ == other.labels_;
  }

 private:
  std::vector<double> probs_;
  std::vector<std::string> labels_;
};

inline void require_same_outcomes(const DistVec& a, const DistVec& b, const char* what) {
  if (!a.same_outcomes(b)) throw ShapeError(std::string(what) + ": outcome sets differ");
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

//==============================================================================
//! Dual (log) coordinates of an interior distribution.
struct LogCoords {
  std::vector<double> values;
  std::vector<std::string> labels;
};

//! values_i = 1 + ln p_i
inline LogCoords to_dual(const DistVec& p) {
  LogCoords out{std::vector<double>(p.size()), p.labels()};
  for (std::size_t i = 0; i < p.size(); ++i) out.values[i] = 1.0 + std::log(p[i]);
  return out;
}

//! softmax, stabilized by subtracting the max.
inline DistVec from_dual(const LogCoords& theta) {
  for (double v : theta.values)
    if (!std::isfinite(v)) throw DomainError("from_dual: non-finite coordinate");
  return DistVec::from_log_weights(theta.values, theta.labels);
}

//==============================================================================
//! Negative entropy f(p) = sum p log p; its divergence is KL.
struct NegativeEntropy {};

//! Quadratic generator g(p) = 1/2 p^T M p with M symmetric positive definite.
class Mahalanobis {
 public:
  explicit Mahalanobis(Eigen::MatrixXd m) : m_(std::move(m)) {
    if (m_.rows() == 0 || m_.rows() != m_.cols())
      throw ShapeError("Mahalanobis: matrix must be square and nonempty");
    const double scale = std::max(1.0, m_.cwiseAbs().maxCoeff());
    if ((m_ - m_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw DomainError("Mahalanobis: matrix is not symmetric");
    llt_.compute(m_);
    if (llt_.info() != Eigen::Success)
      throw DomainError("Mahalanobis: matrix is not positive definite");
  }

  static Mahalanobis identity(std::size_t n) {
    return Mahalanobis(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                                 static_cast<Eigen::Index>(n)));
  }

  std::size_t dim() const { return static_cast<std::size_t>(m_.rows()); }
  const Eigen::MatrixXd& matrix() const { return m_; }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return m_ * v; }
  Eigen::VectorXd solve(const Eigen::VectorXd& v) const { return llt_.solve(v); }
  Eigen::MatrixXd solve_columns(const Eigen::MatrixXd& v) const { return llt_.solve(v); }

 private:
  Eigen::MatrixXd m_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

using Generator = std::variant<NegativeEntropy, Mahalanobis>;

inline bool is_negative_entropy(const Generator& g) {
  return std::holds_alternative<NegativeEntropy>(g);
}

inline Eigen::Map<const Eigen::VectorXd> as_eigen(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

//! D_g(r, q); KL(r || q) in nats for negative entropy.
inline double divergence(const Generator& gen, const DistVec& r, const DistVec& q) {
  require_same_outcomes(r, q, "divergence");
  if (std::holds_alternative<NegativeEntropy>(gen)) {
    double kl = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) kl += r[i] * std::log(r[i] / q[i]);
    return std::max(kl, 0.0);
  }
  const auto& m = std::get<Mahalanobis>(gen);
  if (m.dim() != r.size()) throw ShapeError("divergence: Mahalanobis dimension mismatch");
  const Eigen::VectorXd d = as_eigen(r.probs()) - as_eigen(q.probs());
  return 0.5 * d.dot(m.apply(d));
}

//! Gradient of the generator on raw vectors (log-coordinates without the
//! additive constant for negative entropy, M p for Mahalanobis).
inline std::vector<double> generator_gradient(const Generator& gen, std::span<const double> p) {
  std::vector<double> out(p.size());
  if (is_negative_entropy(gen)) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!(p[i] > 0.0)) throw DomainError("generator_gradient: nonpositive entry");
      out[i] = std::log(p[i]);
    }
    return out;
  }
  const auto& m = std::get<Mahalanobis>(gen);
  if (m.dim() != p.size()) throw ShapeError("generator_gradient: dimension mismatch");
  Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
      m.apply(as_eigen(p));
  return out;
}

//! Inverse of generator_gradient: softmax, or M^{-1} theta.
inline std::vector<double> conjugate_gradient(const Generator& gen, std::span<const double> theta) {
  std::vector<double> out(theta.size());
  if (is_negative_entropy(gen)) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : theta) {
      if (!std::isfinite(v)) throw DomainError("conjugate_gradient: non-finite coordinate");
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) sum += (out[i] = std::exp(theta[i] - mx));
    for (double& v : out) v /= sum;
    return out;
  }
  const auto& m = std::get<Mahalanobis>(gen);
  if (m.dim() != theta.size()) throw ShapeError("conjugate_gradient: dimension mismatch");
  Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
      m.solve(as_eigen(theta));
  return out;
}

}  // namespace klbp
