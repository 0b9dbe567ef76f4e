#pragma once

// Empirical Lipschitz probe of the map from log-evidence to marginals.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "klbp/spn.hpp"

namespace klbp {

//! Per-indicator bounds on u = log lambda, flattened variable by variable.
struct LogBox {
  std::vector<std::pair<double, double>> bounds;

  static LogBox uniform(const Evidence& shape, double lo, double hi) {
    return {std::vector<std::pair<double, double>>(shape.total_states(), {lo, hi})};
  }
};

struct LipschitzReport {
  double l_hat = 0.0;
  double worst_ratio = 0.0;  //!< max over pairs of |p(u)-p(u')| / (L_hat |u-u'|)
  std::size_t pairs = 0;
  std::size_t violations = 0;  //!< pairs breaking the 1.05 L_hat bound
  bool passed() const { return violations == 0; }
};

namespace detail {

inline Evidence evidence_from_log(const Evidence& shape, const Eigen::VectorXd& u) {
  Evidence e = shape;
  Eigen::Index k = 0;
  for (auto& v : e.lambda)
    for (double& x : v) x = std::exp(u[k++]);
  return e;
}

inline Eigen::VectorXd marginal_vector(const SpnCircuit& c, const Evidence& shape, const Eigen::VectorXd& u) {
  const auto b = spn_marginals(c, evidence_from_log(shape, u));
  Eigen::VectorXd out(static_cast<Eigen::Index>(shape.total_states()));
  Eigen::Index k = 0;
  for (const auto& vb : b)
    for (double x : vb.full()) out[k++] = x;
  return out;
}

inline double jacobian_norm(const SpnCircuit& c, const Evidence& shape, const Eigen::VectorXd& u) {
  const Eigen::Index n = u.size();
  Eigen::MatrixXd j(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(u[k]));
    Eigen::VectorXd up = u, dn = u;
    up[k] += h;
    dn[k] -= h;
    j.col(k) = (marginal_vector(c, shape, up) - marginal_vector(c, shape, dn)) / (2.0 * h);
  }
  return Eigen::JacobiSVD<Eigen::MatrixXd>(j).singularValues()(0);
}

}  // namespace detail

//! Samples n_samples points in the box (paired consecutively) and estimates
//! L_hat as the largest finite-difference Jacobian spectral norm over the
//! sample points and pair midpoints. Every pair is then checked against
//! |p(u) - p(u')| <= 1.05 L_hat |u - u'|.
inline LipschitzReport lipschitz_probe(const SpnCircuit& c, const Evidence& shape, const LogBox& box,
                                       std::size_t n_samples, std::uint64_t seed) {
  check_evidence(c, shape);
  const std::size_t dim = shape.total_states();
  if (box.bounds.size() != dim) throw ShapeError("lipschitz_probe: box dimension does not match evidence");
  for (const auto& [lo, hi] : box.bounds)
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
      throw DomainError("lipschitz_probe: box must have finite log-bounds with lo <= hi");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Eigen::VectorXd> pts;
  for (std::size_t s = 0; s < n_samples; ++s) {
    Eigen::VectorXd u(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k) {
      const auto [lo, hi] = box.bounds[k];
      u[static_cast<Eigen::Index>(k)] = lo + (hi - lo) * unit(rng);
    }
    pts.push_back(std::move(u));
  }
  LipschitzReport rep;
  for (const auto& u : pts) rep.l_hat = std::max(rep.l_hat, detail::jacobian_norm(c, shape, u));
  for (std::size_t s = 0; s + 1 < pts.size(); s += 2)
    rep.l_hat = std::max(rep.l_hat, detail::jacobian_norm(c, shape, 0.5 * (pts[s] + pts[s + 1])));
  for (std::size_t s = 0; s + 1 < pts.size(); s += 2) {
    const double du = (pts[s] - pts[s + 1]).norm();
    const double dp = (detail::marginal_vector(c, shape, pts[s]) - detail::marginal_vector(c, shape, pts[s + 1])).norm();
    ++rep.pairs;
    if (du > 0.0 && rep.l_hat > 0.0) rep.worst_ratio = std::max(rep.worst_ratio, dp / (rep.l_hat * du));
    // 1e-12 absorbs rounding in marginals that are constant in exact arithmetic.
    if (dp > 1.05 * rep.l_hat * du + 1e-12) ++rep.violations;
  }
  return rep;
}

}  // namespace klbp
