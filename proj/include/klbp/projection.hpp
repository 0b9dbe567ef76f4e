#pragma once

// Joint shapes over replicated product spaces and the closed-form KL
// projections: diagonal (consensus) face, product family, equal copies.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "klbp/dist.hpp"

namespace klbp {

//! Axis sizes of a product space (row-major, last axis fastest) plus a
//! partition of the axes into replica groups. Axes in a group are copies of
//! one underlying variable. An empty group list means every axis stands alone.
class JointShape {
 public:
  JointShape() = default;

  explicit JointShape(std::vector<std::size_t> axes, std::vector<std::vector<std::size_t>> groups = {})
      : axes_(std::move(axes)), groups_(std::move(groups)) {
    if (axes_.empty()) throw ShapeError("JointShape: no axes");
    for (std::size_t a : axes_)
      if (a == 0) throw ShapeError("JointShape: zero-size axis");
    if (groups_.empty())
      for (std::size_t a = 0; a < axes_.size(); ++a) groups_.push_back({a});
    std::vector<int> seen(axes_.size(), 0);
    for (const auto& g : groups_) {
      if (g.empty()) throw ShapeError("JointShape: empty replica group");
      for (std::size_t a : g) {
        if (a >= axes_.size()) throw ShapeError("JointShape: group axis out of range");
        if (seen[a]++) throw ShapeError("JointShape: axis listed in two groups");
        if (axes_[a] != axes_[g.front()])
          throw ShapeError("JointShape: replicas in a group have different alphabets");
      }
    }
    for (std::size_t a = 0; a < axes_.size(); ++a)
      if (!seen[a]) throw ShapeError("JointShape: axis " + std::to_string(a) + " not in any group");
    strides_.assign(axes_.size(), 1);
    for (std::size_t a = axes_.size() - 1; a > 0; --a) strides_[a - 1] = strides_[a] * axes_[a];
    size_ = strides_[0] * axes_[0];
  }

  const std::vector<std::size_t>& axes() const { return axes_; }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
  const std::vector<std::size_t>& strides() const { return strides_; }
  std::size_t size() const { return size_; }

  //! Alphabet of each group; the face is the product space over groups.
  std::vector<std::size_t> face_axes() const {
    std::vector<std::size_t> out;
    for (const auto& g : groups_) out.push_back(axes_[g.front()]);
    return out;
  }

  std::size_t face_size() const {
    std::size_t n = 1;
    for (const auto& g : groups_) n *= axes_[g.front()];
    return n;
  }

  //! Index into the full table of the diagonal outcome with the given
  //! row-major face index.
  std::size_t face_to_full(std::size_t face_index) const {
    std::size_t full = 0;
    for (std::size_t gi = groups_.size(); gi-- > 0;) {
      const auto& g = groups_[gi];
      const std::size_t card = axes_[g.front()];
      const std::size_t state = face_index % card;
      face_index /= card;
      for (std::size_t a : g) full += state * strides_[a];
    }
    return full;
  }

  void require_size(std::size_t n, const char* what) const {
    if (n != size_)
      throw ShapeError(std::string(what) + ": vector length " + std::to_string(n) +
                       " does not match joint size " + std::to_string(size_));
  }

 private:
  std::vector<std::size_t> axes_;
  std::vector<std::vector<std::size_t>> groups_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
};

inline std::size_t checked_product(std::span<const std::size_t> sizes, std::size_t budget,
                                   const char* what) {
  std::size_t n = 1;
  for (std::size_t s : sizes) {
    if (s == 0) throw ShapeError(std::string(what) + ": zero-size axis");
    if (n > budget / s)
      throw BudgetError(std::string(what) + ": table size exceeds budget of " +
                        std::to_string(budget));
    n *= s;
  }
  return n;
}

namespace detail {

//! Diagonal restriction on raw (possibly zero) entries, renormalized.
inline std::vector<double> diagonal_restrict(std::span<const double> q, const JointShape& shape) {
  shape.require_size(q.size(), "i_project_diagonal");
  std::vector<double> out(shape.face_size());
  double mass = 0.0;
  for (std::size_t f = 0; f < out.size(); ++f) mass += (out[f] = q[shape.face_to_full(f)]);
  if (!(mass > 0.0)) throw NumericError("i_project_diagonal: zero diagonal mass");
  for (double& v : out) v /= mass;
  return out;
}

//! Places face entries on the diagonal of the full table; zeros elsewhere.
inline std::vector<double> embed_face(std::span<const double> face, const JointShape& shape) {
  if (face.size() != shape.face_size()) throw ShapeError("embed_face: face length mismatch");
  std::vector<double> out(shape.size(), 0.0);
  for (std::size_t f = 0; f < face.size(); ++f) out[shape.face_to_full(f)] = face[f];
  return out;
}

//! Marginal of a row-major table onto a subset of its axes (in the listed
//! order, last listed fastest).
inline std::vector<double> marginal(std::span<const double> q, std::span<const std::size_t> axes,
                                    std::span<const std::size_t> keep) {
  std::vector<std::size_t> strides(axes.size(), 1);
  for (std::size_t a = axes.size(); a-- > 1;) strides[a - 1] = strides[a] * axes[a];
  std::size_t out_size = 1;
  for (std::size_t k : keep) out_size *= axes[k];
  std::vector<double> out(out_size, 0.0);
  for (std::size_t idx = 0; idx < q.size(); ++idx) {
    if (q[idx] == 0.0) continue;
    std::size_t o = 0;
    for (std::size_t k : keep) o = o * axes[k] + (idx / strides[k]) % axes[k];
    out[o] += q[idx];
  }
  return out;
}

//! Outer product of block marginals; blocks partition the axes.
inline std::vector<double> block_product(std::span<const double> q, std::span<const std::size_t> axes,
                                         const std::vector<std::vector<std::size_t>>& blocks) {
  std::vector<std::size_t> strides(axes.size(), 1);
  for (std::size_t a = axes.size(); a-- > 1;) strides[a - 1] = strides[a] * axes[a];
  std::vector<std::vector<double>> margs;
  margs.reserve(blocks.size());
  double total = 0.0;
  for (double v : q) total += v;
  if (!(total > 0.0)) throw NumericError("m_project_product: zero total mass");
  for (const auto& b : blocks) {
    auto m = marginal(q, axes, b);
    for (double& v : m) v /= total;
    margs.push_back(std::move(m));
  }
  std::vector<double> out(q.size());
  for (std::size_t idx = 0; idx < q.size(); ++idx) {
    double v = 1.0;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      std::size_t o = 0;
      for (std::size_t k : blocks[bi]) o = o * axes[k] + (idx / strides[k]) % axes[k];
      v *= margs[bi][o];
    }
    out[idx] = v;
  }
  return out;
}

inline void require_partition(std::size_t n_axes, const std::vector<std::vector<std::size_t>>& blocks) {
  std::vector<int> seen(n_axes, 0);
  for (const auto& b : blocks)
    for (std::size_t a : b) {
      if (a >= n_axes) throw ShapeError("block partition: axis out of range");
      if (seen[a]++) throw ShapeError("block partition: axis listed twice");
    }
  for (int s : seen)
    if (!s) throw ShapeError("block partition: axis not covered");
}

}  // namespace detail

//! I-projection onto the consensus face: keep diagonal mass, renormalize.
//! The result is indexed by face outcomes (one coordinate per replica group).
inline DistVec i_project_diagonal(const DistVec& q, const JointShape& shape) {
  return DistVec::normalized(detail::diagonal_restrict(q.probs(), shape));
}

//! Reverse-KL projection onto the fully factorized family: the outer
//! product of the per-axis marginals.
inline DistVec m_project_product(const DistVec& q, const JointShape& shape) {
  shape.require_size(q.size(), "m_project_product");
  std::vector<std::vector<std::size_t>> blocks;
  for (std::size_t a = 0; a < shape.axes().size(); ++a) blocks.push_back({a});
  return DistVec::normalized(detail::block_product(q.probs(), shape.axes(), blocks), q.labels());
}

//! Reverse-KL projection onto distributions factorizing across the given
//! blocks of axes.
inline DistVec m_project_product(const DistVec& q, const JointShape& shape,
                                 const std::vector<std::vector<std::size_t>>& blocks) {
  shape.require_size(q.size(), "m_project_product");
  detail::require_partition(shape.axes().size(), blocks);
  return DistVec::normalized(detail::block_product(q.probs(), shape.axes(), blocks), q.labels());
}

//! argmin_r sum_k KL(r || q_k): the normalized elementwise geometric mean.
inline DistVec consensus_geomean(std::span<const DistVec> tables) {
  if (tables.empty()) throw ShapeError("consensus_geomean: empty list");
  for (const auto& t : tables) require_same_outcomes(tables.front(), t, "consensus_geomean");
  const std::size_t n = tables.front().size();
  std::vector<double> logmean(n, 0.0);
  for (const auto& t : tables)
    for (std::size_t i = 0; i < n; ++i) logmean[i] += std::log(t[i]);
  for (double& v : logmean) v /= static_cast<double>(tables.size());
  return DistVec::from_log_weights(logmean, tables.front().labels());
}

}  // namespace klbp
