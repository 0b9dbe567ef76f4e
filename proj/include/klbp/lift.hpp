#pragma once

// Replicated-variable lift of a factor graph, the consensus-then-product
// two-step operator, and the dual-corrected hybrid projection iteration.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "klbp/dist.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/projection.hpp"

namespace klbp {

//! Joint space with one replica axis per (variable, factor) incidence.
//! Axes are ordered by factor, then by neighbor position. Each variable with
//! at least one factor owns one replica group; each factor owns one block.
struct ReplicatedSpace {
  JointShape shape;
  std::vector<std::vector<std::size_t>> blocks;  //!< axes of each factor
  std::vector<std::size_t> group_variable;       //!< variable of each replica group
  std::vector<std::size_t> num_variables_card;   //!< alphabet size of every graph variable
  DistVec initial;                               //!< normalized product of replicated tables
};

inline ReplicatedSpace replicate_lift(const FactorGraph& fg, std::size_t budget = kJointBudget) {
  require_valid(fg);
  if (fg.allows_structural_zeros())
    throw ValidationError("replicate_lift: factor tables must be strictly positive");
  ReplicatedSpace sp;
  std::vector<std::size_t> axes;
  std::vector<std::vector<std::size_t>> var_axes(fg.num_variables());
  for (std::size_t f = 0; f < fg.num_factors(); ++f) {
    std::vector<std::size_t> block;
    for (std::size_t v : fg.factors()[f].vars) {
      var_axes[v].push_back(axes.size());
      block.push_back(axes.size());
      axes.push_back(fg.cardinality(v));
    }
    sp.blocks.push_back(std::move(block));
  }
  if (axes.empty()) throw ValidationError("replicate_lift: graph has no factors");
  const std::size_t n = checked_product(axes, budget, "replicate_lift");
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t v = 0; v < fg.num_variables(); ++v) {
    sp.num_variables_card.push_back(fg.cardinality(v));
    if (var_axes[v].empty()) continue;
    groups.push_back(var_axes[v]);
    sp.group_variable.push_back(v);
  }
  sp.shape = JointShape(axes, groups);

  // Each block's table occupies a contiguous run of axes, so the joint index
  // splits into per-factor table indices.
  std::vector<std::size_t> block_stride(fg.num_factors());
  std::size_t stride = 1;
  for (std::size_t f = fg.num_factors(); f-- > 0;) {
    block_stride[f] = stride;
    stride *= fg.factors()[f].table.size();
  }
  std::vector<double> logq(n, 0.0);
  for (std::size_t f = 0; f < fg.num_factors(); ++f) {
    const auto& t = fg.factors()[f].table;
    double mass = 0.0;
    for (double v : t) mass += v;
    std::vector<double> logt(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) logt[i] = std::log(t[i] / mass);
    for (std::size_t idx = 0; idx < n; ++idx) logq[idx] += logt[(idx / block_stride[f]) % t.size()];
  }
  sp.initial = DistVec::from_log_weights(logq);
  return sp;
}

namespace detail {

//! Consensus restriction followed by the product over face axes, on raw
//! entries that may include structural zeros.
inline std::vector<double> t_proj_raw(std::span<const double> q, const JointShape& shape) {
  const auto face = diagonal_restrict(q, shape);
  const auto face_axes = shape.face_axes();
  std::vector<std::vector<std::size_t>> blocks;
  for (std::size_t a = 0; a < face_axes.size(); ++a) blocks.push_back({a});
  return block_product(face, face_axes, blocks);
}

}  // namespace detail

//! Two-step operator: consensus I-projection (face coordinates), then the
//! reverse-KL projection onto products over the face's variables.
inline DistVec t_proj(const DistVec& q, const ReplicatedSpace& space) {
  return DistVec::normalized(detail::t_proj_raw(q.probs(), space.shape));
}

//! Same operator for an arbitrary grouped shape, tolerating zero entries.
inline std::vector<double> t_proj_table(std::span<const double> q, const JointShape& shape) {
  return detail::t_proj_raw(q, shape);
}

//==============================================================================
//! Iterate of the hybrid scheme. q and k live on the replicated space; r
//! lives on the consensus face. sigma and tau are dual corrections on the
//! replicated space. Under a Mahalanobis generator the vectors are affine
//! iterates and need not be positive.
struct WrState {
  std::vector<double> q, k, r;
  std::vector<double> sigma, tau;
  int iteration = 0;
};

//! Generator-specific projections for one replicated space. Mahalanobis
//! operators are dense and cached on construction.
class WrContext {
 public:
  WrContext(ReplicatedSpace space, Generator gen) : space_(std::move(space)), gen_(std::move(gen)) {
    if (const auto* m = std::get_if<Mahalanobis>(&gen_)) {
      const std::size_t n = space_.shape.size();
      if (m->dim() != n) throw ShapeError("WrContext: Mahalanobis dimension does not match lift");
      if (n > 4096) throw BudgetError("WrContext: Mahalanobis lift limited to 4096 entries");
      build_quadratic(*m);
    }
  }

  const ReplicatedSpace& space() const { return space_; }
  const Generator& generator() const { return gen_; }

  WrState initial_state() const {
    WrState s;
    s.q = space_.initial.vector();
    s.k = s.q;
    s.r = left(s.q);
    s.sigma.assign(s.q.size(), 0.0);
    s.tau.assign(s.q.size(), 0.0);
    return s;
  }

  std::vector<double> grad(std::span<const double> p) const { return generator_gradient(gen_, p); }
  std::vector<double> grad_conj(std::span<const double> t) const { return conjugate_gradient(gen_, t); }

  //! Right projection onto the product family (dual-affine for Mahalanobis).
  std::vector<double> right(std::span<const double> p) const {
    if (is_negative_entropy(gen_)) return detail::block_product(p, space_.shape.axes(), space_.blocks);
    Eigen::VectorXd out = right_op_ * as_eigen(p);
    return {out.data(), out.data() + out.size()};
  }

  //! Left projection onto the consensus face, returned in face coordinates.
  std::vector<double> left(std::span<const double> p) const {
    if (is_negative_entropy(gen_)) return detail::diagonal_restrict(p, space_.shape);
    const Eigen::VectorXd b = face_m_ * as_eigen(p);  // E^T M p
    const Eigen::VectorXd y0 = face_llt_.solve(b);
    const double nu = (1.0 - y0.sum()) / face_ones_.sum();
    const Eigen::VectorXd y = y0 + nu * face_ones_;
    return {y.data(), y.data() + y.size()};
  }

  std::vector<double> embed(std::span<const double> face) const {
    return detail::embed_face(face, space_.shape);
  }

 private:
  void build_quadratic(const Mahalanobis& m) {
    const auto& shape = space_.shape;
    const Eigen::Index n = static_cast<Eigen::Index>(shape.size());
    // Block-indicator basis of block-additive vectors.
    std::vector<Eigen::Index> offsets;
    Eigen::Index cols = 0;
    for (const auto& b : space_.blocks) {
      offsets.push_back(cols);
      Eigen::Index sz = 1;
      for (std::size_t a : b) sz *= static_cast<Eigen::Index>(shape.axes()[a]);
      cols += sz;
    }
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(n, cols);
    for (Eigen::Index idx = 0; idx < n; ++idx)
      for (std::size_t bi = 0; bi < space_.blocks.size(); ++bi) {
        Eigen::Index o = 0;
        for (std::size_t a : space_.blocks[bi])
          o = o * static_cast<Eigen::Index>(shape.axes()[a]) +
              static_cast<Eigen::Index>((static_cast<std::size_t>(idx) / shape.strides()[a]) % shape.axes()[a]);
        basis(idx, offsets[bi] + o) = 1.0;
      }
    // Dual image of the family is span(B); the right projection of p is
    // W B (B^T W B)^+ B^T p with W = M^{-1}.
    const Eigen::MatrixXd wb = m.solve_columns(basis);
    const Eigen::MatrixXd gram = basis.transpose() * wb;
    const Eigen::MatrixXd gram_pinv = gram.completeOrthogonalDecomposition().pseudoInverse();
    right_op_ = wb * gram_pinv * basis.transpose();

    const Eigen::Index nf = static_cast<Eigen::Index>(shape.face_size());
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n, nf);
    for (Eigen::Index f = 0; f < nf; ++f)
      e(static_cast<Eigen::Index>(shape.face_to_full(static_cast<std::size_t>(f))), f) = 1.0;
    face_m_ = e.transpose() * m.matrix();
    face_llt_.compute(face_m_ * e);
    face_ones_ = face_llt_.solve(Eigen::VectorXd::Ones(nf));
  }

  ReplicatedSpace space_;
  Generator gen_;
  Eigen::MatrixXd right_op_;
  Eigen::MatrixXd face_m_;
  Eigen::LLT<Eigen::MatrixXd> face_llt_;
  Eigen::VectorXd face_ones_;
};

//! One outer iteration: right projection with correction sigma, then left
//! projection with correction tau, then the right projection of the result.
inline WrState wr_step(const WrState& s, const WrContext& ctx) {
  auto add = [](std::vector<double> a, std::span<const double> b, double sign = 1.0) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += sign * b[i];
    return a;
  };
  const auto check = [](const std::vector<double>& v, const char* what) {
    for (double x : v)
      if (!std::isfinite(x)) throw NumericError(std::string("wr_step: non-finite ") + what);
  };
  WrState n;
  const auto gq = ctx.grad(s.q);
  n.k = ctx.right(ctx.grad_conj(add(gq, s.sigma)));
  const auto gk = ctx.grad(n.k);
  n.sigma = add(add(gq, s.sigma), gk, -1.0);
  n.r = ctx.left(ctx.grad_conj(add(gk, s.tau)));
  n.q = ctx.right(ctx.embed(n.r));
  n.tau = add(add(gk, s.tau), ctx.grad(n.q), -1.0);
  check(n.sigma, "sigma");
  check(n.tau, "tau");
  n.iteration = s.iteration + 1;
  return n;
}

//! Per-variable beliefs read off q: the average of the replica marginals.
//! Variables without factors get uniform beliefs.
inline std::vector<std::vector<double>> wr_beliefs(const WrState& s, const ReplicatedSpace& space) {
  std::vector<std::vector<double>> out;
  for (std::size_t c : space.num_variables_card) out.emplace_back(c, 1.0 / static_cast<double>(c));
  const auto& shape = space.shape;
  for (std::size_t g = 0; g < shape.groups().size(); ++g) {
    auto& b = out[space.group_variable[g]];
    std::fill(b.begin(), b.end(), 0.0);
    for (std::size_t a : shape.groups()[g]) {
      const std::size_t keep[] = {a};
      const auto m = detail::marginal(s.q, shape.axes(), keep);
      for (std::size_t x = 0; x < b.size(); ++x) b[x] += m[x];
    }
    double sum = 0.0;
    for (double v : b) sum += v;
    for (double& v : b) v /= sum;
  }
  return out;
}

//! Joint on the replicated space that carries m_{g->i} on the replica axis of
//! each incidence: the product over edges of the factor-to-variable messages.
inline DistVec message_lift(const FactorGraph& fg, const MessageState& msgs, const ReplicatedSpace& space) {
  const auto& shape = space.shape;
  if (fg.num_edges() != shape.axes().size()) throw ShapeError("message_lift: graph does not match the lift");
  std::vector<double> logq(shape.size(), 0.0);
  for (std::size_t e = 0; e < fg.num_edges(); ++e) {
    const auto& m = msgs.factor_to_var[e];
    if (m.size() != shape.axes()[e]) throw ShapeError("message_lift: message length does not match its axis");
    for (std::size_t idx = 0; idx < logq.size(); ++idx) logq[idx] += std::log(m[(idx / shape.strides()[e]) % m.size()]);
  }
  return DistVec::from_log_weights(logq);
}

//! Euclidean distance of a vector on the replicated space to the subspace of
//! block-additive vectors (sums of per-factor functions). Blocks are disjoint,
//! so the projection is the main-effects decomposition.
inline double product_subspace_distance(std::span<const double> zeta, const ReplicatedSpace& space) {
  const auto& shape = space.shape;
  space.shape.require_size(zeta.size(), "product_subspace_distance");
  double mean = 0.0;
  for (double v : zeta) mean += v;
  mean /= static_cast<double>(zeta.size());
  std::vector<std::vector<double>> effects;
  for (const auto& b : space.blocks) {
    auto m = detail::marginal(zeta, shape.axes(), b);
    const double per = static_cast<double>(zeta.size()) / static_cast<double>(m.size());
    for (double& v : m) v = v / per - mean;
    effects.push_back(std::move(m));
  }
  double ss = 0.0;
  for (std::size_t idx = 0; idx < zeta.size(); ++idx) {
    double fit = mean;
    for (std::size_t bi = 0; bi < space.blocks.size(); ++bi) {
      std::size_t o = 0;
      for (std::size_t a : space.blocks[bi]) o = o * shape.axes()[a] + (idx / shape.strides()[a]) % shape.axes()[a];
      fit += effects[bi][o];
    }
    ss += (zeta[idx] - fit) * (zeta[idx] - fit);
  }
  return std::sqrt(ss);
}

}  // namespace klbp
