#pragma once
#include <cmath>

#include "msam/autograd.hpp"
#include "msam/volume.hpp"

// Combined Dice + Cross-Entropy objective and the DSC / IoU overlap metrics.
// p is an (N voxels x M classes) probability field, g the matching one-hot
// ground truth.

namespace msam {

// Smoothing added to the per-class Dice numerator and denominator. An absent
// class then scores exactly 1 (no penalty) and a perfect prediction exactly
// 0. Small enough that worked single-voxel examples stay within 1e-5 of
// their unsmoothed values.
inline constexpr double kDiceEps = 1e-6;
// Probability clamp inside the cross-entropy log.
inline constexpr double kCeEps = 1e-12;

namespace loss_detail {

template <class S>
void check_shapes(const MatX<S>& p, const MatX<S>& g) {
  if (p.rows() != g.rows() || p.cols() != g.cols())
    throw ShapeMismatchError("probability and one-hot fields have different shapes");
  if (p.rows() < 1 || p.cols() < 1)
    throw ShapeMismatchError("loss fields must be at least 1x1");
}

template <class S>
void check_probability(const MatX<S>& p) {
  if ((p.array() < S(0)).any() || (p.array() > S(1)).any())
    throw InvalidProbabilityError("probabilities must lie in [0,1]");
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    if (std::abs(double(p.row(r).sum()) - 1.0) > 1e-5)
      throw InvalidProbabilityError("probability row " + std::to_string(r) +
                                    " does not sum to 1");
}

template <class S>
void check_one_hot(const MatX<S>& g) {
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    Eigen::Index ones = 0;
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      const S v = g(r, c);
      if (v != S(0) && v != S(1))
        throw InvalidProbabilityError("one-hot entries must be exactly 0 or 1");
      if (v == S(1)) ++ones;
    }
    if (ones != 1)
      throw InvalidProbabilityError("one-hot row " + std::to_string(r) +
                                    " must have exactly one 1");
  }
}

}  // namespace loss_detail

// L_Dice = 1 - (2/M) sum_j (sum_i p_ij g_ij) / (sum_i p_ij^2 + sum_i g_ij^2),
// smoothed; always in [0, 1].
template <class S>
S dice_loss(const MatX<S>& p, const MatX<S>& g, S eps = S(kDiceEps)) {
  loss_detail::check_shapes(p, g);
  loss_detail::check_probability(p);
  loss_detail::check_one_hot(g);
  const Eigen::Index M = p.cols();
  S acc = S(0);
  for (Eigen::Index j = 0; j < M; ++j) {
    const S overlap = (p.col(j).array() * g.col(j).array()).sum();
    const S denom = p.col(j).squaredNorm() + g.col(j).squaredNorm();
    acc += (S(2) * overlap + eps) / (denom + eps);
  }
  return S(1) - acc / S(M);
}

// L_CE = -(1/N) sum_i sum_j g_ij log p_ij, probabilities clamped at eps.
template <class S>
S ce_loss(const MatX<S>& p, const MatX<S>& g, S eps = S(kCeEps)) {
  loss_detail::check_shapes(p, g);
  loss_detail::check_probability(p);
  loss_detail::check_one_hot(g);
  const S total = (g.array() * p.array().max(eps).log()).sum();
  return -total / S(p.rows());
}

// L_DiceCE = w0 L_CE + w1 L_Dice (both weights 0.5 in the reference setup).
template <class S>
S dice_ce_loss(const MatX<S>& p, const MatX<S>& g, S w0 = S(0.5), S w1 = S(0.5)) {
  if (w0 < S(0) || w1 < S(0)) throw ConfigOutOfRangeError("loss weights must be >= 0");
  return w0 * ce_loss(p, g) + w1 * dice_loss(p, g);
}

// Dice similarity coefficient 2|P n G| / (|P| + |G|); two empty masks score 1.
inline double dsc(const Mask& pred, const Mask& gt) {
  if (pred.ext != gt.ext)
    throw ShapeMismatchError("dsc: mask extents disagree (" + pred.ext.str() + " vs " +
                             gt.ext.str() + ")");
  Eigen::Index inter = 0, np = 0, ng = 0;
  for (Eigen::Index i = 0; i < pred.labels.size(); ++i) {
    np += pred.labels[i] != 0;
    ng += gt.labels[i] != 0;
    inter += (pred.labels[i] != 0) && (gt.labels[i] != 0);
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * double(inter) / double(np + ng);
}

// |P n G| / |P u G|; two empty masks score 1.
inline double iou(const Mask& pred, const Mask& gt) {
  if (pred.ext != gt.ext)
    throw ShapeMismatchError("iou: mask extents disagree (" + pred.ext.str() + " vs " +
                             gt.ext.str() + ")");
  Eigen::Index inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] != 0, b = gt.labels[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

// In-graph DiceCE on a probability node (softmax output) against a constant
// one-hot target; identical arithmetic to the value-level functions.
template <class S>
ag::VarId dice_ce_loss_g(ag::Graph<S>& g, ag::VarId p, ag::VarId onehot, S w0 = S(0.5),
                         S w1 = S(0.5), S dice_eps = S(kDiceEps), S ce_eps = S(kCeEps)) {
  const Eigen::Index N = g.val(p).rows();
  const Eigen::Index M = g.val(p).cols();
  if (g.val(onehot).rows() != N || g.val(onehot).cols() != M)
    throw ShapeMismatchError("dice_ce_loss_g: field shapes disagree");
  ag::VarId acc{};
  for (Eigen::Index j = 0; j < M; ++j) {
    ag::VarId pj = g.slice_cols(p, j, 1);
    ag::VarId gj = g.slice_cols(onehot, j, 1);
    ag::VarId num = g.affine(g.sum(g.cmul(pj, gj)), S(2), dice_eps);
    ag::VarId den = g.affine(g.add(g.sum(g.cmul(pj, pj)), g.sum(g.cmul(gj, gj))), S(1), dice_eps);
    ag::VarId term = g.div(num, den);
    acc = j == 0 ? term : g.add(acc, term);
  }
  ag::VarId dice = g.affine(acc, -S(1) / S(M), S(1));
  ag::VarId ce = g.affine(g.sum(g.cmul(onehot, g.log_clamped(p, ce_eps))), -S(1) / S(N), S(0));
  return g.add(g.affine(ce, w0, S(0)), g.affine(dice, w1, S(0)));
}

// Two-class probability field [background, foreground] from one logit per
// voxel via a row softmax over [0, z].
template <class S>
ag::VarId foreground_softmax_g(ag::Graph<S>& g, ag::VarId logits) {
  return g.softmax_rows(g.hconcat(g.zeros(g.val(logits).rows(), 1), logits));
}

// One-hot (N x 2) target [background, foreground] for a binary mask.
template <class S>
MatX<S> one_hot_from_mask(const Mask& m) {
  MatX<S> g(m.labels.size(), 2);
  for (Eigen::Index i = 0; i < m.labels.size(); ++i) {
    g(i, 1) = S(m.labels[i] != 0);
    g(i, 0) = S(1) - g(i, 1);
  }
  return g;
}

}  // namespace msam
