#pragma once
#include <optional>
#include <ostream>
#include <utility>
#include <vector>

#include "msam/backbone.hpp"
#include "msam/losses.hpp"

namespace msam {

// Disjoint partition of the symmetric difference between prediction and
// ground truth, as flat voxel indices.
struct ErrorRegion {
  std::vector<Eigen::Index> false_negatives;  // GT foreground, predicted background
  std::vector<Eigen::Index> false_positives;  // GT background, predicted foreground
  bool empty() const { return false_negatives.empty() && false_positives.empty(); }
};

inline ErrorRegion error_region(const Mask& gt, const Mask& pred) {
  if (gt.ext != pred.ext)
    throw ShapeMismatchError("error_region: mask extents disagree (" + gt.ext.str() + " vs " +
                             pred.ext.str() + ")");
  ErrorRegion r;
  for (Eigen::Index i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] && !pred.labels[i]) r.false_negatives.push_back(i);
    else if (!gt.labels[i] && pred.labels[i]) r.false_positives.push_back(i);
  }
  return r;
}

namespace refine_detail {

inline std::array<Eigen::Index, 3> coord_of(const Extents& e, Eigen::Index flat) {
  const Eigen::Index z = flat % e.z;
  const Eigen::Index y = (flat / e.z) % e.y;
  const Eigen::Index x = (flat / (e.z * e.y)) % e.x;
  return {x, y, z};
}

inline std::vector<Eigen::Index> foreground_indices(const Mask& m) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < m.labels.size(); ++i)
    if (m.labels[i]) idx.push_back(i);
  return idx;
}

}  // namespace refine_detail

// Point-sampling protocol: the first click is a uniform ground-truth
// foreground voxel; later clicks are uniform over the error region of the
// current prediction, labeled foreground on false negatives and background
// on false positives. An empty error region falls back to a foreground
// click so the fixed per-stage protocol is preserved.
inline PromptPoint sample_point(int stage, const Mask& gt, const Mask* current, Rng& rng) {
  const auto fg = refine_detail::foreground_indices(gt);
  if (fg.empty()) throw EmptyForegroundError("ground truth has no foreground voxels");
  if (stage >= 1) {
    if (!current)
      throw ConfigOutOfRangeError("sample_point: current mask required for stage >= 1");
    const ErrorRegion r = error_region(gt, *current);
    if (!r.empty()) {
      const Eigen::Index n_fn = Eigen::Index(r.false_negatives.size());
      const Eigen::Index n = n_fn + Eigen::Index(r.false_positives.size());
      const Eigen::Index k = rng.uniform_int(n);
      const bool is_fn = k < n_fn;
      const Eigen::Index flat =
          is_fn ? r.false_negatives[std::size_t(k)] : r.false_positives[std::size_t(k - n_fn)];
      return PromptPoint{refine_detail::coord_of(gt.ext, flat), is_fn};
    }
  }
  const Eigen::Index flat = fg[std::size_t(rng.uniform_int(Eigen::Index(fg.size())))];
  return PromptPoint{refine_detail::coord_of(gt.ext, flat), true};
}

// Inference-demo initial prompt when no ground truth exists: any in-bounds
// voxel, labeled foreground.
inline PromptPoint no_gt_initial_point(const Extents& e, Rng& rng) {
  return PromptPoint{{rng.uniform_int(e.x), rng.uniform_int(e.y), rng.uniform_int(e.z)}, true};
}

// Per-stage record of the refinement loop.
template <class S>
struct RefinementState {
  int stage = 0;
  MatX<S> image_emb;                // E_I^t as fed into the adapter
  MatX<S> mask_emb;                 // E_M^t = encode_mask(M^{t-1})
  std::vector<PromptPoint> points;  // accumulated prompt after this stage's sampling
  Mask mask;                        // M^t
  std::optional<double> dsc_score;
  std::optional<double> iou_score;
};

template <class S>
struct RefineRun {
  Mask final_mask;
  std::vector<RefinementState<S>> trace;
  std::vector<ag::VarId> stage_logits;  // nodes in the caller's graph
};

// The staged loop: encode once, then per stage sample a point, fuse the
// current mask embedding into the image embedding, decode, and chain the
// fused embedding and the re-encoded mask into the next stage. Training and
// inference share this path; the mask re-encoding runs through a
// straight-through binarization so gradients can cross stage boundaries.
template <class S, class VS>
RefineRun<S> run_refinement(const Model<S>& model, ag::Graph<S>& g, const Volume<VS>& vol,
                            const Mask* gt, int n_stages, Rng& rng) {
  if (n_stages < 1) throw ConfigOutOfRangeError("n_stages must be >= 1");
  if (gt && gt->ext != vol.ext)
    throw ShapeMismatchError("ground truth extents do not match volume extents");

  RefineRun<S> run;
  ag::VarId ei = model.encode_image_g(g, g.constant(model.volume_to_matrix(vol), "volume"));
  const Eigen::Index s3 = vol.ext.spatial();
  ag::VarId em = model.encode_mask_g(g, g.zeros(s3, 1));  // null mask

  std::vector<PromptPoint> points;
  Mask current;
  for (int t = 0; t < n_stages; ++t) {
    if (gt) {
      points.push_back(sample_point(t, *gt, t >= 1 ? &current : nullptr, rng));
    } else if (t == 0) {
      points.push_back(no_gt_initial_point(vol.ext, rng));
    }
    ag::VarId ep = model.encode_points_g(g, points);
    ag::VarId ehat = model.mea_forward_g(g, ei, em);
    ag::VarId logits = model.decode_logits_g(g, ehat, ep);
    auto [mask, logit_vol] = model.extract_mask(g.val(logits));

    RefinementState<S> st;
    st.stage = t;
    st.image_emb = g.val(ei);
    st.mask_emb = g.val(em);
    st.points = points;
    st.mask = mask;
    if (gt) {
      st.dsc_score = dsc(mask, *gt);
      st.iou_score = iou(mask, *gt);
    }
    run.trace.push_back(std::move(st));
    run.stage_logits.push_back(logits);

    ei = ehat;
    em = model.encode_mask_g(g, g.straight_through_binarize(logits));
    current = std::move(mask);
  }
  run.final_mask = run.trace.back().mask;
  return run;
}

// The final-stage mask is the segmentation result; the trace records every
// stage for inspection and testing.
template <class S, class VS>
std::pair<Mask, std::vector<RefinementState<S>>> refine(const Model<S>& model,
                                                        const Volume<VS>& vol, const Mask* gt,
                                                        int n_stages, Rng& rng) {
  ag::Graph<S> g;
  auto run = run_refinement(model, g, vol, gt, n_stages, rng);
  return {std::move(run.final_mask), std::move(run.trace)};
}

// One line per stage: stage index, newest point, labels and overlap metrics.
template <class S>
void write_trace(std::ostream& os, const std::vector<RefinementState<S>>& trace) {
  for (const auto& st : trace) {
    os << "stage=" << st.stage;
    if (!st.points.empty()) {
      const PromptPoint& p = st.points.back();
      os << " point=" << p.coord[0] << "," << p.coord[1] << "," << p.coord[2]
         << " label=" << (p.foreground ? "fg" : "bg");
    }
    os << " dsc=";
    if (st.dsc_score) os << *st.dsc_score;
    else os << "na";
    os << " iou=";
    if (st.iou_score) os << *st.iou_score;
    else os << "na";
    os << "\n";
  }
}

}  // namespace msam
