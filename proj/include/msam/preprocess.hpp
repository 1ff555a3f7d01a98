#pragma once
#include <algorithm>
#include <array>
#include <utility>

#include "msam/rng.hpp"
#include "msam/volume.hpp"

namespace msam {

namespace prep_detail {

// Per-axis copy window for crop-or-pad. A deficit d pads floor(d/2) leading
// voxels; an excess crops from offset floor((in - target)/2).
struct AxisMap {
  Eigen::Index in_off, out_off, n;
};

inline AxisMap axis_map(Eigen::Index in, Eigen::Index target) {
  if (in >= target) return {(in - target) / 2, 0, target};
  return {0, (target - in) / 2, in};
}

template <class T>
ArrX<T> crop_or_pad_grid(const ArrX<T>& data, const Extents& in, const Extents& out) {
  ArrX<T> res = ArrX<T>::Zero(out.total());
  const AxisMap mx = axis_map(in.x, out.x);
  const AxisMap my = axis_map(in.y, out.y);
  const AxisMap mz = axis_map(in.z, out.z);
  for (Eigen::Index c = 0; c < in.c; ++c)
    for (Eigen::Index x = 0; x < mx.n; ++x)
      for (Eigen::Index y = 0; y < my.n; ++y)
        for (Eigen::Index z = 0; z < mz.n; ++z)
          res[out.flat(c, mx.out_off + x, my.out_off + y, mz.out_off + z)] =
              data[in.flat(c, mx.in_off + x, my.in_off + y, mz.in_off + z)];
  return res;
}

template <class T>
ArrX<T> flip_grid(const ArrX<T>& data, const Extents& e, bool fx, bool fy, bool fz) {
  if (!fx && !fy && !fz) return data;
  ArrX<T> res(e.total());
  for (Eigen::Index c = 0; c < e.c; ++c)
    for (Eigen::Index x = 0; x < e.x; ++x)
      for (Eigen::Index y = 0; y < e.y; ++y)
        for (Eigen::Index z = 0; z < e.z; ++z)
          res[e.flat(c, fx ? e.x - 1 - x : x, fy ? e.y - 1 - y : y, fz ? e.z - 1 - z : z)] =
              data[e.flat(c, x, y, z)];
  return res;
}

}  // namespace prep_detail

// Standardizes spatial extents to `target` per axis: center crop where the
// input is larger, symmetric zero padding where it is smaller. The channel
// axis is never altered.
template <class S>
Volume<S> crop_or_pad(const Volume<S>& v, std::array<Eigen::Index, 3> target) {
  if (target[0] < 1 || target[1] < 1 || target[2] < 1)
    throw ShapeMismatchError("crop_or_pad target extents must be >= 1");
  Volume<S> out;
  out.ext = {v.ext.c, target[0], target[1], target[2]};
  out.spacing = v.spacing;
  out.data = prep_detail::crop_or_pad_grid<S>(v.data, v.ext, out.ext);
  return out;
}

inline Mask crop_or_pad(const Mask& m, std::array<Eigen::Index, 3> target) {
  if (target[0] < 1 || target[1] < 1 || target[2] < 1)
    throw ShapeMismatchError("crop_or_pad target extents must be >= 1");
  Mask out;
  out.ext = {m.ext.c, target[0], target[1], target[2]};
  out.labels = prep_detail::crop_or_pad_grid<std::uint8_t>(m.labels, m.ext, out.ext);
  return out;
}

// Per-channel z-score over all voxels of the channel, population standard
// deviation, statistics accumulated in double. std is floored at eps so a
// constant channel maps to all zeros.
template <class S>
Volume<S> zscore_normalize(const Volume<S>& v, double eps = 1e-8) {
  validate(v);
  Volume<S> out = v;
  const Eigen::Index n = v.ext.spatial();
  for (Eigen::Index c = 0; c < v.ext.c; ++c) {
    auto chan = out.data.segment(c * n, n);
    const double mean = chan.template cast<double>().mean();
    const double var = (chan.template cast<double>() - mean).square().mean();
    const double denom = std::max(std::sqrt(var), eps);
    chan = ((chan.template cast<double>() - mean) / denom).template cast<S>();
  }
  return out;
}

// Deterministic axis reversal applied identically to image and mask.
template <class S>
std::pair<Volume<S>, Mask> flip_axes(const Volume<S>& v, const Mask& m, bool fx, bool fy,
                                     bool fz) {
  if (v.ext != m.ext)
    throw ShapeMismatchError("flip_axes: mask extents " + m.ext.str() +
                             " do not match volume extents " + v.ext.str());
  Volume<S> vo = v;
  vo.data = prep_detail::flip_grid<S>(v.data, v.ext, fx, fy, fz);
  Mask mo = m;
  mo.labels = prep_detail::flip_grid<std::uint8_t>(m.labels, m.ext, fx, fy, fz);
  return {std::move(vo), std::move(mo)};
}

// Each spatial axis is independently reversed with probability 1/2.
template <class S>
std::pair<Volume<S>, Mask> random_flip(const Volume<S>& v, const Mask& m, Rng& rng) {
  const bool fx = rng.bernoulli();
  const bool fy = rng.bernoulli();
  const bool fz = rng.bernoulli();
  return flip_axes(v, m, fx, fy, fz);
}

}  // namespace msam
