#pragma once
#include <cmath>
#include <utility>
#include <vector>

#include "msam/rng.hpp"
#include "msam/volume.hpp"

namespace msam {

// Axis-aligned ellipsoid lesion. A radius of 0 on an axis degenerates to the
// single plane where the voxel coordinate equals the center exactly.
struct Lesion {
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> radii{0, 0, 0};

  bool contains(Eigen::Index x, Eigen::Index y, Eigen::Index z) const {
    const double p[3] = {double(x), double(y), double(z)};
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = p[a] - center[a];
      if (radii[a] == 0.0) {
        if (d != 0.0) return false;
      } else {
        acc += (d / radii[a]) * (d / radii[a]);
      }
    }
    return acc <= 1.0;
  }
};

struct PhantomConfig {
  Extents ext{1, 32, 32, 32};
  int n_lesions = 1;  // 1..4, ignored when `lesions` is nonempty
  double radius_min = 2.0;
  double radius_max = 6.0;
  double lesion_intensity = 1.0;
  double noise_sigma = 0.05;
  // Explicitly pinned lesion geometry; when set, no geometry is sampled.
  std::vector<Lesion> lesions;
  // Foreground must land in this band or the configuration is rejected.
  double min_fg_fraction = 0.001;
  double max_fg_fraction = 0.20;
  int max_retries = 100;
};

namespace phantom_detail {

inline void validate_config(const PhantomConfig& cfg) {
  if (cfg.ext.c != 1)
    throw ConfigOutOfRangeError("phantoms are single-channel (channels must be 1)");
  if (cfg.ext.x < 8 || cfg.ext.y < 8 || cfg.ext.z < 8)
    throw ConfigOutOfRangeError("phantom extents must be >= 8 per axis, got " + cfg.ext.str());
  const std::size_t count = cfg.lesions.empty() ? std::size_t(cfg.n_lesions) : cfg.lesions.size();
  if (count < 1 || count > 4)
    throw ConfigOutOfRangeError("lesion count must be in [1, 4], got " + std::to_string(count));
  if (cfg.radius_min < 0.0 || cfg.radius_max < cfg.radius_min)
    throw ConfigOutOfRangeError("lesion radius range is invalid");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigOutOfRangeError("noise sigma must be >= 0");
}

inline std::vector<Lesion> sample_lesions(const PhantomConfig& cfg, Rng& rng) {
  std::vector<Lesion> ls(static_cast<std::size_t>(cfg.n_lesions));
  for (auto& l : ls) {
    for (int a = 0; a < 3; ++a) l.radii[a] = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double dims[3] = {double(cfg.ext.x), double(cfg.ext.y), double(cfg.ext.z)};
    for (int a = 0; a < 3; ++a) {
      const double lo = std::min(l.radii[a] + 1.0, dims[a] / 2.0);
      l.center[a] = rng.uniform(lo, dims[a] - 1.0 - lo);
    }
  }
  return ls;
}

inline Mask rasterize(const std::vector<Lesion>& lesions, const Extents& e) {
  Mask m = Mask::zeros(e);
  for (Eigen::Index x = 0; x < e.x; ++x)
    for (Eigen::Index y = 0; y < e.y; ++y)
      for (Eigen::Index z = 0; z < e.z; ++z)
        for (const auto& l : lesions)
          if (l.contains(x, y, z)) {
            m.at(0, x, y, z) = 1;
            break;
          }
  return m;
}

}  // namespace phantom_detail

// Synthetic tumor phantom: a smooth background ramp in [0,1], ellipsoidal
// high-intensity lesions, additive Gaussian noise. The mask marks exactly
// the lesion voxels.
template <class S = float>
std::pair<Volume<S>, Mask> generate_phantom(const PhantomConfig& cfg, Rng& rng) {
  phantom_detail::validate_config(cfg);
  const Extents e = cfg.ext;
  const double lo = e.total() * cfg.min_fg_fraction;
  const double hi = e.total() * cfg.max_fg_fraction;

  std::vector<Lesion> lesions;
  Mask mask;
  if (!cfg.lesions.empty()) {
    lesions = cfg.lesions;
    mask = phantom_detail::rasterize(lesions, e);
    const double fg = double(mask.foreground());
    if (fg < lo || fg > hi)
      throw ConfigOutOfRangeError("explicit lesion geometry yields foreground fraction " +
                                  std::to_string(fg / double(e.total())) +
                                  " outside [" + std::to_string(cfg.min_fg_fraction) + ", " +
                                  std::to_string(cfg.max_fg_fraction) + "]");
  } else {
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt >= cfg.max_retries)
        throw ConfigOutOfRangeError(
            "could not sample lesion geometry inside the foreground band; "
            "adjust radius range or extents");
      lesions = phantom_detail::sample_lesions(cfg, rng);
      mask = phantom_detail::rasterize(lesions, e);
      const double fg = double(mask.foreground());
      if (fg >= lo && fg <= hi) break;
    }
  }

  // Background: linear ramp along a random direction, rescaled to [0, 1].
  double dir[3] = {rng.normal(), rng.normal(), rng.normal()};
  const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  if (norm > 0.0)
    for (double& d : dir) d /= norm;
  const double span = std::abs(dir[0]) * double(e.x - 1) + std::abs(dir[1]) * double(e.y - 1) +
                      std::abs(dir[2]) * double(e.z - 1);
  const double base = (std::min(dir[0], 0.0) * double(e.x - 1)) +
                      (std::min(dir[1], 0.0) * double(e.y - 1)) +
                      (std::min(dir[2], 0.0) * double(e.z - 1));

  Volume<S> vol = Volume<S>::zeros(e);
  for (Eigen::Index x = 0; x < e.x; ++x)
    for (Eigen::Index y = 0; y < e.y; ++y)
      for (Eigen::Index z = 0; z < e.z; ++z) {
        const double proj = dir[0] * double(x) + dir[1] * double(y) + dir[2] * double(z);
        double v = span > 0.0 ? (proj - base) / span : 0.5;
        if (mask.at(0, x, y, z)) v += cfg.lesion_intensity;
        v += rng.normal(0.0, cfg.noise_sigma);
        vol.at(0, x, y, z) = static_cast<S>(v);
      }
  return {std::move(vol), std::move(mask)};
}

}  // namespace msam
