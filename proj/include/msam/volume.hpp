#pragma once
#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <sstream>

#include "msam/errors.hpp"

namespace msam {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;

// Canonical axis order is (C, X, Y, Z), row-major: z varies fastest.
struct Extents {
  Eigen::Index c = 1;
  Eigen::Index x = 0;
  Eigen::Index y = 0;
  Eigen::Index z = 0;

  Eigen::Index spatial() const { return x * y * z; }
  Eigen::Index total() const { return c * spatial(); }
  Eigen::Index flat(Eigen::Index ci, Eigen::Index xi, Eigen::Index yi, Eigen::Index zi) const {
    return ((ci * x + xi) * y + yi) * z + zi;
  }
  bool operator==(const Extents&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << c << "x" << x << "x" << y << "x" << z;
    return os.str();
  }
};

// Dense 3D scalar grid with a channel axis. Values must stay finite.
template <class S>
struct Volume {
  Extents ext;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  ArrX<S> data;  // size ext.total(), canonical order

  static Volume zeros(Extents e) {
    Volume v;
    v.ext = e;
    v.data = ArrX<S>::Zero(e.total());
    return v;
  }

  S& at(Eigen::Index c, Eigen::Index x, Eigen::Index y, Eigen::Index z) {
    return data[ext.flat(c, x, y, z)];
  }
  S at(Eigen::Index c, Eigen::Index x, Eigen::Index y, Eigen::Index z) const {
    return data[ext.flat(c, x, y, z)];
  }

  template <class T>
  Volume<T> cast() const {
    Volume<T> out;
    out.ext = ext;
    out.spacing = spacing;
    out.data = data.template cast<T>();
    return out;
  }
};

// Binary {0,1} label grid aligned to a companion Volume.
struct Mask {
  Extents ext;
  ArrX<std::uint8_t> labels;

  static Mask zeros(Extents e) {
    Mask m;
    m.ext = e;
    m.labels = ArrX<std::uint8_t>::Zero(e.total());
    return m;
  }

  std::uint8_t& at(Eigen::Index c, Eigen::Index x, Eigen::Index y, Eigen::Index z) {
    return labels[ext.flat(c, x, y, z)];
  }
  std::uint8_t at(Eigen::Index c, Eigen::Index x, Eigen::Index y, Eigen::Index z) const {
    return labels[ext.flat(c, x, y, z)];
  }

  Eigen::Index foreground() const {
    return (labels > std::uint8_t{0}).count();
  }
};

inline void validate_extents(const Extents& e) {
  if (e.c < 1 || e.x < 1 || e.y < 1 || e.z < 1)
    throw ShapeMismatchError("extents must be >= 1 on every axis, got " + e.str());
}

template <class S>
void validate(const Volume<S>& v) {
  validate_extents(v.ext);
  if (v.data.size() != v.ext.total())
    throw ShapeMismatchError("volume payload size does not match extents " + v.ext.str());
  if (!v.data.isFinite().all())
    throw NonFiniteDataError("volume contains NaN or Inf voxels");
  for (double s : v.spacing)
    if (!(s > 0.0)) throw ShapeMismatchError("voxel spacing must be positive");
}

inline void validate(const Mask& m) {
  validate_extents(m.ext);
  if (m.labels.size() != m.ext.total())
    throw ShapeMismatchError("mask payload size does not match extents " + m.ext.str());
  if ((m.labels > std::uint8_t{1}).any())
    throw NonFiniteDataError("mask labels must be exactly 0 or 1");
}

}  // namespace msam
