#pragma once
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "msam/params.hpp"

// Shared helpers for the test suites.

namespace test_support {

struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;
};

// Central-difference gradient check (64-bit, default step 1e-4). `build`
// must construct the scalar loss graph from the current store values; it is
// re-run for every probe so parameter perturbations are picked up. Relative
// error uses a small floor so exactly-zero gradients compare cleanly.
template <class BuildFn>
GradCheckResult gradcheck_params(msam::ParamStore<double>& store,
                                 const std::vector<std::string>& tensor_names, BuildFn&& build,
                                 int n_coords, msam::Rng& rng, double step = 1e-4) {
  auto eval = [&]() {
    msam::ag::Graph<double> g;
    return g.val(build(g))(0, 0);
  };
  store.zero_grads();
  {
    msam::ag::Graph<double> g;
    auto root = build(g);
    g.backward(root);
  }
  GradCheckResult res;
  for (const auto& name : tensor_names) {
    auto& t = store.at(name);
    for (int k = 0; k < n_coords; ++k) {
      const Eigen::Index r = rng.uniform_int(t.value.rows());
      const Eigen::Index c = rng.uniform_int(t.value.cols());
      const double orig = t.value(r, c);
      t.value(r, c) = orig + step;
      const double fp = eval();
      t.value(r, c) = orig - step;
      const double fm = eval();
      t.value(r, c) = orig;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = t.grad(r, c);
      const double diff = std::abs(num - ana);
      const double rel =
          diff < 1e-8 ? 0.0 : diff / std::max({std::abs(num), std::abs(ana), 1e-6});
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst = name + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
  }
  return res;
}

inline msam::MatX<double> random_matrix(Eigen::Index r, Eigen::Index c, msam::Rng& rng,
                                        double stddev = 1.0) {
  msam::MatX<double> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal(0.0, stddev);
  return m;
}

// Random row-normalized probability field.
inline msam::MatX<double> random_probability(Eigen::Index n, Eigen::Index m, msam::Rng& rng) {
  msam::MatX<double> p(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      p(i, j) = rng.uniform(1e-4, 1.0);
      sum += p(i, j);
    }
    p.row(i) /= sum;
  }
  return p;
}

inline msam::MatX<double> random_one_hot(Eigen::Index n, Eigen::Index m, msam::Rng& rng) {
  msam::MatX<double> g = msam::MatX<double>::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) g(i, rng.uniform_int(m)) = 1.0;
  return g;
}

inline msam::Mask random_mask(const msam::Extents& e, double p_fg, msam::Rng& rng) {
  msam::Mask m = msam::Mask::zeros(e);
  for (Eigen::Index i = 0; i < m.labels.size(); ++i)
    m.labels[i] = rng.bernoulli(p_fg) ? 1 : 0;
  return m;
}

inline msam::Volume<float> random_volume(const msam::Extents& e, msam::Rng& rng) {
  msam::Volume<float> v = msam::Volume<float>::zeros(e);
  for (Eigen::Index i = 0; i < v.data.size(); ++i) v.data[i] = float(rng.normal(0.0, 1.0));
  return v;
}

}  // namespace test_support
