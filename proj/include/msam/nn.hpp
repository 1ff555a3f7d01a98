#pragma once
#include <cmath>
#include <memory>
#include <string>

#include "msam/params.hpp"

// Layer builders. Each layer is a pair of free functions: make_* registers
// the parameter tensors under a name prefix, the forward function appends the
// computation to a Graph. Linear layers transparently pick up LoRA adapters
// (`<name>.lora_a` / `<name>.lora_b`) when present in the store.

namespace msam::nn {

using ag::GatherPlan;
using ag::VarId;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

// ---- gather plans -------------------------------------------------------

// im2col for a strided 3D convolution over a (X*Y*Z rows, Cin cols) voxel
// matrix. Output is (Xo*Yo*Zo rows, k^3*Cin cols) with column tap*Cin + cin,
// taps row-major over the kernel; out-of-range taps read as zero.
inline std::shared_ptr<GatherPlan> im2col_plan(Eigen::Index X, Eigen::Index Y, Eigen::Index Z,
                                               Eigen::Index Cin, Eigen::Index k,
                                               Eigen::Index stride, Eigen::Index pad) {
  auto plan = std::make_shared<GatherPlan>();
  const Eigen::Index Xo = (X + 2 * pad - k) / stride + 1;
  const Eigen::Index Yo = (Y + 2 * pad - k) / stride + 1;
  const Eigen::Index Zo = (Z + 2 * pad - k) / stride + 1;
  plan->in_rows = X * Y * Z;
  plan->in_cols = Cin;
  plan->out_rows = Xo * Yo * Zo;
  plan->out_cols = k * k * k * Cin;
  plan->src.resize(std::size_t(plan->out_rows) * std::size_t(plan->out_cols));
  for (Eigen::Index kx = 0; kx < k; ++kx)
    for (Eigen::Index ky = 0; ky < k; ++ky)
      for (Eigen::Index kz = 0; kz < k; ++kz) {
        const Eigen::Index tap = (kx * k + ky) * k + kz;
        for (Eigen::Index cin = 0; cin < Cin; ++cin) {
          const Eigen::Index col = tap * Cin + cin;
          for (Eigen::Index ox = 0; ox < Xo; ++ox)
            for (Eigen::Index oy = 0; oy < Yo; ++oy)
              for (Eigen::Index oz = 0; oz < Zo; ++oz) {
                const Eigen::Index row = (ox * Yo + oy) * Zo + oz;
                const Eigen::Index ix = ox * stride - pad + kx;
                const Eigen::Index iy = oy * stride - pad + ky;
                const Eigen::Index iz = oz * stride - pad + kz;
                Eigen::Index src = -1;
                if (ix >= 0 && ix < X && iy >= 0 && iy < Y && iz >= 0 && iz < Z)
                  src = cin * plan->in_rows + (ix * Y + iy) * Z + iz;
                plan->src[std::size_t(col) * plan->out_rows + row] = src;
              }
        }
      }
  return plan;
}

// Rearranges (g^3 tokens, s^3*C cols) into ((g*s)^3 voxels, C cols); used as
// the scatter half of a kernel=stride transposed convolution. Column layout
// of the input is offset*C + c with offsets row-major over the s^3 cell.
inline std::shared_ptr<GatherPlan> shuffle_plan(Eigen::Index gx, Eigen::Index gy,
                                                Eigen::Index gz, Eigen::Index s,
                                                Eigen::Index C) {
  auto plan = std::make_shared<GatherPlan>();
  plan->in_rows = gx * gy * gz;
  plan->in_cols = s * s * s * C;
  const Eigen::Index VX = gx * s, VY = gy * s, VZ = gz * s;
  plan->out_rows = VX * VY * VZ;
  plan->out_cols = C;
  plan->src.resize(std::size_t(plan->out_rows) * std::size_t(plan->out_cols));
  for (Eigen::Index c = 0; c < C; ++c)
    for (Eigen::Index vx = 0; vx < VX; ++vx)
      for (Eigen::Index vy = 0; vy < VY; ++vy)
        for (Eigen::Index vz = 0; vz < VZ; ++vz) {
          const Eigen::Index row = (vx * VY + vy) * VZ + vz;
          const Eigen::Index token = ((vx / s) * gy + (vy / s)) * gz + (vz / s);
          const Eigen::Index offset = ((vx % s) * s + (vy % s)) * s + (vz % s);
          plan->src[std::size_t(c) * plan->out_rows + row] =
              (offset * C + c) * plan->in_rows + token;
        }
  return plan;
}

// ---- layers --------------------------------------------------------------

template <class S>
void make_linear(ParamStore<S>& store, const std::string& name, Eigen::Index in,
                 Eigen::Index out, Rng& rng, double stddev = kInitStd) {
  store.add_normal(name + ".w", in, out, rng, stddev);
  store.add(name + ".b", 1, out);
}

template <class S>
VarId linear(ag::Graph<S>& g, ParamStore<S>& store, const std::string& name, VarId x) {
  VarId y = g.add_bias(g.matmul(x, g.param(store.at(name + ".w"))), g.param(store.at(name + ".b")));
  if (store.contains(name + ".lora_a")) {
    VarId lo = g.matmul(g.matmul(x, g.param(store.at(name + ".lora_a"))),
                        g.param(store.at(name + ".lora_b")));
    y = g.add(y, lo);
  }
  return y;
}

template <class S>
void make_layer_norm(ParamStore<S>& store, const std::string& name, Eigen::Index dim) {
  store.add_constant(name + ".g", 1, dim, S(1));
  store.add(name + ".b", 1, dim);
}

template <class S>
VarId layer_norm(ag::Graph<S>& g, ParamStore<S>& store, const std::string& name, VarId x) {
  return g.layer_norm(x, g.param(store.at(name + ".g")), g.param(store.at(name + ".b")),
                      S(kLayerNormEps));
}

// Scaled dot-product attention over pre-projected Q/K/V, heads as contiguous
// column blocks. No output projection.
template <class S>
VarId attention_core(ag::Graph<S>& g, VarId q, VarId k, VarId v, int heads) {
  const Eigen::Index D = g.val(q).cols();
  if (D % heads != 0) throw ShapeMismatchError("attention: dim not divisible by head count");
  const Eigen::Index dh = D / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  VarId cat{};
  for (int h = 0; h < heads; ++h) {
    VarId qh = g.slice_cols(q, h * dh, dh);
    VarId kh = g.slice_cols(k, h * dh, dh);
    VarId vh = g.slice_cols(v, h * dh, dh);
    VarId scores = g.affine(g.matmul(qh, g.transpose(kh)), scale, S(0));
    VarId oh = g.matmul(g.softmax_rows(scores), vh);
    cat = h == 0 ? oh : g.hconcat(cat, oh);
  }
  return cat;
}

template <class S>
void make_attention(ParamStore<S>& store, const std::string& prefix, Eigen::Index D, Rng& rng) {
  make_linear(store, prefix + ".q", D, D, rng);
  make_linear(store, prefix + ".k", D, D, rng);
  make_linear(store, prefix + ".v", D, D, rng);
  make_linear(store, prefix + ".out", D, D, rng);
}

// Multi-head attention with projections; q_in and kv_in may differ
// (cross-attention) or coincide (self-attention).
template <class S>
VarId attention(ag::Graph<S>& g, ParamStore<S>& store, const std::string& prefix, VarId q_in,
                VarId kv_in, int heads) {
  VarId q = linear(g, store, prefix + ".q", q_in);
  VarId k = linear(g, store, prefix + ".k", kv_in);
  VarId v = linear(g, store, prefix + ".v", kv_in);
  return linear(g, store, prefix + ".out", attention_core(g, q, k, v, heads));
}

template <class S>
void make_mlp(ParamStore<S>& store, const std::string& prefix, Eigen::Index D,
              Eigen::Index hidden, Rng& rng) {
  make_linear(store, prefix + ".fc1", D, hidden, rng);
  make_linear(store, prefix + ".fc2", hidden, D, rng);
}

template <class S>
VarId mlp(ag::Graph<S>& g, ParamStore<S>& store, const std::string& prefix, VarId x) {
  return linear(g, store, prefix + ".fc2", g.gelu(linear(g, store, prefix + ".fc1", x)));
}

template <class S>
void make_transformer_block(ParamStore<S>& store, const std::string& prefix, Eigen::Index D,
                            Rng& rng) {
  make_layer_norm(store, prefix + ".ln1", D);
  make_attention(store, prefix + ".attn", D, rng);
  make_layer_norm(store, prefix + ".ln2", D);
  make_mlp(store, prefix + ".mlp", D, 4 * D, rng);
}

// Standard pre-LN transformer block.
template <class S>
VarId transformer_block(ag::Graph<S>& g, ParamStore<S>& store, const std::string& prefix,
                        VarId x, int heads) {
  VarId n1 = layer_norm(g, store, prefix + ".ln1", x);
  x = g.add(x, attention(g, store, prefix + ".attn", n1, n1, heads));
  VarId m = mlp(g, store, prefix + ".mlp", layer_norm(g, store, prefix + ".ln2", x));
  return g.add(x, m);
}

template <class S>
void make_conv3d(ParamStore<S>& store, const std::string& name, Eigen::Index Cin,
                 Eigen::Index Cout, Eigen::Index k, Rng& rng, double stddev = kInitStd) {
  store.add_normal(name + ".w", k * k * k * Cin, Cout, rng, stddev);
  store.add(name + ".b", 1, Cout);
}

template <class S>
VarId conv3d(ag::Graph<S>& g, ParamStore<S>& store, const std::string& name, VarId x,
             const std::shared_ptr<const GatherPlan>& plan) {
  VarId cols = g.gather(x, plan, name + ".im2col");
  return g.add_bias(g.matmul(cols, g.param(store.at(name + ".w"))),
                    g.param(store.at(name + ".b")));
}

}  // namespace msam::nn
