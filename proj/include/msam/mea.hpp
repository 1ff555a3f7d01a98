#pragma once
#include <string>
#include <utility>

#include "msam/nn.hpp"

// Mask-Enhanced Adapter: fuses mask-embedding positional priors into the
// image embedding. Two parallel transformer branches with mutual residual
// connections (MFEB), residual + LayerNorm on both streams, a fused
// multi-head attention over the summed streams, and a final MLP.

namespace msam::mea {

using ag::VarId;

template <class S>
void make_params(ParamStore<S>& store, const std::string& p, Eigen::Index D, Rng& rng) {
  nn::make_transformer_block(store, p + ".mfeb_img", D, rng);
  nn::make_transformer_block(store, p + ".mfeb_mask", D, rng);
  nn::make_layer_norm(store, p + ".ln_img", D);
  nn::make_layer_norm(store, p + ".ln_mask", D);
  store.add_normal(p + ".w_qkv", D, 3 * D, rng, nn::kInitStd);
  store.add(p + ".b_qkv", 1, 3 * D);
  nn::make_linear(store, p + ".fuse_out", D, D, rng);
  nn::make_layer_norm(store, p + ".ln_fuse", D);
  nn::make_mlp(store, p + ".mlp", D, 4 * D, rng);
}

namespace detail {

// One MFEB branch. The residual of the attention sublayer is crossed with
// the partner stream; the MLP sublayer keeps its standard residual:
//   A = MHSA(LN1(x)) + cross,  out = MLP(LN2(A)) + A
template <class S>
VarId mfeb_branch(ag::Graph<S>& g, ParamStore<S>& store, const std::string& prefix, VarId x,
                  VarId cross, int heads) {
  VarId n1 = nn::layer_norm(g, store, prefix + ".ln1", x);
  VarId a = g.add(nn::attention(g, store, prefix + ".attn", n1, n1, heads), cross);
  VarId m = nn::mlp(g, store, prefix + ".mlp", nn::layer_norm(g, store, prefix + ".ln2", a));
  return g.add(m, a);
}

template <class S>
void check_pair(const ag::Graph<S>& g, VarId ei, VarId em, Eigen::Index D) {
  if (g.val(ei).rows() != g.val(em).rows() || g.val(ei).cols() != g.val(em).cols())
    throw ShapeMismatchError("image and mask embeddings must have identical shape");
  if (g.val(ei).cols() != D)
    throw ShapeMismatchError("embedding feature dim " + std::to_string(g.val(ei).cols()) +
                             " does not match adapter dim " + std::to_string(D));
}

}  // namespace detail

// Mutual Feature Enhancement Block: twin transformer branches whose
// attention residuals cross between the image and mask streams.
template <class S>
std::pair<VarId, VarId> mfeb(ag::Graph<S>& g, ParamStore<S>& store, const std::string& p,
                             VarId ei, VarId em, int heads, Eigen::Index D) {
  detail::check_pair(g, ei, em, D);
  VarId ei2 = detail::mfeb_branch(g, store, p + ".mfeb_img", ei, em, heads);
  VarId em2 = detail::mfeb_branch(g, store, p + ".mfeb_mask", em, ei, heads);
  return {ei2, em2};
}

template <class S>
VarId forward(ag::Graph<S>& g, ParamStore<S>& store, const std::string& p, VarId ei, VarId em,
              int heads, Eigen::Index D) {
  auto [ei2, em2] = mfeb(g, store, p, ei, em, heads, D);
  VarId eii = nn::layer_norm(g, store, p + ".ln_img", g.add(ei, ei2));
  VarId emm = nn::layer_norm(g, store, p + ".ln_mask", g.add(em, em2));
  // [Q,K,V] = (E''_I + E''_M) W_qkv, fused multi-head attention
  VarId s = g.add(eii, emm);
  VarId qkv = g.add_bias(g.matmul(s, g.param(store.at(p + ".w_qkv"))),
                         g.param(store.at(p + ".b_qkv")));
  VarId q = g.slice_cols(qkv, 0, D);
  VarId k = g.slice_cols(qkv, D, D);
  VarId v = g.slice_cols(qkv, 2 * D, D);
  VarId fused = nn::linear(g, store, p + ".fuse_out", nn::attention_core(g, q, k, v, heads));
  // add E''_I, normalize, final MLP (no surrounding residual)
  return nn::mlp(g, store, p + ".mlp",
                 nn::layer_norm(g, store, p + ".ln_fuse", g.add(fused, eii)));
}

}  // namespace msam::mea
