#pragma once
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msam/mea.hpp"
#include "msam/volume.hpp"

namespace msam {

// Architectural hyperparameters. Desk-scale defaults; the 128/16/384
// configuration mirrors the full-resolution regime.
struct ModelConfig {
  int volume_size = 32;
  int patch_size = 8;
  int channels = 1;
  int embed_dim = 64;
  int enc_depth = 2;
  int enc_heads = 4;
  int dec_depth = 2;
  int dec_heads = 4;
  int lora_rank = 0;
  std::uint64_t seed = 0;

  int grid() const { return volume_size / patch_size; }
  Eigen::Index n_tokens() const {
    const Eigen::Index s = grid();
    return s * s * s;
  }

  // Mask-encoder stack: one stride-2 convolution per halving, widths ramping
  // up to embed_dim.
  int mask_encoder_layers() const {
    int n = 0, p = patch_size;
    while (p > 1) {
      p /= 2;
      ++n;
    }
    return n;
  }
  std::vector<int> mask_channel_widths() const {
    const int n = mask_encoder_layers();
    std::vector<int> w(n);
    for (int i = 0; i < n; ++i) w[i] = std::max(embed_dim >> (n - 1 - i), 4);
    return w;
  }

  void validate() const {
    if (volume_size < 2 || patch_size < 2 || channels < 1 || embed_dim < 2)
      throw ConfigOutOfRangeError("model config has degenerate extents");
    if ((patch_size & (patch_size - 1)) != 0)
      throw ConfigOutOfRangeError("patch_size must be a power of two");
    if (volume_size % patch_size != 0)
      throw ConfigOutOfRangeError("volume_size must be divisible by patch_size");
    if (embed_dim % 2 != 0) throw ConfigOutOfRangeError("embed_dim must be even");
    if (enc_heads < 1 || dec_heads < 1 || embed_dim % enc_heads != 0 ||
        embed_dim % dec_heads != 0)
      throw ConfigOutOfRangeError("embed_dim must be divisible by the head counts");
    if (enc_depth < 1 || dec_depth < 1) throw ConfigOutOfRangeError("depths must be >= 1");
    if (lora_rank < 0) throw ConfigOutOfRangeError("lora_rank must be >= 0");
  }
};

// (token-count x feature-dim) embedding; grid_shape present for embeddings
// that flatten a token grid (image, mask), absent for point embeddings.
template <class S>
struct TokenEmbedding {
  MatX<S> values;
  std::optional<std::array<Eigen::Index, 3>> grid_shape;
};

// A simulated clinician click: voxel coordinate plus foreground/background.
struct PromptPoint {
  std::array<Eigen::Index, 3> coord{0, 0, 0};
  bool foreground = true;
};

template <class S>
class Model {
public:
  using Graph = ag::Graph<S>;
  using VarId = ag::VarId;
  using Mat = MatX<S>;

  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0));
    build_params(rng);
    build_plans();
    if (cfg_.lora_rank > 0) apply_lora(cfg_.lora_rank);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  // ---- graph builders ----

  // vox: (volume_size^3 rows, channels cols)
  VarId encode_image_g(Graph& g, VarId vox) const {
    const Eigen::Index S3 = Eigen::Index(cfg_.volume_size) * cfg_.volume_size * cfg_.volume_size;
    if (g.val(vox).rows() != S3 || g.val(vox).cols() != cfg_.channels)
      throw ShapeMismatchError("encode_image: voxel matrix does not match config");
    VarId patches = g.gather(vox, patch_plan_, "image_encoder.patchify");
    VarId x = nn::linear(g, store(), "image_encoder.patch_embed", patches);
    x = g.add(x, g.param(store().at("image_encoder.pos_emb")));
    for (int i = 0; i < cfg_.enc_depth; ++i)
      x = nn::transformer_block(g, store(), "image_encoder.block" + std::to_string(i), x,
                                cfg_.enc_heads);
    return nn::layer_norm(g, store(), "image_encoder.ln_f", x);
  }

  VarId encode_points_g(Graph& g, const std::vector<PromptPoint>& pts) const {
    if (pts.empty()) throw EmptyPromptError("prompt must contain at least one point");
    const Eigen::Index n = Eigen::Index(pts.size());
    const Eigen::Index D = cfg_.embed_dim;
    const Mat& fourier = store().at("point_encoder.fourier").value;  // 3 x D/2
    Mat feats(n, D);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& pt = pts[std::size_t(i)];
      for (int a = 0; a < 3; ++a)
        if (pt.coord[std::size_t(a)] < 0 || pt.coord[std::size_t(a)] >= cfg_.volume_size)
          throw OutOfBoundsPointError("prompt point coordinate out of volume bounds");
      Eigen::Matrix<S, 1, 3> c;
      for (int a = 0; a < 3; ++a)
        c(0, a) = (S(pt.coord[std::size_t(a)]) + S(0.5)) / S(cfg_.volume_size);
      Eigen::Matrix<S, 1, Eigen::Dynamic> f = S(2 * M_PI) * (c * fourier);
      feats.row(i) << f.array().sin().matrix(), f.array().cos().matrix();
    }
    // learned per-label offset; gathered so gradients reach the table
    auto plan = std::make_shared<ag::GatherPlan>();
    plan->in_rows = 2;
    plan->in_cols = D;
    plan->out_rows = n;
    plan->out_cols = D;
    plan->src.resize(std::size_t(n) * std::size_t(D));
    for (Eigen::Index d = 0; d < D; ++d)
      for (Eigen::Index i = 0; i < n; ++i)
        plan->src[std::size_t(d) * n + i] =
            d * 2 + (pts[std::size_t(i)].foreground ? 0 : 1);
    VarId offsets =
        g.gather(g.param(store().at("point_encoder.label_emb")), plan, "point_encoder.labels");
    return g.add(g.constant(std::move(feats), "point_encoder.fourier_features"), offsets);
  }

  // mask: (volume_size^3 rows, 1 col) of {0,1} (or straight-through values)
  VarId encode_mask_g(Graph& g, VarId mask) const {
    const Eigen::Index S3 = Eigen::Index(cfg_.volume_size) * cfg_.volume_size * cfg_.volume_size;
    if (g.val(mask).rows() != S3 || g.val(mask).cols() != 1)
      throw ShapeMismatchError("encode_mask: mask matrix does not match config");
    VarId x = mask;
    const int layers = cfg_.mask_encoder_layers();
    for (int i = 0; i < layers; ++i) {
      x = nn::conv3d(g, store(), "mask_encoder.conv" + std::to_string(i), x, mask_plans_[i]);
      if (i + 1 < layers) x = g.gelu(x);
    }
    return x;
  }

  VarId mea_forward_g(Graph& g, VarId ei, VarId em) const {
    return mea::forward(g, store(), "mea", ei, em, cfg_.enc_heads, cfg_.embed_dim);
  }

  std::pair<VarId, VarId> mfeb_g(Graph& g, VarId ei, VarId em) const {
    return mea::mfeb(g, store(), "mea", ei, em, cfg_.enc_heads, cfg_.embed_dim);
  }

  // Two-way attention between prompt and image tokens, then transposed-conv
  // upscaling back to full resolution and a per-voxel linear head.
  VarId decode_logits_g(Graph& g, VarId img, VarId prompt) const {
    if (g.val(img).rows() != cfg_.n_tokens() || g.val(img).cols() != cfg_.embed_dim)
      throw ShapeMismatchError("decode: image embedding does not match config");
    if (g.val(prompt).cols() != cfg_.embed_dim)
      throw ShapeMismatchError("decode: prompt embedding dim does not match config");
    VarId x = img;
    VarId p = prompt;
    for (int i = 0; i < cfg_.dec_depth; ++i) {
      const std::string b = "decoder.block" + std::to_string(i);
      VarId ps = nn::layer_norm(g, store(), b + ".ln_self", p);
      p = g.add(p, nn::attention(g, store(), b + ".self_attn", ps, ps, cfg_.dec_heads));
      p = g.add(p, nn::attention(g, store(), b + ".cross_pi",
                                 nn::layer_norm(g, store(), b + ".ln_piq", p),
                                 nn::layer_norm(g, store(), b + ".ln_pikv", x), cfg_.dec_heads));
      p = g.add(p, nn::mlp(g, store(), b + ".mlp", nn::layer_norm(g, store(), b + ".ln_mlp", p)));
      x = g.add(x, nn::attention(g, store(), b + ".cross_ip",
                                 nn::layer_norm(g, store(), b + ".ln_ipq", x),
                                 nn::layer_norm(g, store(), b + ".ln_ipkv", p), cfg_.dec_heads));
    }
    x = nn::layer_norm(g, store(), "decoder.ln_f", x);
    VarId u = g.gather(nn::linear(g, store(), "decoder.up0", x), up_plan0_, "decoder.shuffle0");
    u = g.gelu(u);
    u = g.gather(nn::linear(g, store(), "decoder.up1", u), up_plan1_, "decoder.shuffle1");
    u = g.gelu(u);
    return nn::linear(g, store(), "decoder.head", u);
  }

  // ---- value-level operations ----

  template <class VS>
  Mat volume_to_matrix(const Volume<VS>& v) const {
    check_spatial(v.ext, "volume");
    if (v.ext.c != cfg_.channels)
      throw ShapeMismatchError("volume channels " + std::to_string(v.ext.c) +
                               " do not match config channels " + std::to_string(cfg_.channels));
    // canonical (C,X,Y,Z) layout is exactly column-major (spatial x channel)
    Mat m(v.ext.spatial(), v.ext.c);
    for (Eigen::Index c = 0; c < v.ext.c; ++c)
      m.col(c) = v.data.segment(c * v.ext.spatial(), v.ext.spatial()).template cast<S>();
    return m;
  }

  Mat mask_to_matrix(const Mask& m) const {
    check_spatial(m.ext, "mask");
    Mat out(m.ext.spatial(), 1);
    out.col(0) = m.labels.segment(0, m.ext.spatial()).template cast<S>();
    return out;
  }

  template <class VS>
  TokenEmbedding<S> encode_image(const Volume<VS>& v) const {
    Graph g;
    VarId id = encode_image_g(g, g.constant(volume_to_matrix(v), "volume"));
    return grid_embedding(g.val(id));
  }

  TokenEmbedding<S> encode_points(const std::vector<PromptPoint>& pts) const {
    Graph g;
    VarId id = encode_points_g(g, pts);
    return TokenEmbedding<S>{g.val(id), std::nullopt};
  }

  TokenEmbedding<S> encode_mask(const Mask& m) const {
    validate(m);
    Graph g;
    VarId id = encode_mask_g(g, g.constant(mask_to_matrix(m), "mask"));
    return grid_embedding(g.val(id));
  }

  std::pair<TokenEmbedding<S>, TokenEmbedding<S>> mfeb(const TokenEmbedding<S>& ei,
                                                       const TokenEmbedding<S>& em) const {
    Graph g;
    auto [a, b] = mfeb_g(g, g.constant(ei.values, "E_I"), g.constant(em.values, "E_M"));
    return {TokenEmbedding<S>{g.val(a), ei.grid_shape}, TokenEmbedding<S>{g.val(b), em.grid_shape}};
  }

  TokenEmbedding<S> mea_forward(const TokenEmbedding<S>& ei, const TokenEmbedding<S>& em) const {
    Graph g;
    VarId id = mea_forward_g(g, g.constant(ei.values, "E_I"), g.constant(em.values, "E_M"));
    const int bad = g.first_nonfinite();
    if (bad >= 0)
      throw NonFiniteActivationError("non-finite activation in adapter at node '" +
                                     g.label_at(bad) + "' (#" + std::to_string(bad) + ")");
    return TokenEmbedding<S>{g.val(id), ei.grid_shape};
  }

  // Returns the thresholded mask (logits > 0) and the full-resolution logits.
  std::pair<Mask, Volume<S>> decode_mask(const TokenEmbedding<S>& img,
                                         const TokenEmbedding<S>& prompt) const {
    if (!img.grid_shape)
      throw ShapeMismatchError("decode: image embedding is missing its token grid shape");
    Graph g;
    VarId id = decode_logits_g(g, g.constant(img.values, "E_I"), g.constant(prompt.values, "E_P"));
    return extract_mask(g.val(id));
  }

  std::pair<Mask, Volume<S>> extract_mask(const Mat& logits) const {
    const Eigen::Index n = Eigen::Index(cfg_.volume_size);
    Volume<S> lv;
    lv.ext = {1, n, n, n};
    lv.data = logits.col(0).array();
    Mask m = Mask::zeros(lv.ext);
    m.labels = (lv.data > S(0)).template cast<std::uint8_t>();
    return {std::move(m), std::move(lv)};
  }

  // ---- LoRA ----

  static std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> t;
    for (int i = 0; i < cfg.enc_depth; ++i)
      for (const char* proj : {".q", ".k", ".v", ".out"})
        t.push_back("image_encoder.block" + std::to_string(i) + ".attn" + proj);
    for (int i = 0; i < cfg.dec_depth; ++i)
      for (const char* attn : {".self_attn", ".cross_pi", ".cross_ip"})
        for (const char* proj : {".q", ".k", ".v", ".out"})
          t.push_back("decoder.block" + std::to_string(i) + attn + proj);
    return t;
  }

  // Adds rank-r adapters (A ~ N(0, 0.02^2), B = 0, scale alpha/r with
  // alpha = r) to the targeted linear maps and freezes their base weights.
  void apply_lora(int rank) { apply_lora(rank, default_lora_targets(cfg_)); }

  void apply_lora(int rank, const std::vector<std::string>& targets) {
    if (rank < 1) throw ConfigOutOfRangeError("lora rank must be >= 1");
    Rng rng(derive_seed(cfg_.seed, 1));
    for (const auto& t : targets) {
      if (!store_.contains(t + ".w"))
        throw UnknownTargetError("lora target '" + t + "' names no linear map");
      auto& w = store_.at(t + ".w");
      store_.add_normal(t + ".lora_a", w.value.rows(), rank, rng, nn::kInitStd);
      store_.add(t + ".lora_b", rank, w.value.cols());
      w.trainable = false;
      store_.at(t + ".b").trainable = false;
    }
    cfg_.lora_rank = rank;
  }

private:
  ModelConfig cfg_;
  mutable ParamStore<S> store_;
  std::shared_ptr<const ag::GatherPlan> patch_plan_;
  std::vector<std::shared_ptr<const ag::GatherPlan>> mask_plans_;
  std::shared_ptr<const ag::GatherPlan> up_plan0_, up_plan1_;

  ParamStore<S>& store() const { return store_; }

  void check_spatial(const Extents& e, const char* what) const {
    if (e.x != cfg_.volume_size || e.y != cfg_.volume_size || e.z != cfg_.volume_size)
      throw ShapeMismatchError(std::string(what) + " extents " + e.str() +
                               " do not match model volume size " +
                               std::to_string(cfg_.volume_size));
  }

  TokenEmbedding<S> grid_embedding(const Mat& values) const {
    const Eigen::Index gsz = cfg_.grid();
    return TokenEmbedding<S>{values, std::array<Eigen::Index, 3>{gsz, gsz, gsz}};
  }

  void build_params(Rng& rng) {
    const Eigen::Index D = cfg_.embed_dim;
    const Eigen::Index p3c =
        Eigen::Index(cfg_.patch_size) * cfg_.patch_size * cfg_.patch_size * cfg_.channels;
    nn::make_linear(store_, "image_encoder.patch_embed", p3c, D, rng);
    store_.add_normal("image_encoder.pos_emb", cfg_.n_tokens(), D, rng, nn::kInitStd);
    for (int i = 0; i < cfg_.enc_depth; ++i)
      nn::make_transformer_block(store_, "image_encoder.block" + std::to_string(i), D, rng);
    nn::make_layer_norm(store_, "image_encoder.ln_f", D);

    auto& fourier = store_.add("point_encoder.fourier", 3, D / 2);
    for (Eigen::Index c = 0; c < D / 2; ++c)
      for (Eigen::Index r = 0; r < 3; ++r) fourier.value(r, c) = S(rng.normal(0.0, 1.0));
    fourier.buffer = true;
    fourier.trainable = false;
    store_.add_normal("point_encoder.label_emb", 2, D, rng, nn::kInitStd);

    const auto widths = cfg_.mask_channel_widths();
    int cin = 1;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      nn::make_conv3d(store_, "mask_encoder.conv" + std::to_string(i), cin,
                      widths[i], 3, rng);
      cin = widths[i];
    }

    for (int i = 0; i < cfg_.dec_depth; ++i) {
      const std::string b = "decoder.block" + std::to_string(i);
      nn::make_layer_norm(store_, b + ".ln_self", D);
      nn::make_attention(store_, b + ".self_attn", D, rng);
      nn::make_layer_norm(store_, b + ".ln_piq", D);
      nn::make_layer_norm(store_, b + ".ln_pikv", D);
      nn::make_attention(store_, b + ".cross_pi", D, rng);
      nn::make_layer_norm(store_, b + ".ln_mlp", D);
      nn::make_mlp(store_, b + ".mlp", D, 4 * D, rng);
      nn::make_layer_norm(store_, b + ".ln_ipq", D);
      nn::make_layer_norm(store_, b + ".ln_ipkv", D);
      nn::make_attention(store_, b + ".cross_ip", D, rng);
    }
    nn::make_layer_norm(store_, "decoder.ln_f", D);
    const auto [s1, s2] = upscale_strides();
    const Eigen::Index c1 = up_c1();
    const Eigen::Index c2 = up_c2();
    nn::make_linear(store_, "decoder.up0", D, s1 * s1 * s1 * c1, rng);
    nn::make_linear(store_, "decoder.up1", c1, s2 * s2 * s2 * c2, rng);
    nn::make_linear(store_, "decoder.head", c2, 1, rng);

    mea::make_params(store_, "mea", D, rng);
  }

  std::pair<Eigen::Index, Eigen::Index> upscale_strides() const {
    return {std::max(cfg_.patch_size / 2, 1), 2};
  }
  Eigen::Index up_c1() const { return std::max(cfg_.embed_dim / 2, 4); }
  Eigen::Index up_c2() const { return std::max(cfg_.embed_dim / 4, 4); }

  void build_plans() {
    const Eigen::Index n = cfg_.volume_size;
    patch_plan_ = nn::im2col_plan(n, n, n, cfg_.channels, cfg_.patch_size, cfg_.patch_size, 0);
    const auto widths = cfg_.mask_channel_widths();
    Eigen::Index sz = n;
    int cin = 1;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      mask_plans_.push_back(nn::im2col_plan(sz, sz, sz, cin, 3, 2, 1));
      sz /= 2;
      cin = widths[i];
    }
    const auto [s1, s2] = upscale_strides();
    const Eigen::Index gsz = cfg_.grid();
    up_plan0_ = nn::shuffle_plan(gsz, gsz, gsz, s1, up_c1());
    up_plan1_ = nn::shuffle_plan(gsz * s1, gsz * s1, gsz * s1, s2, up_c2());
  }
};

}  // namespace msam
