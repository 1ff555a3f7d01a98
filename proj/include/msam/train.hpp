#pragma once
#include <chrono>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "msam/preprocess.hpp"
#include "msam/refinement.hpp"

namespace msam {

enum class Supervision { AllStages, LastStage };
enum class TuneMode { Full, Adapter };

// Training hyperparameters. Reference values: lr 8e-4, 200 epochs, batch 4,
// weight decay 0.1, 10 refinement stages at 128^3; desk defaults keep the
// same optimizer settings at 32^3 with 4 stages and 50 epochs.
struct TrainConfig {
  ModelConfig model;
  double lr = 8e-4;
  int epochs = 50;
  int batch_size = 4;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  int n_stages = 4;
  Supervision supervision = Supervision::AllStages;
  bool augment = false;
  std::string manifest;
  std::string checkpoint_dir;

  void validate() const {
    model.validate();
    if (lr < 0 || weight_decay < 0)
      throw ConfigOutOfRangeError("learning rate and weight decay must be >= 0");
    if (epochs < 1 || batch_size < 1) throw ConfigOutOfRangeError("epochs and batch must be >= 1");
    if (n_stages < 1) throw ConfigOutOfRangeError("n_stages must be >= 1");
  }

  void apply_paper_scale() {
    model.volume_size = 128;
    model.patch_size = 16;
    model.embed_dim = 384;
    epochs = 200;
    batch_size = 4;
    n_stages = 10;
    lr = 8e-4;
    weight_decay = 0.1;
  }

  static TrainConfig from_file(const std::string& path);
};

// ---- manifests and datasets ------------------------------------------------

struct ManifestEntry {
  std::string volume;
  std::string mask;
  double fg_fraction = 0.0;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open manifest " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    if (!(ss >> e.volume >> e.mask >> e.fg_fraction))
      throw DataError("malformed manifest line: " + line);
    e.volume = (dir / e.volume).string();
    e.mask = (dir / e.mask).string();
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream os;
  os << "# volume mask fg_fraction\n";
  for (const auto& e : entries) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.8f", e.fg_fraction);
    os << e.volume << " " << e.mask << " " << buf << "\n";
  }
  const std::string text = os.str();
  io_detail::write_file(path, text.data(), text.size());
}

template <class S>
struct Sample {
  Volume<S> vol;
  Mask mask;
};

// Reads every manifest pair, standardizes to the model cube and applies
// z-score normalization.
template <class S>
std::vector<Sample<S>> load_dataset(const std::string& manifest_path, const ModelConfig& mc) {
  const auto entries = read_manifest(manifest_path);
  if (entries.empty()) throw DataError("manifest " + manifest_path + " lists no samples");
  const std::array<Eigen::Index, 3> target{mc.volume_size, mc.volume_size, mc.volume_size};
  std::vector<Sample<S>> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    Volume<float> v = read_volume(e.volume);
    Mask m = read_mask(e.mask);
    if (v.ext != m.ext)
      throw DataError("volume/mask extents disagree for " + e.volume + " (" + v.ext.str() +
                      " vs " + m.ext.str() + ")");
    Sample<S> s;
    s.vol = zscore_normalize(crop_or_pad(v, target)).template cast<S>();
    s.mask = crop_or_pad(m, target);
    out.push_back(std::move(s));
  }
  return out;
}

// ---- optimizer and freeze policy --------------------------------------------

// Adam with decoupled weight decay; steps only trainable, non-buffer tensors.
template <class S>
class AdamW {
public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<S>& store) {
    ++t_;
    const S bc1 = S(1) - S(std::pow(b1_, t_));
    const S bc2 = S(1) - S(std::pow(b2_, t_));
    store.for_each([&](ag::Tensor<S>& p) {
      if (!p.trainable || p.buffer) return;
      if (p.grad.size() == 0) p.zero_grad();
      auto& st = state_[p.name];
      if (st.m.size() == 0) {
        st.m = MatX<S>::Zero(p.value.rows(), p.value.cols());
        st.v = MatX<S>::Zero(p.value.rows(), p.value.cols());
      }
      st.m = S(b1_) * st.m + S(1 - b1_) * p.grad;
      st.v.array() = S(b2_) * st.v.array() + S(1 - b2_) * p.grad.array().square();
      const auto mhat = st.m.array() / bc1;
      const auto vhat = st.v.array() / bc2;
      p.value.array() -= S(lr_) * (mhat / (vhat.sqrt() + S(eps_)) + S(wd_) * p.value.array());
    });
  }

private:
  struct State {
    MatX<S> m, v;
  };
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::unordered_map<std::string, State> state_;
};

// Adapter mode freezes the image/prompt/mask encoders; the adapter, the mask
// decoder and any LoRA tensors stay tunable.
template <class S>
void set_tune_mode(Model<S>& model, TuneMode mode) {
  model.params().for_each([&](ag::Tensor<S>& t) {
    if (t.buffer) {
      t.trainable = false;
      return;
    }
    if (mode == TuneMode::Full) {
      t.trainable = true;
      return;
    }
    const std::string& n = t.name;
    t.trainable = n.rfind("mea.", 0) == 0 || n.rfind("decoder.", 0) == 0 ||
                  n.find(".lora_") != std::string::npos;
  });
}

// ---- reports -----------------------------------------------------------------

struct RunReport {
  std::vector<double> epoch_loss;
  std::vector<double> stage_dsc;
  std::vector<double> stage_iou;
  std::int64_t total_params = 0;
  std::int64_t tunable_params = 0;
  double tunable_fraction = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;

  double final_dsc() const { return stage_dsc.empty() ? 0.0 : stage_dsc.back(); }
  double first_dsc() const { return stage_dsc.empty() ? 0.0 : stage_dsc.front(); }

  void write(std::ostream& os) const {
    os << "seed: " << seed << "\n";
    os << "total_params: " << total_params << "\n";
    os << "tunable_params: " << tunable_params << "\n";
    os << "tunable_fraction: " << tunable_fraction << "\n";
    os << "wall_seconds: " << wall_seconds << "\n";
    auto list = [&os](const char* key, const std::vector<double>& v) {
      os << key << ":";
      for (double x : v) os << " " << x;
      os << "\n";
    };
    list("epoch_loss", epoch_loss);
    list("stage_dsc", stage_dsc);
    list("stage_iou", stage_iou);
  }
};

// ---- model config sidecar ------------------------------------------------------

inline void write_model_config(const std::string& path, const ModelConfig& mc) {
  std::ostringstream os;
  os << "volume_size: " << mc.volume_size << "\n"
     << "patch_size: " << mc.patch_size << "\n"
     << "channels: " << mc.channels << "\n"
     << "embed_dim: " << mc.embed_dim << "\n"
     << "enc_depth: " << mc.enc_depth << "\n"
     << "enc_heads: " << mc.enc_heads << "\n"
     << "dec_depth: " << mc.dec_depth << "\n"
     << "dec_heads: " << mc.dec_heads << "\n"
     << "lora_rank: " << mc.lora_rank << "\n"
     << "seed: " << mc.seed << "\n";
  const std::string text = os.str();
  io_detail::write_file(path, text.data(), text.size());
}

inline ModelConfig read_model_config(const std::string& path) {
  auto kv = io_detail::parse_header(path);
  ModelConfig mc;
  auto geti = [&kv](const char* key, int& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stoi(it->second);
  };
  geti("volume_size", mc.volume_size);
  geti("patch_size", mc.patch_size);
  geti("channels", mc.channels);
  geti("embed_dim", mc.embed_dim);
  geti("enc_depth", mc.enc_depth);
  geti("enc_heads", mc.enc_heads);
  geti("dec_depth", mc.dec_depth);
  geti("dec_heads", mc.dec_heads);
  geti("lora_rank", mc.lora_rank);
  if (auto it = kv.find("seed"); it != kv.end()) mc.seed = std::stoull(it->second);
  mc.validate();
  return mc;
}

// ---- evaluation -------------------------------------------------------------

// Runs GT-guided refinement on every sample (the same sampling protocol is
// used for training and inference) and reports per-stage mean DSC/IoU.
template <class S>
RunReport evaluate_model(const Model<S>& model, const std::vector<Sample<S>>& data, int n_stages,
                         std::uint64_t seed,
                         std::vector<std::vector<RefinementState<S>>>* traces = nullptr) {
  if (data.empty()) throw DataError("evaluation dataset is empty");
  RunReport rep;
  rep.seed = seed;
  rep.stage_dsc.assign(std::size_t(n_stages), 0.0);
  rep.stage_iou.assign(std::size_t(n_stages), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(derive_seed(seed, 1000 + i));
    auto [final_mask, trace] = refine(model, data[i].vol, &data[i].mask, n_stages, rng);
    (void)final_mask;
    for (int t = 0; t < n_stages; ++t) {
      rep.stage_dsc[std::size_t(t)] += trace[std::size_t(t)].dsc_score.value();
      rep.stage_iou[std::size_t(t)] += trace[std::size_t(t)].iou_score.value();
    }
    if (traces) traces->push_back(std::move(trace));
  }
  for (auto& v : rep.stage_dsc) v /= double(data.size());
  for (auto& v : rep.stage_iou) v /= double(data.size());
  const auto counts = count_parameters(model.params());
  rep.total_params = counts.total;
  rep.tunable_params = counts.tunable;
  rep.tunable_fraction = counts.fraction();
  return rep;
}

template <class S = double>
RunReport evaluate_checkpoint(const std::string& ckpt_base, const std::string& manifest,
                              int n_stages, std::uint64_t seed,
                              std::vector<std::vector<RefinementState<S>>>* traces = nullptr) {
  ModelConfig mc = read_model_config(ckpt_base + ".config");
  Model<S> model(mc);
  load_checkpoint(model.params(), ckpt_base);
  auto data = load_dataset<S>(manifest, mc);
  return evaluate_model<S>(model, data, n_stages, seed, traces);
}

// ---- training -------------------------------------------------------------------

template <class S>
struct TrainResult {
  RunReport report;
  std::unique_ptr<Model<S>> model;
  std::string checkpoint_base;  // empty when no checkpoint_dir configured
};

// Builds the per-sample graph (refinement forward plus per-stage DiceCE),
// returns the scalar loss node. Stage losses are averaged under all-stage
// supervision, or taken from the final stage only.
template <class S>
ag::VarId attach_loss(ag::Graph<S>& g, const RefineRun<S>& run, const Mask& gt,
                      Supervision mode) {
  MatX<S> onehot = one_hot_from_mask<S>(gt);
  ag::VarId oh = g.constant(std::move(onehot), "onehot_gt");
  const int n = int(run.stage_logits.size());
  const int first = mode == Supervision::LastStage ? n - 1 : 0;
  ag::VarId total{};
  for (int t = first; t < n; ++t) {
    ag::VarId l = dice_ce_loss_g(g, foreground_softmax_g(g, run.stage_logits[std::size_t(t)]), oh);
    total = t == first ? l : g.add(total, l);
  }
  return g.affine(total, S(1) / S(n - first), S(0));
}

template <class S = double>
TrainResult<S> train(const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto data = load_dataset<S>(cfg.manifest, cfg.model);

  TrainResult<S> result;
  result.model = std::make_unique<Model<S>>(cfg.model);
  Model<S>& model = *result.model;
  set_tune_mode(model, cfg.model.lora_rank > 0 ? TuneMode::Adapter : TuneMode::Full);

  AdamW<S> opt(cfg.lr, cfg.weight_decay);
  Rng rng_order(derive_seed(cfg.seed, 2));
  Rng rng_points(derive_seed(cfg.seed, 3));
  Rng rng_aug(derive_seed(cfg.seed, 4));

  RunReport& rep = result.report;
  rep.seed = cfg.seed;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(rng_order.uniform_int(Eigen::Index(i)))]);

    double epoch_sum = 0.0;
    std::size_t n_samples = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(cfg.batch_size)) {
      model.params().zero_grads();
      const std::size_t b1 = std::min(order.size(), b0 + std::size_t(cfg.batch_size));
      for (std::size_t k = b0; k < b1; ++k) {
        const Sample<S>& s = data[order[k]];
        Volume<S> vol = s.vol;
        Mask gt = s.mask;
        if (cfg.augment) std::tie(vol, gt) = random_flip(vol, gt, rng_aug);

        ag::Graph<S> g;
        auto run = run_refinement(model, g, vol, &gt, cfg.n_stages, rng_points);
        ag::VarId loss = attach_loss(g, run, gt, cfg.supervision);
        const double value = double(g.val(loss)(0, 0));
        if (!std::isfinite(value)) {
          std::ostringstream os;
          os << "training loss diverged at epoch " << epoch << "; stage DSC:";
          for (const auto& st : run.trace)
            os << " " << (st.dsc_score ? *st.dsc_score : -1.0);
          throw DivergenceError(os.str());
        }
        g.backward(loss);
        epoch_sum += value;
        ++n_samples;
      }
      const S inv = S(1) / S(b1 - b0);
      model.params().for_each([&](ag::Tensor<S>& t) {
        if (t.trainable && t.grad.size() != 0) t.grad *= inv;
      });
      opt.step(model.params());
    }
    rep.epoch_loss.push_back(epoch_sum / double(n_samples));
    if (log)
      (*log) << "epoch " << epoch << " loss " << rep.epoch_loss.back() << "\n";
  }

  RunReport eval = evaluate_model<S>(model, data, cfg.n_stages, derive_seed(cfg.seed, 5));
  rep.stage_dsc = eval.stage_dsc;
  rep.stage_iou = eval.stage_iou;
  const auto counts = count_parameters(model.params());
  rep.total_params = counts.total;
  rep.tunable_params = counts.tunable;
  rep.tunable_fraction = counts.fraction();
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.checkpoint_base = cfg.checkpoint_dir + "/checkpoint";
    save_checkpoint(model.params(), result.checkpoint_base);
    write_model_config(result.checkpoint_base + ".config", model.config());
  }
  return result;
}

// ---- config file ----------------------------------------------------------------

inline TrainConfig TrainConfig::from_file(const std::string& path) {
  auto kv = io_detail::parse_header(path);
  TrainConfig cfg;
  for (const auto& [key, value] : kv) {
    try {
      if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "seed") {
        cfg.seed = std::stoull(value);
        cfg.model.seed = cfg.seed;
      } else if (key == "n_stages") cfg.n_stages = std::stoi(value);
      else if (key == "supervision") {
        if (value == "all") cfg.supervision = Supervision::AllStages;
        else if (value == "last") cfg.supervision = Supervision::LastStage;
        else throw ConfigOutOfRangeError("supervision must be 'all' or 'last'");
      } else if (key == "augment") cfg.augment = std::stoi(value) != 0;
      else if (key == "manifest") cfg.manifest = value;
      else if (key == "checkpoint_dir") cfg.checkpoint_dir = value;
      else if (key == "volume_size") cfg.model.volume_size = std::stoi(value);
      else if (key == "patch_size") cfg.model.patch_size = std::stoi(value);
      else if (key == "channels") cfg.model.channels = std::stoi(value);
      else if (key == "embed_dim") cfg.model.embed_dim = std::stoi(value);
      else if (key == "enc_depth") cfg.model.enc_depth = std::stoi(value);
      else if (key == "enc_heads") cfg.model.enc_heads = std::stoi(value);
      else if (key == "dec_depth") cfg.model.dec_depth = std::stoi(value);
      else if (key == "dec_heads") cfg.model.dec_heads = std::stoi(value);
      else if (key == "lora_rank") cfg.model.lora_rank = std::stoi(value);
      else throw ConfigOutOfRangeError("unknown config key '" + key + "'");
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigOutOfRangeError("bad value for config key '" + key + "': " + value);
    }
  }
  return cfg;
}

}  // namespace msam
