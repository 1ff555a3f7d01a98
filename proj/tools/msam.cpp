// msam: phantom generation, training, evaluation and parameter accounting.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "msam/phantom.hpp"
#include "msam/train.hpp"

namespace fs = std::filesystem;
using Scalar = double;

namespace {

void run_gen_phantoms(int count, int size, std::uint64_t seed, const std::string& out_dir,
                      int lesions, double radius_min, double radius_max) {
  fs::create_directories(out_dir);
  msam::Rng rng(seed);
  std::vector<msam::ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    msam::PhantomConfig pc;
    pc.ext = {1, size, size, size};
    pc.n_lesions = lesions;
    pc.radius_min = radius_min > 0 ? radius_min : double(size) / 10.0;
    pc.radius_max = radius_max > 0 ? radius_max : double(size) / 5.0;
    auto [vol, mask] = msam::generate_phantom<float>(pc, rng);
    char vn[32], mn[32];
    std::snprintf(vn, sizeof vn, "vol_%03d.vol", i);
    std::snprintf(mn, sizeof mn, "mask_%03d.vol", i);
    msam::write_volume(vol, out_dir + "/" + vn);
    msam::write_mask(mask, out_dir + "/" + mn);
    const double frac = double(mask.foreground()) / double(mask.ext.total());
    entries.push_back({vn, mn, frac});
    std::cout << vn << " " << mn << " fg_fraction=" << frac << "\n";
  }
  msam::write_manifest(out_dir + "/manifest.txt", entries);
  std::cout << "wrote " << count << " phantom pairs to " << out_dir << "\n";
}

void run_train(const std::string& config_path, bool paper_scale) {
  msam::TrainConfig cfg = msam::TrainConfig::from_file(config_path);
  if (paper_scale) cfg.apply_paper_scale();
  auto result = msam::train<Scalar>(cfg, &std::cout);
  result.report.write(std::cout);
  if (!result.checkpoint_base.empty())
    std::cout << "checkpoint: " << result.checkpoint_base << "\n";
}

void run_eval(const std::string& checkpoint, const std::string& data, int stages,
              std::uint64_t seed, const std::string& trace_path) {
  std::string manifest = data;
  if (fs::is_directory(data)) manifest = (fs::path(data) / "manifest.txt").string();
  std::vector<std::vector<msam::RefinementState<Scalar>>> traces;
  auto rep = msam::evaluate_checkpoint<Scalar>(checkpoint, manifest, stages, seed,
                                               trace_path.empty() ? nullptr : &traces);
  rep.write(std::cout);
  if (!trace_path.empty()) {
    std::ofstream os(trace_path);
    if (!os) throw msam::UnwritablePathError("cannot open trace file " + trace_path);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      os << "# volume " << i << "\n";
      msam::write_trace(os, traces[i]);
    }
    std::cout << "trace: " << trace_path << "\n";
  }
}

void run_count_params(const std::string& config_path) {
  msam::TrainConfig cfg = msam::TrainConfig::from_file(config_path);
  msam::Model<Scalar> model(cfg.model);
  msam::set_tune_mode(model, cfg.model.lora_rank > 0 ? msam::TuneMode::Adapter
                                                     : msam::TuneMode::Full);
  const auto counts = msam::count_parameters(model.params());
  std::cout << "total_params: " << counts.total << "\n";
  std::cout << "tunable_params: " << counts.tunable << "\n";
  std::cout << "tunable_fraction: " << counts.fraction() << "\n";
  std::cout << "tunable_percent: " << 100.0 * counts.fraction() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D tumor lesion segmentation with mask-enhanced iterative refinement"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-phantoms", "Generate synthetic phantom volume/mask pairs");
  int count = 4, size = 32, lesions = 2;
  std::uint64_t gen_seed = 0;
  std::string out_dir = "phantoms";
  double radius_min = 0.0, radius_max = 0.0;
  gen->add_option("--count", count, "number of phantom pairs")->required();
  gen->add_option("--size", size, "cube edge length in voxels")->required();
  gen->add_option("--seed", gen_seed, "random seed")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--lesions", lesions, "lesions per phantom (1..4)");
  gen->add_option("--radius-min", radius_min, "minimum lesion radius (voxels)");
  gen->add_option("--radius-max", radius_max, "maximum lesion radius (voxels)");

  auto* tr = app.add_subcommand("train", "Train on a phantom manifest");
  std::string train_config;
  bool paper_scale = false;
  tr->add_option("--config", train_config, "key:value config file")->required();
  tr->add_flag("--paper-scale", paper_scale,
               "use the full-resolution regime (128^3, 10 stages, 200 epochs)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ckpt, data, trace_path;
  int stages = 4;
  std::uint64_t eval_seed = 0;
  ev->add_option("--checkpoint", ckpt, "checkpoint base path (without .manifest/.bin)")
      ->required();
  ev->add_option("--data", data, "manifest file or directory containing manifest.txt")
      ->required();
  ev->add_option("--stages", stages, "refinement stages");
  ev->add_option("--seed", eval_seed, "point-sampling seed");
  ev->add_option("--trace", trace_path, "write per-stage refinement traces to this file");

  auto* cp = app.add_subcommand("count-params", "Report total/tunable parameter counts");
  std::string cp_config;
  cp->add_option("--config", cp_config, "key:value config file")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) run_gen_phantoms(count, size, gen_seed, out_dir, lesions, radius_min,
                                        radius_max);
    if (tr->parsed()) run_train(train_config, paper_scale);
    if (ev->parsed()) run_eval(ckpt, data, stages, eval_seed, trace_path);
    if (cp->parsed()) run_count_params(cp_config);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const msam::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(msam::ErrorCode::Generic);
  }
  return 0;
}
