// Command-line front end. Exit codes: 0 ok, 1 check failure, 2 usage or
// input error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "cafpn/error.hpp"
#include "cafpn/gradcheck.hpp"
#include "cafpn/introspection.hpp"
#include "cafpn/ops.hpp"
#include "cafpn/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cafpn;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void write_config(const fs::path& out, const std::string& command, const json& settings) {
  json doc{{"command", command}, {"settings", settings}};
  write_text(out / "config.json", doc.dump(2) + "\n");
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw IoError(std::string(what) + " directory not found: " + p.string());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string model = "fpn-srr-ca";
  int depth = 20;
  std::string preset = "smoke";
  std::string data, out, config;
  std::string upsample = "bilinear";
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  int epochs = 0;
  std::int64_t batch_size = 0;
  double lr = 0, weight_decay = 0, momentum = 0, mixup_alpha = 0;
  std::string regime;
  bool allow_train_only = false;
};

int run_train(const TrainArgs& a, const CLI::App& cmd) {
  auto given = [&](const char* flag) { return cmd.count(flag) > 0; };
  json file;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    std::ifstream in(a.config);
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError(a.config + ": " + e.what());
    }
    if (file.contains("settings")) file = file["settings"];
  }
  // Precedence: flag, then config file, then the built-in default / preset.
  auto pick = [&](const char* flag, const char* key, auto flag_value, auto fallback) {
    using T = decltype(fallback);
    if (given(flag)) return static_cast<T>(flag_value);
    if (file.contains(key)) return file[key].template get<T>();
    return fallback;
  };

  const auto preset_name = pick("--preset", "preset", a.preset, std::string("smoke"));
  train::TrainConfig cfg;
  try {
    cfg = train::preset(preset_name);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto variant = pick("--model", "model", a.model, std::string("fpn-srr-ca"));
  const auto depth = pick("--depth", "depth", a.depth, 20);
  const auto upsample = pick("--upsample", "upsample", a.upsample, std::string("bilinear"));
  const auto data_dir = pick("--data", "data", a.data, std::string());
  cfg.seed = pick("--seed", "seed", a.seed, std::uint64_t{0});
  const auto split_seed = pick("--split-seed", "split_seed", a.split_seed, std::uint64_t{0});
  cfg.epochs = pick("--epochs", "epochs", a.epochs, cfg.epochs);
  cfg.batch_size = pick("--batch-size", "batch_size", a.batch_size, cfg.batch_size);
  cfg.base_lr = pick("--lr", "lr", a.lr, cfg.base_lr);
  cfg.weight_decay = pick("--weight-decay", "weight_decay", a.weight_decay, cfg.weight_decay);
  cfg.momentum = pick("--momentum", "momentum", a.momentum, cfg.momentum);
  cfg.mixup_alpha = pick("--mixup-alpha", "mixup_alpha", a.mixup_alpha, cfg.mixup_alpha);
  const auto regime = pick("--regime", "regime", a.regime, data::regime_name(cfg.regime));
  const bool train_only = pick("--allow-train-only", "allow_train_only", a.allow_train_only, false);
  if (given("--epochs") || file.contains("epochs")) {
    // A shortened run keeps only the milestones that still fall inside it.
    std::erase_if(cfg.milestones, [&](const train::Milestone& m) { return m.epoch >= cfg.epochs; });
  }
  if (data_dir.empty()) throw UsageError("--data is required");

  ModelSpec spec;
  try {
    cfg.regime = data::parse_regime(regime);
    cfg.validate();
    spec = ModelSpec::standard(variant, depth, 2, parse_upsampling(upsample));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (spec.backbone.family != cfg.family)
    throw UsageError("depth " + std::to_string(depth) + " takes " + std::to_string(spec.backbone.input_size) +
                     "px inputs but preset " + preset_name + " trains at " + std::to_string(cfg.crop_size()) + "px");

  require_dir(data_dir, "data");
  auto manifest = data::ingest(data_dir, {split_seed, train_only});
  spec.num_classes = manifest.num_classes();
  const fs::path out = a.out;
  fs::create_directories(out);
  json settings{{"model", variant},        {"depth", depth},
                {"preset", preset_name},   {"data", data_dir},
                {"upsample", upsample},    {"seed", cfg.seed},
                {"split_seed", split_seed}, {"epochs", cfg.epochs},
                {"batch_size", cfg.batch_size}, {"lr", cfg.base_lr},
                {"weight_decay", cfg.weight_decay}, {"momentum", cfg.momentum},
                {"regime", data::regime_name(cfg.regime)}, {"mixup_alpha", cfg.mixup_alpha},
                {"allow_train_only", train_only}, {"threads", ops::num_threads()},
                {"classes", manifest.num_classes()}};
  json milestones = json::array();
  for (const auto& m : cfg.milestones) milestones.push_back({{"epoch", m.epoch}, {"divisor", m.divisor}});
  settings["milestones"] = milestones;
  write_config(out, "train", settings);
  data::write_manifest_csv(manifest, out / "manifest.csv");

  auto ds = data::Dataset::load(std::move(manifest));
  const auto norm = data::compute_normalization(ds.images_of(data::Split::Train));
  Model model(spec, cfg.seed);
  std::cout << "training " << variant << "-" << depth << " on " << ds.manifest.num_classes() << " classes, "
            << ds.manifest.indices(data::Split::Train).size() << " train / "
            << ds.manifest.indices(data::Split::Val).size() << " val images, "
            << model.count_parameters() << " parameters\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto record = train::train(model, ds, cfg, norm, [&](const train::EpochRecord& e) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << e.epoch << " lr " << e.lr << " loss " << std::setprecision(5) << e.train_loss
              << " train_acc " << e.train_acc;
    if (e.val_acc) std::cout << " val_acc " << *e.val_acc;
    std::cout << " (" << std::fixed << std::setprecision(1) << secs << "s)" << std::defaultfloat << std::endl;
  });
  record.checkpoint = (out / "model.tar0").string();
  model.save(record.checkpoint, train::run_meta(norm, split_seed));
  write_text(out / "run.csv", record.to_csv());
  std::cout << "wrote " << (out / "run.csv").string() << " and " << record.checkpoint << "\n";
  return kOk;
}

// ---- eval ---------------------------------------------------------------

int run_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split, bool train_only) {
  require_file(ckpt, "checkpoint");
  require_dir(data_dir, "data");
  if (split != "train" && split != "val") throw UsageError("--split must be train or val");
  auto trained = train::load_trained(ckpt);
  auto ds = data::Dataset::load(data::ingest(data_dir, {trained.split_seed, train_only}));
  const double acc = train::evaluate(trained.model, ds, split == "val" ? data::Split::Val : data::Split::Train,
                                     trained.norm);
  std::cout << std::setprecision(17) << "top1 " << acc << "\n";
  return kOk;
}

// ---- crop-tiny / stats / synth -----------------------------------------

int run_crop_tiny(const std::string& src, const std::string& dst, std::int64_t tile, const data::TileFilter& f) {
  require_dir(src, "source");
  if (tile < 1) throw UsageError("--tile must be positive");
  auto r = data::generate_tiny(src, dst, tile, f);
  std::cout << "images " << r.images << "\nskipped_images " << r.skipped_images << "\nraw_tiles " << r.raw_tiles
            << "\nblank " << r.blank << "\nbackground " << r.background << "\nkept " << r.kept << "\n";
  return kOk;
}

int run_stats(const std::string& data_dir, const std::string& categories, const std::string& out,
              std::uint64_t split_seed, bool train_only) {
  require_dir(data_dir, "data");
  std::optional<fs::path> map;
  if (!categories.empty()) {
    require_file(categories, "category map");
    map = categories;
  }
  const auto csv = data::stats_csv(data::ingest(data_dir, {split_seed, train_only}), map);
  if (out.empty()) std::cout << csv;
  else write_text(out, csv);
  return kOk;
}

// ---- inspect ------------------------------------------------------------

int run_inspect(const std::string& ckpt, std::int64_t images, const std::string& out, const std::string& data_dir,
                std::uint64_t seed) {
  require_file(ckpt, "checkpoint");
  if (images < 1) throw UsageError("--images must be positive");
  auto trained = train::load_trained(ckpt);
  const auto size = trained.model.spec().backbone.input_size;
  Tensor x;
  std::vector<std::string> ids;
  if (!data_dir.empty()) {
    require_dir(data_dir, "data");
    auto ds = data::Dataset::load(data::ingest(data_dir, {trained.split_seed, true}));
    auto idx = ds.manifest.indices(data::Split::Val);
    if (idx.empty()) idx = ds.manifest.indices(data::Split::Train);
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(images)));
    std::mt19937_64 unused(0);
    x = data::make_batch(ds, idx, size, false, trained.norm, unused).inputs;
    for (auto i : idx) ids.push_back(ds.manifest.entries[i].path);
  } else {
    std::mt19937_64 rng(seed);
    x = Tensor::randn({images, 3, size, size}, rng);
    for (std::int64_t n = 0; n < images; ++n) ids.push_back("random" + std::to_string(n));
  }
  autograd::NoGradGuard no_grad;
  auto trace = introspect::trace_forward(trained.model, x, ids);
  fs::create_directories(out);
  auto report = introspect::export_trace(trace, out);
  write_config(out, "inspect",
               {{"ckpt", ckpt}, {"images", x.dim(0)}, {"data", data_dir}, {"seed", seed}, {"inputs", ids}});
  std::cout << "traced " << x.dim(0) << " images, " << trace.levels.size() << " merges, " << report.heatmaps
            << " heatmaps under " << out << "\n";
  return kOk;
}

// ---- gradcheck / params -------------------------------------------------

int run_gradcheck(const std::string& module, std::uint64_t seed) {
  gradcheck::Options opt;
  opt.seed = seed;
  std::vector<gradcheck::Result> results;
  if (module == "all") {
    results = gradcheck::run_suite(opt);
  } else if (module == "ops") {
    results = gradcheck::check_ops(opt);
  } else if (module == "fusion") {
    results = gradcheck::check_fusion_modules(opt);
  } else if (module == "model") {
    for (auto f : {Fusion::Plain, Fusion::CompetitiveAttention, Fusion::SpatialRecalibration, Fusion::SrrCa})
      results.push_back(gradcheck::check_model(f, opt));
  } else {
    for (auto& r : gradcheck::run_suite(opt))
      if (r.name == module || r.name == "model_" + module) results.push_back(std::move(r));
    if (results.empty()) throw UsageError("unknown gradcheck module '" + module + "'");
  }
  const gradcheck::Result* worst = nullptr;
  for (const auto& r : results) {
    std::cout << std::left << std::setw(26) << r.name << std::right << std::setw(8) << r.entries << "  "
              << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "  "
              << (r.passed ? "ok" : "FAIL") << "\n";
    if (!worst || r.max_rel_error > worst->max_rel_error) worst = &r;
  }
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  if (!ok) {
    std::cout << "worst offender: " << worst->name << " (max relative error " << worst->max_rel_error
              << ", tolerance " << opt.tolerance << ")\n";
    return kCheckFailed;
  }
  std::cout << results.size() << " checks passed\n";
  return kOk;
}

int run_params(const std::string& variant, int depth, std::int64_t classes, const std::string& upsample) {
  ModelSpec spec;
  try {
    spec = ModelSpec::standard(variant, depth, classes, parse_upsampling(upsample));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  Model model(spec, 0);
  std::int64_t backbone = 0, pyramid = 0, head = 0;
  for (const auto& e : model.registry().trainable()) {
    auto& bucket = e.name.starts_with("backbone/") ? backbone : e.name.starts_with("pyramid/") ? pyramid : head;
    bucket += e.tensor.numel();
  }
  std::cout << "model " << variant << "-" << depth << " classes " << classes << " upsample " << upsample << "\n"
            << "backbone " << backbone << "\npyramid " << pyramid << "\nhead " << head << "\ntotal "
            << model.count_parameters() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-fused feature pyramid classifier toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for batch-parallel kernels")->check(CLI::PositiveNumber);
  std::function<int()> run;

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write run.csv, model.tar0 and config.json");
  train_cmd->add_option("--model", ta.model, "fpn | fpn-ca | fpn-srr | fpn-srr-ca");
  train_cmd->add_option("--depth", ta.depth, "18 | 34 | 20 | 56");
  train_cmd->add_option("--preset", ta.preset, "cnh_aug | cnh_mixup | cnh_noaug | tcnh_aug | tcnh_mixup | tcnh_noaug | smoke | overfit");
  train_cmd->add_option("--data", ta.data, "Dataset root (one directory per class)");
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--config", ta.config, "JSON settings; flags override it, it overrides the preset");
  train_cmd->add_option("--upsample", ta.upsample, "bilinear | nearest | deconv");
  train_cmd->add_option("--seed", ta.seed, "Initialisation and shuffling seed");
  train_cmd->add_option("--split-seed", ta.split_seed, "Train/val split seed");
  train_cmd->add_option("--epochs", ta.epochs);
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--lr", ta.lr, "Base learning rate");
  train_cmd->add_option("--weight-decay", ta.weight_decay);
  train_cmd->add_option("--momentum", ta.momentum);
  train_cmd->add_option("--regime", ta.regime, "none | standard | mixup");
  train_cmd->add_option("--mixup-alpha", ta.mixup_alpha);
  train_cmd->add_flag("--allow-train-only", ta.allow_train_only, "Keep single-image classes in train");
  train_cmd->callback([&] { run = [&] { return run_train(ta, *train_cmd); }; });

  std::string ckpt, data_dir, split = "val", src, dst, categories, out, module = "all", variant = "fpn",
              upsample = "bilinear";
  std::int64_t tile = 32, images = 4, classes = 98;
  int depth = 18;
  std::uint64_t seed = 0, split_seed = 0;
  bool train_only = false;
  data::TileFilter filter;

  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt)->required();
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("--split", split, "val | train");
  eval_cmd->add_flag("--allow-train-only", train_only);
  eval_cmd->callback([&] { run = [&] { return run_eval(ckpt, data_dir, split, train_only); }; });

  auto* crop_cmd = app.add_subcommand("crop-tiny", "Cut a dataset into non-overlapping tiles");
  crop_cmd->add_option("--src", src)->required();
  crop_cmd->add_option("--dst", dst)->required();
  crop_cmd->add_option("--tile", tile);
  crop_cmd->add_option("--min-variance", filter.min_variance, "Blank-tile luminance variance threshold");
  crop_cmd->add_option("--border-delta", filter.border_delta, "Background-tile distance to the border mean");
  crop_cmd->callback([&] { run = [&] { return run_crop_tiny(src, dst, tile, filter); }; });

  auto* stats_cmd = app.add_subcommand("stats", "Per-class train/val counts as CSV");
  stats_cmd->add_option("--data", data_dir)->required();
  stats_cmd->add_option("--categories", categories, "CSV class,category");
  stats_cmd->add_option("--out", out, "Write the CSV here instead of stdout");
  stats_cmd->add_option("--split-seed", split_seed);
  stats_cmd->add_flag("--allow-train-only", train_only);
  stats_cmd->callback([&] { run = [&] { return run_stats(data_dir, categories, out, split_seed, train_only); }; });

  auto* inspect_cmd = app.add_subcommand("inspect", "Trace attention gates and export summaries and heatmaps");
  inspect_cmd->add_option("--ckpt", ckpt)->required();
  inspect_cmd->add_option("--images", images);
  inspect_cmd->add_option("--out", out)->required();
  inspect_cmd->add_option("--data", data_dir, "Trace dataset images instead of random inputs");
  inspect_cmd->add_option("--seed", seed);
  inspect_cmd->callback([&] { run = [&] { return run_inspect(ckpt, images, out, data_dir, seed); }; });

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_cmd->add_option("--module", module, "all | ops | fusion | model | a single check name");
  grad_cmd->add_option("--seed", seed);
  grad_cmd->callback([&] { run = [&] { return run_gradcheck(module, seed); }; });

  auto* params_cmd = app.add_subcommand("params", "Trainable parameter counts");
  params_cmd->add_option("--model", variant);
  params_cmd->add_option("--depth", depth);
  params_cmd->add_option("--classes", classes);
  params_cmd->add_option("--upsample", upsample);
  params_cmd->callback([&] { run = [&] { return run_params(variant, depth, classes, upsample); }; });

  data::SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic texture dataset");
  synth_cmd->add_option("--out", out)->required();
  synth_cmd->add_option("--classes", synth.classes);
  synth_cmd->add_option("--per-class", synth.per_class);
  synth_cmd->add_option("--size", synth.size);
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->callback([&] {
    run = [&] {
      data::write_synthetic_dataset(out, synth);
      std::cout << "wrote " << synth.classes * synth.per_class << " images under " << out << "\n";
      return kOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  ops::set_num_threads(threads);
  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kCheckFailed;
  }
}
