#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <utility>
#include <vector>

#include "gfrrn/data.hpp"
#include "gfrrn/error.hpp"
#include "gfrrn/frequency.hpp"
#include "gfrrn/labels.hpp"
#include "gfrrn/metrics.hpp"
#include "gfrrn/training.hpp"

namespace gfrrn::cli {

namespace {

namespace fs = std::filesystem;

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

/// A directory holding manifest.csv, or the manifest file itself.
data::Manifest manifest_at(const fs::path& p) {
  return data::read_manifest(fs::is_directory(p) ? p / "manifest.csv" : p);
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  fs::path out;
  std::size_t count = 4, size = 64;
  std::uint64_t seed = 0;
};

void synth(const SynthArgs& a, std::ostream& out) {
  require(a.size >= 8, "--size must be at least 8");
  fs::create_directories(a.out);
  data::Manifest m;
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t seed = a.seed + i;
    const data::Sample s = data::synthetic_sample(a.size, seed);
    const std::string id = "pair" + std::to_string(seed);
    fs::create_directories(a.out / id);
    write_png(a.out / id / "I.png", s.mixture);
    write_png(a.out / id / "T.png", s.labels.transmission);
    m.entries.push_back({id, fs::path(id) / "I.png", fs::path(id) / "T.png"});
  }
  data::write_manifest(a.out / "manifest.csv", m);
  out << "wrote " << a.count << " pairs and manifest.csv to " << a.out.string() << "\n";
}

// ----------------------------------------------------------------- labels

struct LabelArgs {
  fs::path in, out;
  double sigma = 0.0;
};

void make_labels(const LabelArgs& a, std::ostream& out) {
  const Image mixture = read_png(a.in / "I.png");
  const Image transmission = read_png(a.in / "T.png");
  if (!mixture.same_size(transmission)) throw IoError("I.png and T.png differ in size");
  const double sigma =
      a.sigma > 0.0 ? a.sigma : labels::default_label_sigma(mixture.height(), mixture.width());
  const labels::LabelTriplet l = labels::generate_unified_labels(mixture, transmission, sigma);
  labels::write_label_cache(a.out, l);
  out << "wrote T.png, R.png, N.png to " << a.out.string() << " (sigma " << fmt(sigma) << ")\n";
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  fs::path config, data_root, out_dir, resume, backbone;
  std::string mode;
  std::size_t steps = 0;
};

void train_cmd(const TrainArgs& a, std::ostream& out) {
  train::RunConfig cfg = a.config.empty() ? train::RunConfig{} : train::load_run_config(a.config);
  if (!a.mode.empty()) cfg.network.mode = parse_tuning_mode(a.mode);
  std::optional<data::Manifest> manifest;
  if (!a.data_root.empty()) manifest = manifest_at(a.data_root);
  if (manifest && cfg.train.label_mode == labels::ReflectionLabel::kReflection)
    throw ConfigError("label_mode 'reflection' needs synthetic pairs only; drop --data-root");

  train::Trainer trainer(cfg, cfg.train.seed);
  if (!a.backbone.empty()) {
    const std::size_t n = train::load_backbone_weights(trainer.store(), a.backbone);
    trainer.snap_state();
    out << "loaded " << n << " backbone tensors from " << a.backbone.string() << "\n";
  }
  if (!a.resume.empty()) {
    trainer.load_checkpoint(a.resume);
    out << "resumed at epoch " << trainer.epoch() << ", step " << trainer.step() << "\n";
  }
  out << "mode " << to_string(cfg.network.mode) << ": " << trainer.view().count_trainable() << " of "
      << trainer.view().count_all() << " parameters trainable\n";

  train::FitOptions opt;
  opt.out_dir = a.out_dir;
  opt.max_steps = a.steps;
  opt.manifest = manifest ? &*manifest : nullptr;
  opt.on_step = [&](const train::StepRecord& r) {
    out << "epoch " << r.epoch << " step " << r.step << " total " << fmt(r.loss.total) << " (content "
        << fmt(r.loss.content) << ", exclusion " << fmt(r.loss.exclusion) << ", perceptual "
        << fmt(r.loss.perceptual) << ", reconstruction " << fmt(r.loss.reconstruction) << ")\n";
  };
  const train::FitResult res = train::fit(trainer, opt);
  out << "finished " << res.steps.size() << " steps; " << res.checkpoints.size() << " checkpoint(s) in "
      << a.out_dir.string() << "\n";
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  fs::path manifest, checkpoint, config, out_dir;
  bool baseline = false;
};

void eval_cmd(const EvalArgs& a, std::ostream& out) {
  if (a.baseline == !a.checkpoint.empty()) throw ConfigError("give exactly one of --checkpoint or --baseline");
  const data::Manifest m = manifest_at(a.manifest);
  std::optional<train::RunConfig> expected;
  if (!a.config.empty()) expected = train::load_run_config(a.config);
  const eval::MetricsReport r =
      a.baseline ? eval::evaluate_pairs(m, [](const Image& i) { return i; })
                 : eval::evaluate_dataset(m, a.checkpoint, expected ? &*expected : nullptr);
  eval::write_report_csv(a.out_dir / "report.csv", r);
  eval::write_report_json(a.out_dir / "report.json", r);
  for (const auto& row : r.rows)
    out << row.id << "  PSNR " << fmt(row.psnr, "%.3f") << " dB  SSIM " << fmt(row.ssim, "%.4f") << "\n";
  out << "mean  PSNR " << fmt(r.mean_psnr, "%.3f") << " dB  SSIM " << fmt(r.mean_ssim, "%.4f") << " over "
      << r.rows.size() << " pairs\n";
}

// -------------------------------------------------------- analyze-filters

struct FilterArgs {
  std::size_t size = 128;
  fs::path out_dir = "filters";
  double show = 0.4;
};

void analyze_filters(const FilterArgs& a, std::ostream& out) {
  fs::create_directories(a.out_dir);
  std::ofstream csv(a.out_dir / "filters.csv");
  if (!csv) throw IoError("cannot write " + (a.out_dir / "filters.csv").string());
  csv << "kind,param_x,param_y,ringing,min_response,max_response\n";
  // Gaussian widths stay well inside the band; wider ones are cut at Nyquist and ring.
  const std::vector<std::pair<freq::MaskKind, std::vector<double>>> sweep{
      {freq::MaskKind::kGaussian, {0.05, 0.1, 0.2, 0.3, 0.4}},
      {freq::MaskKind::kRectangular, {0.2, 0.4, 0.8, 1.2, 1.6}}};
  for (const auto& [kind, params] : sweep)
    for (const double p : params) {
      const auto s = freq::summarize(freq::build_mask(kind, a.size, a.size, {p, p}));
      csv << freq::to_string(kind) << ',' << fmt(p) << ',' << fmt(p) << ',' << fmt(s.ringing, "%.9g") << ','
          << fmt(s.min_response, "%.9g") << ',' << fmt(s.max_response, "%.9g") << '\n';
      out << freq::to_string(kind) << " " << fmt(p) << ": ringing " << fmt(s.ringing) << "\n";
    }
  for (const freq::MaskKind kind : {freq::MaskKind::kGaussian, freq::MaskKind::kRectangular}) {
    const auto mask = freq::build_mask(kind, a.size, a.size, {a.show, a.show});
    const Tensor h = freq::impulse_response(mask);
    double peak = 0.0;
    for (double v : h.data()) peak = std::max(peak, std::abs(v));
    const std::string name = freq::to_string(kind);
    write_png(a.out_dir / (name + "_mask.png"), heat_map(mask.grid, 0.0, 1.0));
    // Symmetric range keeps zero at the palette centre so negative lobes stand out.
    write_png(a.out_dir / (name + "_response.png"), heat_map(h, -peak, peak));
  }
  out << "wrote filters.csv and 4 PNGs to " << a.out_dir.string() << "\n";
}

// -------------------------------------------------------- inspect-weights

struct InspectArgs {
  fs::path checkpoint, image, out_dir = "weights";
  std::size_t level = 0, block = 0;
  std::string stream = "t";
};

void inspect_weights(const InspectArgs& a, std::ostream& out) {
  const eval::LoadedModel m = eval::load_model(a.checkpoint);
  if (m.config.network.decoder.attention != net::AttentionKind::kDaa)
    throw ConfigError("inspect-weights needs a checkpoint with daa attention");
  const Image img = read_png(a.image);
  net::ForwardTrace trace;
  m.model->infer(img, &trace);
  if (a.level >= trace.levels.size())
    throw ConfigError("--level must be below " + std::to_string(trace.levels.size()));
  // Levels are traced coarse to fine; --level counts from the finest.
  const net::LevelTrace& lt = trace.levels[trace.levels.size() - 1 - a.level];
  if (a.block >= lt.self.size()) throw ConfigError("--block must be below " + std::to_string(lt.self.size()));
  // Self-attention runs on the T windows followed by the R windows.
  const Tensor& scores = lt.self[a.block].scores;
  const std::size_t n = lt.grid.count();
  if (scores.size() != 2 * n) throw NumericError("unexpected importance trace size " + std::to_string(scores.size()));
  Tensor picked({n});
  const std::size_t offset = a.stream == "r" ? n : 0;
  for (std::size_t i = 0; i < n; ++i) picked[i] = scores[offset + i];
  const Tensor coarse = attn::window_value_map(picked, lt.grid);

  const std::size_t ph = trace.padded_image.dim(0), pw = trace.padded_image.dim(1);
  const std::size_t fy = ph / lt.grid.height, fx = pw / lt.grid.width;
  const std::size_t h = img.height(), w = img.width();
  Tensor map({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) map[y * w + x] = coarse[(y / fy) * lt.grid.width + x / fx];

  double lo = map[0], hi = map[0];
  for (double v : map.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  fs::create_directories(a.out_dir);
  write_png(a.out_dir / "wie_map.png", heat_map(map, lo, hi > lo ? hi : lo + 1.0));
  std::ofstream csv(a.out_dir / "wie_map.csv");
  if (!csv) throw IoError("cannot write " + (a.out_dir / "wie_map.csv").string());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) csv << (x ? "," : "") << fmt(map[y * w + x], "%.9g");
    csv << '\n';
  }
  out << "window importance in [" << fmt(lo) << ", " << fmt(hi) << "] over " << lt.grid.count()
      << " windows; wrote wie_map.png and wie_map.csv to " << a.out_dir.string() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-stream reflection removal: data, training, evaluation and analysis", "gfrrn"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic mixture pairs and a manifest");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--count", sa.count, "Number of pairs")->capture_default_str();
  synth_cmd->add_option("--size", sa.size, "Square image side")->capture_default_str();
  synth_cmd->add_option("--seed", sa.seed, "First pair seed")->capture_default_str();

  LabelArgs la;
  auto* labels_cmd = app.add_subcommand("labels", "Derive T, R_low and N labels for one pair");
  labels_cmd->add_option("--in", la.in, "Pair directory holding I.png and T.png")->required()->check(CLI::ExistingDirectory);
  labels_cmd->add_option("--out", la.out, "Output directory")->required();
  labels_cmd->add_option("--sigma", la.sigma, "Low-pass sigma in pixels (0: default for the size)");

  TrainArgs ta;
  auto* train_cmd_app = app.add_subcommand("train", "Train a model and write checkpoints and logs");
  train_cmd_app->add_option("--config", ta.config, "Run config JSON")->check(CLI::ExistingFile);
  train_cmd_app->add_option("--data-root", ta.data_root, "Manifest file or directory holding manifest.csv");
  train_cmd_app->add_option("--mode", ta.mode, "Tuning mode")->check(CLI::IsMember({"frozen", "fft", "mona"}));
  train_cmd_app->add_option("--steps", ta.steps, "Stop after this many steps (0: all epochs)");
  train_cmd_app->add_option("--out-dir", ta.out_dir, "Output directory")->required();
  train_cmd_app->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd_app->add_option("--backbone-weights", ta.backbone, "Checkpoint-format backbone weights")
      ->check(CLI::ExistingFile);

  EvalArgs ea;
  auto* eval_cmd_app = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint over a manifest");
  eval_cmd_app->add_option("--manifest", ea.manifest, "Manifest file or directory holding manifest.csv")->required();
  eval_cmd_app->add_option("--checkpoint", ea.checkpoint, "Checkpoint to evaluate");
  eval_cmd_app->add_flag("--baseline", ea.baseline, "Score the input mixture itself");
  eval_cmd_app->add_option("--config", ea.config, "Expected run config; mismatched checkpoints are rejected");
  eval_cmd_app->add_option("--out", ea.out_dir, "Report directory")->required();

  FilterArgs fa;
  auto* filters_cmd = app.add_subcommand("analyze-filters", "Ringing analysis of gaussian and rectangular masks");
  filters_cmd->add_option("--size", fa.size, "Grid side")->capture_default_str()->check(CLI::Range(4, 4096));
  filters_cmd->add_option("--out", fa.out_dir, "Output directory")->capture_default_str();
  filters_cmd->add_option("--show", fa.show, "Mask parameter used for the PNGs")->capture_default_str();

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect-weights", "Window importance map of a checkpoint on an image");
  inspect_cmd->add_option("--checkpoint", ia.checkpoint, "Checkpoint")->required();
  inspect_cmd->add_option("--image", ia.image, "Input PNG")->required();
  inspect_cmd->add_option("--out", ia.out_dir, "Output directory")->capture_default_str();
  inspect_cmd->add_option("--level", ia.level, "Decoder level counted from the finest")->capture_default_str();
  inspect_cmd->add_option("--block", ia.block, "Block within the level")->capture_default_str();
  inspect_cmd->add_option("--stream", ia.stream, "Stream whose windows are shown")
      ->capture_default_str()
      ->check(CLI::IsMember({"t", "r"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (*synth_cmd) synth(sa, out);
    if (*labels_cmd) make_labels(la, out);
    if (*train_cmd_app) train_cmd(ta, out);
    if (*eval_cmd_app) eval_cmd(ea, out);
    if (*filters_cmd) analyze_filters(fa, out);
    if (*inspect_cmd) inspect_weights(ia, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace gfrrn::cli
