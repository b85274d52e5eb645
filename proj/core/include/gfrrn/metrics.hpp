#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfrrn/data.hpp"
#include "gfrrn/network.hpp"
#include "gfrrn/training.hpp"

namespace gfrrn::eval {

/// Identical inputs give this value instead of infinity.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all RGB values, capped at kPsnrCap. Throws
/// InvalidArgument for size mismatch.
double psnr(const Image& a, const Image& b);

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid windows only. The map mean is taken per
/// RGB channel and averaged over channels. Throws InvalidArgument for size
/// mismatch or sides below 11.
double ssim(const Image& a, const Image& b);

struct MetricsRow {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void add(MetricsRow row);
  /// Recomputes the means from the rows.
  void finalize();
};

/// CSV rows "id,psnr,ssim" followed by a "mean" row.
void write_report_csv(const std::filesystem::path& path, const MetricsReport& report);
nlohmann::json to_json(const MetricsReport& report);
void write_report_json(const std::filesystem::path& path, const MetricsReport& report);

/// Maps a mixture to an estimated transmission.
using Restorer = std::function<Image(const Image&)>;

/// Metrics of restorer(I) against T for every manifest pair.
MetricsReport evaluate_pairs(const data::Manifest& manifest, const Restorer& restorer);

/// A network rebuilt from a checkpoint's own config and weights.
struct LoadedModel {
  train::RunConfig config;
  std::unique_ptr<ParamStore> store;
  std::unique_ptr<net::Gfrrn> model;

  Image restore(const Image& mixture) const;
};

/// Throws IoError for unreadable archives and ConfigError when the stored
/// config does not reproduce the stored hash or, if `expected` is given,
/// differs from it.
LoadedModel load_model(const std::filesystem::path& checkpoint, const train::RunConfig* expected = nullptr);

/// Per-pair inference with the checkpointed network; reads only.
MetricsReport evaluate_dataset(const data::Manifest& manifest, const std::filesystem::path& checkpoint,
                               const train::RunConfig* expected = nullptr);

}  // namespace gfrrn::eval
