#include "gfrrn/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gfrrn/error.hpp"

namespace gfrrn::eval {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_taps() {
  std::array<double, kWindow> g{};
  double sum = 0.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = double(i) - double(kWindow / 2);
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Valid separable Gaussian filter of one (H, W) plane.
std::vector<double> filter_valid(const std::vector<double>& p, std::size_t h, std::size_t w) {
  static const auto g = gaussian_taps();
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * p[y * w + x + k];
      rows[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require(!a.empty() && a.same_size(b), "psnr: images must be non-empty and equal in size");
  double se = 0.0;
  const auto& pa = a.pixels();
  const auto& pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) se += (pa[i] - pb[i]) * (pa[i] - pb[i]);
  const double mse = se / double(pa.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  require(a.same_size(b), "ssim: images must be equal in size");
  require(a.height() >= kWindow && a.width() >= kWindow, "ssim: images must be at least 11x11");
  const std::size_t h = a.height(), w = a.width(), n = h * w;
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.pixels()[i * 3 + c];
      y[i] = b.pixels()[i * 3 + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w), my = filter_valid(y, h, w);
    const auto sxx = filter_valid(xx, h, w), syy = filter_valid(yy, h, w), sxy = filter_valid(xy, h, w);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      sum += ((2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    total += sum / double(mx.size());
  }
  return total / 3.0;
}

void MetricsReport::add(MetricsRow row) {
  rows.push_back(std::move(row));
  finalize();
}

void MetricsReport::finalize() {
  double p = 0.0, s = 0.0;
  for (const auto& r : rows) {
    p += r.psnr;
    s += r.ssim;
  }
  mean_psnr = rows.empty() ? 0.0 : p / double(rows.size());
  mean_ssim = rows.empty() ? 0.0 : s / double(rows.size());
}

void write_report_csv(const std::filesystem::path& path, const MetricsReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,psnr,ssim\n";
  for (const auto& r : report.rows) out << r.id << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << '\n';
  out << "mean," << fmt(report.mean_psnr) << ',' << fmt(report.mean_ssim) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back({{"id", r.id}, {"psnr", r.psnr}, {"ssim", r.ssim}});
  return {{"pairs", report.rows.size()}, {"mean_psnr", report.mean_psnr}, {"mean_ssim", report.mean_ssim},
          {"rows", rows}};
}

void write_report_json(const std::filesystem::path& path, const MetricsReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(report).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

MetricsReport evaluate_pairs(const data::Manifest& manifest, const Restorer& restorer) {
  MetricsReport report;
  for (const auto& e : manifest.entries) {
    const Image mixture = read_png(e.mixture);
    const Image truth = read_png(e.transmission);
    if (!mixture.same_size(truth)) throw IoError("pair '" + e.id + "': mixture and transmission differ in size");
    const Image estimate = restorer(mixture);
    report.rows.push_back({e.id, psnr(estimate, truth), ssim(estimate, truth)});
  }
  report.finalize();
  return report;
}

Image LoadedModel::restore(const Image& mixture) const { return model->infer(mixture).t_hat.clipped(); }

LoadedModel load_model(const std::filesystem::path& checkpoint, const train::RunConfig* expected) {
  const train::Checkpoint ck = train::read_checkpoint(checkpoint);
  LoadedModel m;
  m.config = train::run_config_from_json(ck.config);
  if (train::config_hash(m.config) != ck.config_hash)
    throw ConfigError("checkpoint " + checkpoint.string() + ": stored config does not match its hash");
  if (expected && train::config_hash(*expected) != ck.config_hash)
    throw ConfigError("checkpoint " + checkpoint.string() + " was trained with a different network config");
  m.store = std::make_unique<ParamStore>();
  m.model = std::make_unique<net::Gfrrn>(*m.store, m.config.network, 0);
  train::load_parameters(*m.store, ck);
  return m;
}

MetricsReport evaluate_dataset(const data::Manifest& manifest, const std::filesystem::path& checkpoint,
                               const train::RunConfig* expected) {
  const LoadedModel m = load_model(checkpoint, expected);
  return evaluate_pairs(manifest, [&](const Image& mixture) { return m.restore(mixture); });
}

}  // namespace gfrrn::eval
