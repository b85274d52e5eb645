#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gfrrn/error.hpp"
#include "gfrrn/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace gfrrn::eval {
namespace {

namespace fs = std::filesystem;
using testing::psnr_oracle;
using testing::random_image;
using testing::ssim_oracle;

TEST(Psnr, IdenticalImagesHitTheCap) {
  const Image a = random_image(8, 8, 1);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
}

TEST(Psnr, TenthOffsetIsTwentyDecibels) {
  EXPECT_NEAR(psnr(Image(16, 12, 0.3), Image(16, 12, 0.4)), 20.0, 1e-9);
  Image a = random_image(16, 12, 2);
  for (std::size_t i = 0; i < a.pixels().size(); ++i) a.pixels()[i] = 0.8 * a.pixels()[i] + 0.05;
  Image b = a;
  for (std::size_t i = 0; i < b.pixels().size(); ++i) b.pixels()[i] += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, MatchesScalarOracleAndIsSymmetric) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Image a = random_image(13, 17, 100 + s), b = random_image(13, 17, 200 + s);
    EXPECT_NEAR(psnr(a, b), psnr_oracle(a, b), 1e-9);
    EXPECT_NEAR(psnr(a, b), psnr(b, a), 1e-9);
  }
}

TEST(Psnr, RejectsSizeMismatch) { EXPECT_THROW(psnr(Image(4, 4), Image(4, 5)), InvalidArgument); }

TEST(Ssim, SelfComparisonIsOne) {
  const Image a = random_image(20, 24, 3);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, ConstantPatchesFollowClosedForm) {
  const double c1 = 1e-4, want = (2 * 0.3 * 0.7 + c1) / (0.09 + 0.49 + c1);
  EXPECT_NEAR(ssim(Image(16, 16, 0.3), Image(16, 16, 0.7)), want, 1e-12);
  EXPECT_LT(want, 1.0);
}

TEST(Ssim, MatchesSlidingWindowOracleAndIsSymmetric) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Image a = random_image(14, 15, 300 + s);
    Image b = a;
    const Image noise = random_image(14, 15, 400 + s);
    for (std::size_t i = 0; i < b.pixels().size(); ++i) b.pixels()[i] = 0.7 * b.pixels()[i] + 0.3 * noise.pixels()[i];
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-6);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
    EXPECT_LE(ssim(a, b), 1.0);
    EXPECT_GE(ssim(a, b), -1.0);
  }
}

TEST(Ssim, RejectsSmallOrMismatchedImages) {
  EXPECT_THROW(ssim(Image(10, 20), Image(10, 20)), InvalidArgument);
  EXPECT_THROW(ssim(Image(12, 12), Image(12, 13)), InvalidArgument);
}

// ------------------------------------------------------------ datasets

struct PairDir {
  fs::path root;
  data::Manifest manifest;
};

PairDir make_pairs(const std::string& name, bool zero_reflection, std::size_t count = 2) {
  PairDir d{fs::temp_directory_path() / ("gfrrn_metrics_" + name), {}};
  fs::remove_all(d.root);
  fs::create_directories(d.root);
  for (std::size_t i = 0; i < count; ++i) {
    const data::Sample s = data::synthetic_sample(16, i);
    const std::string id = "p" + std::to_string(i);
    write_png(d.root / (id + "_I.png"), zero_reflection ? s.labels.transmission : s.mixture);
    write_png(d.root / (id + "_T.png"), s.labels.transmission);
    d.manifest.entries.push_back({id, d.root / (id + "_I.png"), d.root / (id + "_T.png")});
  }
  return d;
}

TEST(Evaluate, IdentityRestorerOnCleanPairsHitsTheCap) {
  const PairDir d = make_pairs("clean", true);
  const MetricsReport r = evaluate_pairs(d.manifest, [](const Image& i) { return i; });
  ASSERT_EQ(r.rows.size(), 2u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.psnr, kPsnrCap);
    EXPECT_NEAR(row.ssim, 1.0, 1e-12);
  }
}

TEST(Evaluate, InputBaselineIsPositiveAndMeansMatchRows) {
  const PairDir d = make_pairs("input", false, 3);
  const MetricsReport r = evaluate_pairs(d.manifest, [](const Image& i) { return i; });
  double p = 0, s = 0;
  for (const auto& row : r.rows) {
    EXPECT_GT(row.psnr, 0.0);
    EXPECT_LT(row.psnr, kPsnrCap);
    p += row.psnr;
    s += row.ssim;
  }
  EXPECT_NEAR(r.mean_psnr, p / 3, 1e-9);
  EXPECT_NEAR(r.mean_ssim, s / 3, 1e-9);

  write_report_csv(d.root / "report.csv", r);
  write_report_json(d.root / "report.json", r);
  std::ifstream csv(d.root / "report.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  EXPECT_EQ(lines, 5u);
  const auto j = nlohmann::json::parse(std::ifstream(d.root / "report.json"));
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_NEAR(j["mean_psnr"].get<double>(), r.mean_psnr, 1e-12);
}

train::RunConfig tiny_run() {
  return train::run_config_from_json({{"encoder_channels", {8, 16}},
                                      {"depths", {1, 1}},
                                      {"encoder_heads", {2, 2}},
                                      {"channels", 8},
                                      {"heads", 2},
                                      {"window", 4},
                                      {"K", 1},
                                      {"gaflb_hidden", 4},
                                      {"residual_hidden", 4},
                                      {"image_size", 16}});
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Evaluate, CheckpointedModelIsReadOnlyAndMatchesInference) {
  const PairDir d = make_pairs("ckpt", false);
  train::Trainer tr(tiny_run());
  tr.train_step(data::synthetic_sample(16, 9));
  tr.snap_state();
  tr.save_checkpoint(d.root / "model.bin");
  const std::string before = bytes_of(d.root / "model.bin");

  const MetricsReport r = evaluate_dataset(d.manifest, d.root / "model.bin");
  ASSERT_EQ(r.rows.size(), 2u);
  const Image i0 = read_png(d.manifest.entries[0].mixture), t0 = read_png(d.manifest.entries[0].transmission);
  EXPECT_NEAR(r.rows[0].psnr, psnr(tr.model().infer(i0).t_hat.clipped(), t0), 1e-9);
  EXPECT_EQ(bytes_of(d.root / "model.bin"), before);

  train::RunConfig other = tiny_run();
  other.network.decoder.channels = 16;
  EXPECT_THROW(evaluate_dataset(d.manifest, d.root / "model.bin", &other), ConfigError);
  EXPECT_THROW(evaluate_dataset(d.manifest, d.root / "absent.bin"), IoError);
}

}  // namespace
}  // namespace gfrrn::eval
