#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "gfrrn/error.hpp"
#include "gfrrn/frequency.hpp"
#include "gfrrn/gradcheck.hpp"
#include "gfrrn/ops.hpp"
#include "test_util.hpp"

namespace gfrrn::freq {
namespace {

using gfrrn::testing::probe_loss;
using gfrrn::testing::random_leaf;
using gfrrn::testing::random_tensor;

constexpr double kPi = std::numbers::pi;

/// O(N^2) inverse DFT of a natural-order spectrum, returned centred.
Tensor naive_centred_idft(const FrequencyMask& m) {
  const std::size_t h = m.height(), w = m.width();
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::complex<double> acc = 0.0;
      for (std::size_t ky = 0; ky < h; ++ky)
        for (std::size_t kx = 0; kx < w; ++kx) {
          const double ph = 2.0 * kPi * (double(ky * y) / double(h) + double(kx * x) / double(w));
          acc += m.at_bin(ky, kx) * std::polar(1.0, ph);
        }
      out[((y + h / 2) % h) * w + (x + w / 2) % w] = acc.real() / double(h * w);
    }
  return out;
}

/// Naive per-channel DFT filter, natural-order mask from the analytic formula.
Tensor naive_gaussian_lowpass(const Tensor& x, double sx, double sy) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<std::complex<double>> spec(h * w);
    for (std::size_t ky = 0; ky < h; ++ky)
      for (std::size_t kx = 0; kx < w; ++kx)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const double ph = -2.0 * kPi * (double(ky * y) / double(h) + double(kx * xx) / double(w));
            spec[ky * w + kx] += x[(y * w + xx) * c + ch] * std::polar(1.0, ph);
          }
    for (std::size_t ky = 0; ky < h; ++ky)
      for (std::size_t kx = 0; kx < w; ++kx) {
        const double wx = bin_frequency(kx, w), wy = bin_frequency(ky, h);
        spec[ky * w + kx] *= std::exp(-0.5 * (wx * wx / (sx * sx) + wy * wy / (sy * sy)));
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        std::complex<double> acc = 0.0;
        for (std::size_t ky = 0; ky < h; ++ky)
          for (std::size_t kx = 0; kx < w; ++kx) {
            const double ph = 2.0 * kPi * (double(ky * y) / double(h) + double(kx * xx) / double(w));
            acc += spec[ky * w + kx] * std::polar(1.0, ph);
          }
        out[(y * w + xx) * c + ch] = acc.real() / double(h * w);
      }
  }
  return out;
}

TEST(BinFrequency, CoversSymmetricRange) {
  EXPECT_DOUBLE_EQ(bin_frequency(0, 8), 0.0);
  EXPECT_DOUBLE_EQ(bin_frequency(1, 8), kPi / 4);
  EXPECT_DOUBLE_EQ(bin_frequency(4, 8), -kPi);
  EXPECT_DOUBLE_EQ(bin_frequency(7, 8), -kPi / 4);
  EXPECT_DOUBLE_EQ(bin_frequency(2, 5), 4 * kPi / 5);
  EXPECT_DOUBLE_EQ(bin_frequency(3, 5), -4 * kPi / 5);
}

TEST(BuildMask, GaussianPeaksAtDcAndDecreases) {
  const auto m = build_mask(MaskKind::kGaussian, 16, 20, {0.7, 1.1});
  EXPECT_DOUBLE_EQ(m.at_bin(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.grid.at({8, 10}), 1.0);
  for (std::size_t k = 1; k < 8; ++k) EXPECT_LT(m.at_bin(k, 0), m.at_bin(k - 1, 0));
  for (std::size_t k = 1; k < 10; ++k) EXPECT_LT(m.at_bin(0, k), m.at_bin(0, k - 1));
  EXPECT_GE(m.grid.min(), 0.0);
  EXPECT_LE(m.grid.max(), 1.0);
}

TEST(BuildMask, RectangularIsOneAtDcZeroAtNyquist) {
  const auto m = build_mask(MaskKind::kRectangular, 32, 32, {kPi / 4, kPi / 2});
  EXPECT_EQ(m.at_bin(0, 0), 1.0);
  EXPECT_EQ(m.at_bin(16, 0), 0.0);
  EXPECT_EQ(m.at_bin(0, 16), 0.0);
  EXPECT_EQ(m.at_bin(0, 3), 1.0);
  EXPECT_EQ(m.at_bin(0, 5), 0.0);
  EXPECT_EQ(m.at_bin(7, 0), 1.0);
  EXPECT_EQ(m.at_bin(9, 0), 0.0);
}

TEST(BuildMask, SymmetricUnderNegation) {
  for (auto kind : {MaskKind::kGaussian, MaskKind::kRectangular}) {
    const auto m = build_mask(kind, 12, 10, {0.9, 1.3});
    for (std::size_t ky = 0; ky < 12; ++ky)
      for (std::size_t kx = 0; kx < 10; ++kx) EXPECT_EQ(m.at_bin(ky, kx), m.at_bin((12 - ky) % 12, (10 - kx) % 10));
  }
}

TEST(BuildMask, RejectsBadArguments) {
  EXPECT_THROW(build_mask(MaskKind::kGaussian, 8, 8, {0.0, 1.0}), InvalidArgument);
  EXPECT_THROW(build_mask(MaskKind::kRectangular, 8, 8, {1.0, -1.0}), InvalidArgument);
  EXPECT_THROW(build_mask(MaskKind::kGaussian, 1, 8, {1.0, 1.0}), InvalidArgument);
}

TEST(ImpulseResponse, MatchesNaiveInverseDft) {
  for (auto kind : {MaskKind::kGaussian, MaskKind::kRectangular}) {
    const auto m = build_mask(kind, 12, 10, {0.8, 1.2});
    EXPECT_LT(max_abs_diff(impulse_response(m), naive_centred_idft(m)), 1e-12);
  }
}

TEST(ImpulseResponse, AllPassGivesCentredDelta) {
  const auto m = build_mask(MaskKind::kRectangular, 16, 16, {4.0, 4.0});
  EXPECT_EQ(m.grid.min(), 1.0);
  const Tensor h = impulse_response(m);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], i == 8 * 16 + 8 ? 1.0 : 0.0, 1e-14);
}

TEST(ImpulseResponse, GaussianIsPositiveRectangularRings) {
  for (double s : {0.1, 0.2, 0.3, 0.4, 0.5}) {
    const Tensor h = impulse_response(build_mask(MaskKind::kGaussian, 128, 128, {s, s * 0.8}));
    EXPECT_GE(h.min(), -1e-9) << "sigma " << s;
  }
  for (double c : {kPi / 8, kPi / 4, kPi / 3, kPi / 2, 3 * kPi / 4}) {
    const Tensor h = impulse_response(build_mask(MaskKind::kRectangular, 128, 128, {c, c}));
    EXPECT_LT(h.min(), 0.0) << "cutoff " << c;
  }
}

TEST(RingingMetric, GaussianZeroRectangularPositive) {
  EXPECT_LT(ringing_metric(build_mask(MaskKind::kGaussian, 128, 128, {0.3, 0.3})), 1e-6);
  EXPECT_GT(ringing_metric(build_mask(MaskKind::kRectangular, 128, 128, {kPi / 4, kPi / 4})), 0.05);
  for (double c : {kPi / 4, kPi / 2, 3 * kPi / 4})
    EXPECT_GT(ringing_metric(build_mask(MaskKind::kRectangular, 128, 128, {c, c})), 0.0);
}

TEST(RingingMetric, DegenerateResponseThrows) {
  EXPECT_THROW(ringing_metric(Tensor({4, 4})), NumericError);
}

TEST(FmimSplit, IsComplementary) {
  const Tensor x = random_tensor({9, 12, 3}, 1);
  const auto [low, high] = fmim_split(x, {0.6, 0.9});
  double energy = 0.0, cross = 0.0, el = 0.0, eh = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(low[i] + high[i], x[i], 1e-12);
    energy += x[i] * x[i];
    el += low[i] * low[i];
    eh += high[i] * high[i];
    cross += low[i] * high[i];
  }
  EXPECT_NEAR(energy, el + eh + 2.0 * cross, 1e-9);
}

TEST(FmimSplit, ConstantChannelStaysInLowBand) {
  const Tensor x({8, 8, 2}, 0.6);
  const auto [low, high] = fmim_split(x, {0.5, 0.5});
  EXPECT_LT(high.max_abs(), 1e-12);
  EXPECT_LT(max_abs_diff(low, x), 1e-12);
}

TEST(FmimSplit, NyquistCheckerboardGoesHigh) {
  Tensor x({32, 32, 1});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t xx = 0; xx < 32; ++xx) x[y * 32 + xx] = ((y + xx) % 2 == 0) ? 1.0 : -1.0;
  const auto [low, high] = fmim_split(x, {0.3, 0.3});
  double eh = 0.0, ex = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    eh += high[i] * high[i];
    ex += x[i] * x[i];
  }
  EXPECT_GE(eh / ex, 0.99);
}

TEST(FmimSplit, RejectsNonPositiveSigma) {
  EXPECT_THROW(fmim_split(Tensor({4, 4, 1}), {0.0, 1.0}), InvalidArgument);
}

TEST(FftLowpass, MatchesNaiveDftFilter) {
  const Tensor x = random_tensor({6, 5, 2}, 3);
  const Var y = fft_lowpass(Var::constant(x), Var::constant(Tensor({2}, std::vector<double>{0.9, 1.4})));
  EXPECT_LT(max_abs_diff(y.value(), naive_gaussian_lowpass(x, 0.9, 1.4)), 1e-12);
}

TEST(FftLowpass, GradientsMatchFiniteDifferences) {
  Var x = random_leaf({6, 7, 3}, 1);
  Var s = Var::leaf(Tensor({2}, std::vector<double>{0.8, 1.3}), true);
  const auto r = gradient_check([&] { return probe_loss(fft_lowpass(x, s)); }, {{"x", x}, {"sigma", s}});
  EXPECT_LT(r.max_rel_error, 1e-7) << r.worst;
}

TEST(FftLowpass, RectangularPassesNoSigmaGradient) {
  Var x = random_leaf({6, 6, 1}, 1);
  Var s = Var::leaf(Tensor({2}, 1.0), true);
  backward(probe_loss(fft_lowpass(x, s, MaskKind::kRectangular)));
  EXPECT_EQ(s.grad().max_abs(), 0.0);
  EXPECT_GT(x.grad().max_abs(), 0.0);
}

struct GaflbFixture : ::testing::Test {
  ParamStore store;
  GaflbConfig cfg;
  Gaflb block;
  Tensor image;
  Var x;

  void SetUp() override {
    cfg.channels = 8;
    cfg.head_hidden = 4;
    block = Gaflb(Scope(store, 7, ParamGroup::kTask, "gaflb"), cfg);
    image = random_tensor({8, 8, 3}, 11, 0.0, 1.0);
    x = random_leaf({8, 8, 8}, 12);
  }

  void randomise_fuse() {
    for (auto& p : store.entries())
      if (p.name.find("fuse") != std::string::npos)
        p.var.mutable_value() = random_tensor(p.var.shape(), fnv1a(p.name), -0.3, 0.3);
  }
};

TEST_F(GaflbFixture, IdentityAtInit) {
  const Var y = block.forward(x, image);
  EXPECT_EQ(max_abs_diff(y.value(), x.value()), 0.0);
}

TEST_F(GaflbFixture, ShapePreservedForVariousSizes) {
  randomise_fuse();
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 4}, {5, 9}, {12, 7}}) {
    const Var xi = Var::constant(random_tensor({h, w, 8}, h * w));
    const Var y = block.forward(xi, random_tensor({h, w, 3}, h + w, 0.0, 1.0));
    EXPECT_EQ(y.shape(), xi.shape());
    EXPECT_TRUE(y.value().all_finite());
  }
}

TEST_F(GaflbFixture, SigmaStaysWithinBounds) {
  GaflbTrace trace;
  for (auto& p : store.entries())
    if (p.name.find("sigma_head") != std::string::npos)
      p.var.mutable_value() = random_tensor(p.var.shape(), fnv1a(p.name), -50.0, 50.0);
  block.forward(x, image, &trace);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_GE(trace.sigma_pixels[i], cfg.sigma_min);
    EXPECT_LE(trace.sigma_pixels[i], cfg.sigma_max);
  }
  EXPECT_EQ(trace.low.shape(), trace.high.shape());
}

TEST_F(GaflbFixture, ResolutionMismatchThrows) {
  EXPECT_THROW(block.forward(x, random_tensor({4, 8, 3}, 1)), InvalidArgument);
  EXPECT_THROW(block.forward(Var::constant(Tensor({8, 8, 4})), image), InvalidArgument);
}

TEST_F(GaflbFixture, AllParameterGradientsMatchFiniteDifferences) {
  randomise_fuse();
  std::vector<NamedVar> in{{"x", x}};
  for (const auto& p : store.entries()) in.push_back({p.name, p.var});
  const auto r = gradient_check([&] { return probe_loss(block.forward(x, image)); }, in);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

}  // namespace
}  // namespace gfrrn::freq
