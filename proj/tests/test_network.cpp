#include <gtest/gtest.h>

#include <cmath>

#include "gfrrn/error.hpp"
#include "gfrrn/gradcheck.hpp"
#include "gfrrn/network.hpp"
#include "test_util.hpp"

namespace gfrrn::net {
namespace {

using gfrrn::testing::probe_loss;
using gfrrn::testing::random_leaf;
using gfrrn::testing::random_tensor;
using gfrrn::testing::randomise_zero_params;

// ------------------------------------------------------------ resampling

TEST(Resample, DownsampleAveragesBlocks) {
  const Tensor x = random_tensor({6, 4, 2}, 1);
  const Tensor y = ops::downsample2x(Var::constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{3, 2, 2}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) s += x[((2 * i + dy) * 4 + 2 * j + dx) * 2 + c];
        EXPECT_NEAR(y[(i * 2 + j) * 2 + c], s / 4.0, 1e-15);
      }
}

double bilinear_oracle(const Tensor& x, std::size_t oy, std::size_t ox, std::size_t c) {
  const std::size_t h = x.dim(0), w = x.dim(1), ch = x.dim(2);
  auto coord = [](std::size_t o, std::size_t n) {
    double s = (o + 0.5) / 2.0 - 0.5;
    return std::min(std::max(s, 0.0), double(n - 1));
  };
  const double sy = coord(oy, h), sx = coord(ox, w);
  const std::size_t y0 = std::size_t(sy), x0 = std::size_t(sx);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](std::size_t y, std::size_t xx) { return x[(y * w + xx) * ch + c]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

TEST(Resample, UpsampleMatchesBilinearOracle) {
  const Tensor x = random_tensor({3, 5, 2}, 2);
  const Tensor y = ops::upsample2x(Var::constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{6, 10, 2}));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y[(i * 10 + j) * 2 + c], bilinear_oracle(x, i, j, c), 1e-14);
}

TEST(Resample, ConstantsArePreserved) {
  Tensor x({4, 4, 1});
  x.fill(0.7);
  const Tensor up = ops::upsample2x(Var::constant(x)).value();
  const Tensor down = ops::downsample2x(Var::constant(x)).value();
  for (double v : up.data()) EXPECT_NEAR(v, 0.7, 1e-15);
  for (double v : down.data()) EXPECT_NEAR(v, 0.7, 1e-15);
  EXPECT_THROW(ops::downsample2x(Var::constant(Tensor({1, 4, 1}))), InvalidArgument);
}

TEST(Resample, DownsampleDropsOddEdge) {
  const Tensor x = random_tensor({5, 3, 1}, 3);
  const Tensor y = ops::downsample2x(Var::constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{2, 1, 1}));
  EXPECT_NEAR(y[1], (x[6] + x[7] + x[9] + x[10]) / 4.0, 1e-15);
}

TEST(Resample, GradientsMatchFiniteDifferences) {
  Var x = random_leaf({3, 4, 2}, 5);
  const auto r = gradient_check([&] { return probe_loss(ops::downsample2x(ops::upsample2x(x))); }, {{"x", x}});
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst;
}

// ------------------------------------------------------------ components

DecoderLevelConfig small_level(AttentionKind kind = AttentionKind::kDaa, std::size_t k = 2) {
  DecoderLevelConfig c;
  c.channels = 8;
  c.heads = 2;
  c.window = 4;
  c.blocks = k;
  c.agents = 4;
  c.ffn_ratio = 2;
  c.attention = kind;
  c.gaflb.channels = 8;
  c.gaflb.head_hidden = 4;
  return c;
}

StreamPair random_pair(Shape shape, std::uint64_t seed) {
  return {Var::constant(random_tensor(shape, seed)), Var::constant(random_tensor(shape, seed + 1))};
}

TEST(DecoderLevel, IdentityAtInitEqualsFrequencyPrefix) {
  for (auto kind : {AttentionKind::kDaa, AttentionKind::kWmsa}) {
    ParamStore s;
    const DecoderLevel level(Scope(s, 3, ParamGroup::kTask, "lvl"), small_level(kind));
    for (auto& p : s.entries())
      if (p.name.find("gaflb.fuse") != std::string::npos)
        p.var.mutable_value() = random_tensor(p.var.shape(), fnv1a(p.name), -0.3, 0.3);
    const StreamPair x = random_pair({8, 12, 8}, 4);
    const Tensor image = random_tensor({8, 12, 3}, 6, 0.0, 1.0);
    const StreamPair full = level.forward(x, image);
    const StreamPair prefix = level.frequency_prefix(x, image);
    EXPECT_EQ(max_abs_diff(full.t.value(), prefix.t.value()), 0.0);
    EXPECT_EQ(max_abs_diff(full.r.value(), prefix.r.value()), 0.0);
    EXPECT_GT(max_abs_diff(prefix.t.value(), x.t.value()), 1e-6);
  }
}

TEST(DecoderLevel, SingleBlockMatchesManualComposition) {
  ParamStore s;
  const DecoderLevel level(Scope(s, 3, ParamGroup::kTask, "lvl"), small_level(AttentionKind::kDaa, 1));
  randomise_zero_params(s);
  const StreamPair x = random_pair({8, 8, 8}, 9);
  const Tensor image = random_tensor({8, 8, 3}, 10, 0.0, 1.0);
  const StreamPair got = level.forward(x, image);
  const StreamPair want = level.blocks().at(0).forward(level.frequency_prefix(x, image));
  EXPECT_EQ(max_abs_diff(got.t.value(), want.t.value()), 0.0);
  EXPECT_EQ(max_abs_diff(got.r.value(), want.r.value()), 0.0);
}

TEST(DecoderLevel, ShapesPreservedAndTraced) {
  ParamStore s;
  const DecoderLevel level(Scope(s, 3, ParamGroup::kTask, "lvl"), small_level());
  randomise_zero_params(s);
  const StreamPair x = random_pair({6, 10, 8}, 11);
  LevelTrace trace;
  const StreamPair y = level.forward(x, random_tensor({6, 10, 3}, 12, 0.0, 1.0), &trace);
  EXPECT_EQ(y.t.shape(), x.t.shape());
  EXPECT_EQ(y.r.shape(), x.r.shape());
  ASSERT_EQ(trace.self.size(), 2u);
  EXPECT_EQ(trace.self[0].scores.dim(0), 2 * trace.grid.count());
  EXPECT_EQ(trace.cross[1].stream_scores.shape(), (Shape{2, trace.grid.count()}));
  EXPECT_EQ(trace.gaflb_t.sigma_pixels.size(), 2u);
}

TEST(DecoderLevel, RejectsMismatchedStreams) {
  ParamStore s;
  const DecoderLevel level(Scope(s, 3, ParamGroup::kTask, "lvl"), small_level());
  const StreamPair bad{Var::constant(Tensor({8, 8, 8})), Var::constant(Tensor({8, 4, 8}))};
  EXPECT_THROW(level.forward(bad, Tensor({8, 8, 3})), InvalidArgument);
  DecoderLevelConfig zero_k = small_level();
  zero_k.blocks = 0;
  EXPECT_THROW(DecoderLevel(Scope(s, 3, ParamGroup::kTask, "z"), zero_k), InvalidArgument);
}

TEST(Ddib, GradientsMatchFiniteDifferences) {
  ParamStore s;
  const Ddib block(Scope(s, 3, ParamGroup::kTask, "b"), small_level());
  randomise_zero_params(s, 0.3);
  Var t = random_leaf({4, 8, 8}, 13), r = random_leaf({4, 8, 8}, 14);
  std::vector<NamedVar> in{{"t", t}, {"r", r}};
  for (const auto& p : s.entries()) in.push_back({p.name, p.var});
  GradCheckOptions opt;
  opt.samples_per_tensor = 6;
  const auto rep = gradient_check(
      [&] {
        const StreamPair y = block.forward({t, r});
        return ops::add(probe_loss(y.t, 1), probe_loss(y.r, 2));
      },
      in, opt);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(Dslp, GateComesFromTheOtherStream) {
  ParamStore s;
  const Dslp ffn(Scope(s, 1, ParamGroup::kTask, "f"), 4, 2);
  randomise_zero_params(s, 0.5);
  const Var t = Var::constant(random_tensor({2, 2, 4}, 1));
  const Var r1 = Var::constant(random_tensor({2, 2, 4}, 2));
  const Var r2 = Var::constant(random_tensor({2, 2, 4}, 3));
  const StreamPair a = ffn.forward({t, r1}), b = ffn.forward({t, r2});
  EXPECT_GT(max_abs_diff(a.t.value(), b.t.value()), 1e-6);
}

TEST(Encoder2, PairShapesMatchPerScale) {
  ParamStore s;
  const Encoder2 enc(Scope(s, 1, ParamGroup::kTask, "e2"), 8, 2);
  const auto out = enc.forward(Var::constant(random_tensor({16, 12, 3}, 1, 0.0, 1.0)));
  ASSERT_EQ(out.size(), 3u);
  const Shape want[3] = {{16, 12, 4}, {8, 6, 8}, {4, 3, 8}};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(out[k].t.shape(), want[k]);
    EXPECT_EQ(out[k].r.shape(), want[k]);
  }
}

TEST(Encoder2, ZeroInputStaysFinite) {
  ParamStore s;
  const Encoder2 enc(Scope(s, 1, ParamGroup::kTask, "e2"), 8, 2);
  for (const auto& pair : enc.forward(Var::constant(Tensor({8, 8, 3}))))
    for (const Var& v : {pair.t, pair.r})
      for (double x : v.value().data()) EXPECT_TRUE(std::isfinite(x));
}

TEST(Encoder2, GradientsMatchFiniteDifferences) {
  ParamStore s;
  const Encoder2 enc(Scope(s, 1, ParamGroup::kTask, "e2"), 4, 1);
  randomise_zero_params(s, 0.3);
  Var img = random_leaf({4, 4, 3}, 3);
  std::vector<NamedVar> in{{"image", img}};
  for (const auto& p : s.entries()) in.push_back({p.name, p.var});
  GradCheckOptions opt;
  opt.samples_per_tensor = 8;
  const auto rep = gradient_check(
      [&] {
        const auto out = enc.forward(img);
        return ops::add(probe_loss(out[1].t, 3), probe_loss(out[0].r, 4));
      },
      in, opt);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(ResidualEstimator, ShapeAndZeroParameters) {
  ParamStore s;
  const ResidualEstimator est(Scope(s, 1, ParamGroup::kTask, "res"), 4);
  const Var t = Var::constant(random_tensor({5, 7, 3}, 1, 0.0, 1.0));
  const Var r = Var::constant(random_tensor({5, 7, 3}, 2, 0.0, 1.0));
  const Var i = Var::constant(random_tensor({5, 7, 3}, 3, 0.0, 1.0));
  for (auto& p : s.entries()) p.var.mutable_value().fill(0.0);
  const Var n = est.forward(t, r, i);
  EXPECT_EQ(n.shape(), (Shape{5, 7, 3}));
  for (double v : n.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(est.forward(t, Var::constant(Tensor({5, 6, 3})), i), InvalidArgument);
}

TEST(ResidualEstimator, GradientsMatchFiniteDifferences) {
  ParamStore s;
  const ResidualEstimator est(Scope(s, 1, ParamGroup::kTask, "res"), 4);
  randomise_zero_params(s, 0.3);
  const Var t = Var::constant(random_tensor({4, 5, 3}, 1, 0.0, 1.0));
  const Var r = Var::constant(random_tensor({4, 5, 3}, 2, 0.0, 1.0));
  const Var i = Var::constant(random_tensor({4, 5, 3}, 3, 0.0, 1.0));
  std::vector<NamedVar> in;
  for (const auto& p : s.entries()) in.push_back({p.name, p.var});
  const auto rep = gradient_check([&] { return probe_loss(est.forward(t, r, i)); }, in);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

// ---------------------------------------------------------------- config

TEST(NetworkConfig, JsonRoundTripAndHash) {
  NetworkConfig c;
  c.decoder.blocks = 3;
  c.decoder.attention = AttentionKind::kWmsa;
  c.mode = TuningMode::kFft;
  const NetworkConfig back = network_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(back), config_hash(NetworkConfig{}));
  for (const auto& key : network_config_keys()) EXPECT_TRUE(to_json(c).contains(key)) << key;
}

TEST(NetworkConfig, BadValuesAreConfigErrors) {
  EXPECT_THROW(network_config_from_json({{"tuning_mode", "lora"}}), ConfigError);
  EXPECT_THROW(network_config_from_json({{"K", 0}}), ConfigError);
  EXPECT_THROW(network_config_from_json({{"channels", "wide"}}), ConfigError);
  EXPECT_THROW(network_config_from_json({{"attention", "global"}}), ConfigError);
}

// ------------------------------------------------------------------ GFRRN

NetworkConfig small_network(TuningMode mode = TuningMode::kMona) {
  NetworkConfig c;
  c.encoder.channels = {8, 16};
  c.encoder.heads = {2, 2};
  c.encoder.depths = {1, 1};
  c.encoder.window = 4;
  c.encoder.mlp_ratio = 2;
  c.encoder.mona_reduction = 4;
  c.decoder = small_level(AttentionKind::kDaa, 1);
  c.residual_hidden = 4;
  c.mode = mode;
  return c;
}

TEST(Gfrrn, OutputsMatchInputSize) {
  ParamStore s;
  const Gfrrn model(s, small_network(), 1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {13, 21}, {24, 8}}) {
    const Prediction p = model.forward(random_tensor({h, w, 3}, h * w, 0.0, 1.0));
    for (const Var& v : {p.t_hat, p.r_hat, p.n_hat}) EXPECT_EQ(v.shape(), (Shape{h, w, 3}));
    for (double v : p.t_hat.value().data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : p.r_hat.value().data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Gfrrn, FreshModelPassesTheInputThrough) {
  ParamStore s;
  const Gfrrn model(s, small_network(), 1);
  const Image img = gfrrn::testing::random_image(16, 16, 3).clipped();
  const GfrrnOutput out = model.infer(img);
  EXPECT_LT(max_abs_diff(out.t_hat.pixels(), clip01(img.pixels())), 1e-3 + 1e-12);
  for (double v : out.n_hat.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gfrrn, DeterministicUnderFixedSeed) {
  ParamStore a, b;
  const Gfrrn ma(a, small_network(), 5), mb(b, small_network(), 5);
  randomise_zero_params(a);
  randomise_zero_params(b);
  const Tensor img = random_tensor({16, 16, 3}, 2, 0.0, 1.0);
  EXPECT_EQ(max_abs_diff(ma.forward(img).t_hat.value(), mb.forward(img).t_hat.value()), 0.0);
  EXPECT_EQ(a.hash_values(), b.hash_values());
}

TEST(Gfrrn, FrozenAndMonaAgreeAtInit) {
  ParamStore a, b;
  const Gfrrn frozen(a, small_network(TuningMode::kFrozen), 5), mona(b, small_network(TuningMode::kMona), 5);
  const Tensor img = random_tensor({16, 16, 3}, 2, 0.0, 1.0);
  const Prediction pa = frozen.forward(img), pb = mona.forward(img);
  EXPECT_EQ(max_abs_diff(pa.t_hat.value(), pb.t_hat.value()), 0.0);
  EXPECT_EQ(max_abs_diff(pa.r_hat.value(), pb.r_hat.value()), 0.0);
  EXPECT_EQ(max_abs_diff(pa.n_hat.value(), pb.n_hat.value()), 0.0);
}

TEST(Gfrrn, TraceCoversEveryLevel) {
  ParamStore s;
  const Gfrrn model(s, small_network(), 1);
  ForwardTrace trace;
  model.forward(random_tensor({16, 16, 3}, 2, 0.0, 1.0), &trace);
  ASSERT_EQ(trace.levels.size(), 2u);
  EXPECT_EQ(trace.levels[0].grid.height, 4u);
  EXPECT_EQ(trace.levels[1].grid.height, 8u);
  EXPECT_EQ(trace.padded_image.shape(), (Shape{16, 16, 3}));
}

TEST(Gfrrn, EndToEndGradientsMatchFiniteDifferences) {
  ParamStore s;
  NetworkConfig cfg;
  const Gfrrn model(s, cfg, 2);
  randomise_zero_params(s, 0.05);
  const Tensor img = random_tensor({32, 32, 3}, 4, 0.05, 0.95);
  std::vector<NamedVar> in;
  for (const auto& p : s.entries()) in.push_back({p.name, p.var});
  GradCheckOptions opt;
  opt.total_samples = 20;
  opt.seed = 11;
  const auto rep = gradient_check(
      [&] {
        const Prediction p = model.forward(img);
        return ops::add(ops::add(probe_loss(p.t_hat, 1), probe_loss(p.r_hat, 2)), probe_loss(p.n_hat, 3));
      },
      in, opt);
  EXPECT_EQ(rep.checked, 20u);
  EXPECT_LT(rep.max_rel_error, 1e-3) << rep.worst;
}

}  // namespace
}  // namespace gfrrn::net
