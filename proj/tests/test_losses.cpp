#include <gtest/gtest.h>

#include <cmath>

#include "gfrrn/error.hpp"
#include "gfrrn/gradcheck.hpp"
#include "gfrrn/labels.hpp"
#include "gfrrn/losses.hpp"
#include "test_util.hpp"

namespace gfrrn::losses {
namespace {

using gfrrn::testing::random_leaf;
using gfrrn::testing::random_tensor;

Var cst(const Tensor& t) { return Var::constant(t); }
double scalar(const Var& v) { return v.value()[0]; }

// Oracles on plain arrays -------------------------------------------------

struct Grad {
  Tensor dh, dw;
};

Grad oracle_grad(const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Grad g{Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < c; ++k) {
        const double v = x[(i * w + j) * c + k];
        if (i + 1 < h) g.dh[(i * w + j) * c + k] = x[((i + 1) * w + j) * c + k] - v;
        if (j + 1 < w) g.dw[(i * w + j) * c + k] = x[(i * w + j + 1) * c + k] - v;
      }
  return g;
}

double oracle_mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / double(a.size());
}

double oracle_l1(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

double oracle_grad_l1(const Tensor& a, const Tensor& b) {
  const Grad ga = oracle_grad(a), gb = oracle_grad(b);
  return oracle_l1(ga.dh, gb.dh) + oracle_l1(ga.dw, gb.dw);
}

Tensor oracle_pool(const Tensor& x) {
  const std::size_t h = x.dim(0) / 2, w = x.dim(1) / 2, c = x.dim(2), sw = x.dim(1);
  Tensor out({h, w, c});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < c; ++k)
        out[(i * w + j) * c + k] = 0.25 * (x[(2 * i * sw + 2 * j) * c + k] + x[(2 * i * sw + 2 * j + 1) * c + k] +
                                           x[((2 * i + 1) * sw + 2 * j) * c + k] +
                                           x[((2 * i + 1) * sw + 2 * j + 1) * c + k]);
  return out;
}

double oracle_exclusion_term(const Tensor& gt, const Tensor& gr) {
  double mt = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    mt += std::abs(gt[i]);
    mr += std::abs(gr[i]);
  }
  mt /= double(gt.size());
  mr /= double(gr.size());
  const double xi1 = std::sqrt(mr / (mt + 1e-6)), xi2 = std::sqrt(mt / (mr + 1e-6));
  double s = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double d = std::tanh(xi1 * std::abs(gt[i])) * std::tanh(xi2 * std::abs(gr[i]));
    s += d * d;
  }
  return s / double(gt.size());
}

double oracle_exclusion(Tensor t, Tensor r) {
  double total = 0.0;
  for (int n = 0; n < 3; ++n) {
    if (n > 0) {
      t = oracle_pool(t);
      r = oracle_pool(r);
    }
    const Grad gt = oracle_grad(t), gr = oracle_grad(r);
    total += 0.5 * (oracle_exclusion_term(gt.dh, gr.dh) + oracle_exclusion_term(gt.dw, gr.dw));
  }
  return total / 3.0;
}

labels::LabelTriplet random_triplet(std::size_t h, std::size_t w, std::uint64_t seed) {
  return {Image(random_tensor({h, w, 3}, seed, 0.0, 1.0)), random_tensor({h, w, 3}, seed + 1, 0.0, 0.5),
          random_tensor({h, w, 3}, seed + 2, -0.1, 0.1)};
}

// grad_op -------------------------------------------------------------------

TEST(GradOp, ConstantImageHasZeroGradients) {
  Tensor x({5, 6, 3});
  x.fill(0.4);
  const Gradients g = grad_op(cst(x));
  for (double v : g.dh.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : g.dw.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GradOp, RampHasConstantInteriorGradient) {
  const std::size_t w = 8;
  Tensor x({4, w, 1});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < w; ++j) x[i * w + j] = double(j) / double(w);
  const Tensor dw = grad_op(cst(x)).dw.value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < w; ++j) EXPECT_NEAR(dw[i * w + j], j + 1 < w ? 1.0 / w : 0.0, 1e-15);
}

TEST(GradOp, MatchesHandRolledDifferences) {
  const Tensor x = random_tensor({5, 5, 2}, 3);
  const Gradients g = grad_op(cst(x));
  const Grad o = oracle_grad(x);
  EXPECT_EQ(max_abs_diff(g.dh.value(), o.dh), 0.0);
  EXPECT_EQ(max_abs_diff(g.dw.value(), o.dw), 0.0);
}

// content -------------------------------------------------------------------

TEST(ContentLoss, ZeroAtLabels) {
  const auto lab = random_triplet(6, 6, 1);
  const LossWeights w;
  EXPECT_EQ(scalar(content_loss(cst(lab.transmission.pixels()), cst(lab.reflection_label), cst(lab.residual_label), lab, w)),
            0.0);
}

TEST(ContentLoss, ConstantOffsetCostsOnlyTheSquaredOffset) {
  const auto lab = random_triplet(6, 6, 2);
  Tensor t = lab.transmission.pixels();
  for (auto& v : t.data()) v += 0.1;
  const double got = scalar(content_loss(cst(t), cst(lab.reflection_label), cst(lab.residual_label), lab, {}));
  EXPECT_NEAR(got, 0.01, 1e-12);
}

TEST(ContentLoss, MatchesScalarOracle) {
  const auto lab = random_triplet(4, 4, 3);
  const Tensor t = random_tensor({4, 4, 3}, 10), r = random_tensor({4, 4, 3}, 11), n = random_tensor({4, 4, 3}, 12);
  LossWeights w;
  const double want = oracle_mse(t, lab.transmission.pixels()) + oracle_mse(r, lab.reflection_label) +
                      w.alpha * oracle_mse(n, lab.residual_label) +
                      w.beta * (oracle_grad_l1(t, lab.transmission.pixels()) + oracle_grad_l1(r, lab.reflection_label) +
                                w.alpha * oracle_grad_l1(n, lab.residual_label));
  EXPECT_NEAR(scalar(content_loss(cst(t), cst(r), cst(n), lab, w)), want, 1e-10);
  EXPECT_THROW(content_loss(cst(Tensor({4, 3, 3})), cst(r), cst(n), lab, w), InvalidArgument);
}

TEST(ContentLoss, GradientsMatchFiniteDifferences) {
  const auto lab = random_triplet(5, 5, 4);
  Var t = random_leaf({5, 5, 3}, 20), r = random_leaf({5, 5, 3}, 21), n = random_leaf({5, 5, 3}, 22);
  const auto rep = gradient_check([&] { return content_loss(t, r, n, lab, {}); }, {{"t", t}, {"r", r}, {"n", n}});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

// exclusion -----------------------------------------------------------------

TEST(ExclusionLoss, ZeroForConstantReflection) {
  Tensor r({8, 8, 3});
  r.fill(0.3);
  EXPECT_EQ(scalar(exclusion_loss(cst(random_tensor({8, 8, 3}, 1)), cst(r))), 0.0);
}

TEST(ExclusionLoss, ZeroForDisjointEdgeSupports) {
  Tensor t({16, 16, 3}), r({16, 16, 3});
  t.fill(0.5);
  r.fill(0.5);
  const Tensor noise = random_tensor({16, 16, 3}, 2, 0.0, 1.0);
  for (std::size_t i = 0; i < 16 * 3 * 4; ++i) t[i] = noise[i];
  for (std::size_t i = 16 * 3 * 8; i < r.size(); ++i) r[i] = noise[i];
  EXPECT_EQ(scalar(exclusion_loss(cst(t), cst(r))), 0.0);
}

TEST(ExclusionLoss, SymmetricInItsArguments) {
  const Tensor a = random_tensor({12, 10, 3}, 3), b = random_tensor({12, 10, 3}, 4);
  EXPECT_NEAR(scalar(exclusion_loss(cst(a), cst(b))), scalar(exclusion_loss(cst(b), cst(a))), 1e-14);
}

TEST(ExclusionLoss, MatchesFormulaOracle) {
  const Tensor a = random_tensor({8, 8, 3}, 5, 0.0, 1.0), b = random_tensor({8, 8, 3}, 6, 0.0, 1.0);
  const double got = scalar(exclusion_loss(cst(a), cst(b)));
  EXPECT_NEAR(got, oracle_exclusion(a, b), 1e-12);
  EXPECT_GT(got, 0.0);
  EXPECT_THROW(exclusion_loss(cst(Tensor({3, 8, 3})), cst(Tensor({3, 8, 3}))), InvalidArgument);
}

TEST(ExclusionLoss, GradientsMatchFiniteDifferences) {
  Var t = random_leaf({8, 8, 3}, 7), r = random_leaf({8, 8, 3}, 8);
  const auto rep = gradient_check([&] { return exclusion_loss(t, r); }, {{"t", t}, {"r", r}});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

// perceptual ----------------------------------------------------------------

TEST(PerceptualLoss, ZeroAtEqualityForAnyExtractor) {
  const Tensor t = random_tensor({16, 16, 3}, 1, 0.0, 1.0);
  const LossWeights w;
  EXPECT_EQ(scalar(perceptual_loss(cst(t), cst(t), IdentityExtractor{}, w.omega)), 0.0);
  EXPECT_EQ(scalar(perceptual_loss(cst(t), cst(t), RandomConvExtractor(3), w.omega)), 0.0);
}

TEST(PerceptualLoss, IdentityExtractorGivesFiveL1) {
  const Tensor a = random_tensor({6, 6, 3}, 1), b = random_tensor({6, 6, 3}, 2);
  const std::array<double, 5> ones{1, 1, 1, 1, 1};
  EXPECT_NEAR(scalar(perceptual_loss(cst(a), cst(b), IdentityExtractor{}, ones)), 5.0 * oracle_l1(a, b), 1e-14);
}

TEST(PerceptualLoss, RandomExtractorMatchesDirectEvaluation) {
  const Tensor a = random_tensor({16, 16, 3}, 3, 0.0, 1.0), b = random_tensor({16, 16, 3}, 4, 0.0, 1.0);
  const RandomConvExtractor ex(9);
  const std::array<double, 5> omega{0.5, 1.0, 2.0, 0.25, 1.5};
  const auto fa = ex.features(cst(a)), fb = ex.features(cst(b));
  ASSERT_EQ(fa.size(), 5u);
  double want = 0.0;
  for (std::size_t i = 0; i < 5; ++i) want += omega[i] * oracle_l1(fa[i].value(), fb[i].value());
  EXPECT_EQ(scalar(perceptual_loss(cst(a), cst(b), ex, omega)), want);
  EXPECT_EQ(fa[4].shape(), (Shape{4, 4, 8}));
}

class FourTaps final : public FeatureExtractor {
 public:
  std::vector<Var> features(const Var& x) const override { return std::vector<Var>(4, x); }
};

TEST(PerceptualLoss, RejectsWrongTapCount) {
  const Tensor a = random_tensor({4, 4, 3}, 1);
  EXPECT_THROW(perceptual_loss(cst(a), cst(a), FourTaps{}, LossWeights{}.omega), InvalidArgument);
}

TEST(PerceptualLoss, GradientsMatchFiniteDifferences) {
  const RandomConvExtractor ex(2, 4);
  const Tensor target = random_tensor({8, 8, 3}, 5, 0.0, 1.0);
  Var t = random_leaf({8, 8, 3}, 6);
  const auto rep = gradient_check([&] { return perceptual_loss(t, cst(target), ex, LossWeights{}.omega); }, {{"t", t}});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

// reconstruction ------------------------------------------------------------

TEST(ReconstructionLoss, ZeroForExactLabels) {
  const Image t = gfrrn::testing::random_image(16, 16, 1), r = gfrrn::testing::random_image(16, 16, 2);
  const auto mix = labels::synthesize_mixture(t, r, labels::SynthesisParams::sample(3), 1.5);
  const auto& lab = mix.labels;
  EXPECT_NEAR(scalar(reconstruction_loss(cst(mix.mixture.pixels()), cst(lab.transmission.pixels()),
                                         cst(lab.reflection_label), cst(lab.residual_label))),
              0.0, 1e-15);
}

TEST(ReconstructionLoss, OffsetResidualCostsTheOffset) {
  const Tensor i = random_tensor({5, 5, 3}, 1), t = random_tensor({5, 5, 3}, 2), r = random_tensor({5, 5, 3}, 3);
  Tensor n({5, 5, 3});
  for (std::size_t k = 0; k < n.size(); ++k) n[k] = i[k] - t[k] - r[k] + 0.07;
  EXPECT_NEAR(scalar(reconstruction_loss(cst(i), cst(t), cst(r), cst(n))), 0.07, 1e-15);
}

TEST(ReconstructionLoss, MatchesScalarOracle) {
  const Tensor i = random_tensor({4, 4, 3}, 1), t = random_tensor({4, 4, 3}, 2), r = random_tensor({4, 4, 3}, 3),
               n = random_tensor({4, 4, 3}, 4);
  double want = 0.0;
  for (std::size_t k = 0; k < i.size(); ++k) want += std::abs(i[k] - t[k] - r[k] - n[k]);
  want /= double(i.size());
  EXPECT_NEAR(scalar(reconstruction_loss(cst(i), cst(t), cst(r), cst(n))), want, 1e-10);
  EXPECT_THROW(reconstruction_loss(cst(i), cst(Tensor({4, 4, 1})), cst(r), cst(n)), InvalidArgument);
}

// total -----------------------------------------------------------------------

TEST(TotalLoss, CombinesWithDefaultWeights) {
  const LossWeights w;
  EXPECT_EQ(combine(1, 1, 1, 1, w).total, 2.21);
  EXPECT_EQ(combine(0, 0, 0, 0, w).total, 0.0);
  EXPECT_EQ(combine(1, 0, 0, 0, w).total, 1.0);
  EXPECT_EQ(w.alpha, 0.3);
  EXPECT_EQ(w.beta, 0.6);
}

TEST(TotalLoss, ReportIsConsistent) {
  const auto lab = random_triplet(8, 8, 5);
  const Image mixture(random_tensor({8, 8, 3}, 9, 0.0, 1.0));
  const Tensor t = random_tensor({8, 8, 3}, 10, 0.0, 1.0), r = random_tensor({8, 8, 3}, 11, 0.0, 1.0),
               n = random_tensor({8, 8, 3}, 12, -0.1, 0.1);
  const LossWeights w;
  const LossReport rep = total_loss(cst(t), cst(r), cst(n), mixture, lab, RandomConvExtractor(1), w).report();
  EXPECT_NEAR(rep.total, rep.content + rep.exclusion + w.lambda1 * rep.perceptual + w.lambda2 * rep.reconstruction,
              1e-10);
  for (double v : {rep.content, rep.exclusion, rep.perceptual, rep.reconstruction}) EXPECT_GT(v, 0.0);
}

TEST(TotalLoss, ContentPerceptualReconstructionVanishAtLabels) {
  const Image t = gfrrn::testing::random_image(16, 16, 1), r = gfrrn::testing::random_image(16, 16, 2);
  const auto mix = labels::synthesize_mixture(t, r, labels::SynthesisParams::sample(4), 1.5);
  const auto& lab = mix.labels;
  const LossReport rep = total_loss(cst(lab.transmission.pixels()), cst(lab.reflection_label), cst(lab.residual_label),
                                    mix.mixture, lab, RandomConvExtractor(1), {})
                             .report();
  EXPECT_EQ(rep.content, 0.0);
  EXPECT_EQ(rep.perceptual, 0.0);
  EXPECT_NEAR(rep.reconstruction, 0.0, 1e-15);
  EXPECT_GE(rep.exclusion, 0.0);
}

TEST(LossWeights, JsonOverridesAndValidation) {
  const LossWeights w = loss_weights_from_json({{"alpha", 0.5}, {"lambda2", 0.1}});
  EXPECT_EQ(w.alpha, 0.5);
  EXPECT_EQ(w.lambda2, 0.1);
  EXPECT_EQ(w.beta, 0.6);
  EXPECT_EQ(loss_weights_from_json(to_json(w)).lambda2, 0.1);
  EXPECT_THROW(loss_weights_from_json({{"beta", -1.0}}), ConfigError);
  EXPECT_THROW(loss_weights_from_json({{"omega", {1, 2}}}), ConfigError);
}

}  // namespace
}  // namespace gfrrn::losses
