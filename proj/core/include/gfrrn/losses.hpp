#pragma once

#include <array>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfrrn/labels.hpp"
#include "gfrrn/ops.hpp"

namespace gfrrn::losses {

struct LossWeights {
  double alpha = 0.3;
  double beta = 0.6;
  double lambda1 = 0.01;
  double lambda2 = 0.2;
  std::array<double, 5> omega{1.0, 1.0, 1.0, 1.0, 1.0};

  void validate() const;
};

/// Keys alpha, beta, lambda1, lambda2, omega (array of 5); absent keys keep
/// their defaults, other keys are ignored.
LossWeights loss_weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossWeights& w);
const std::vector<std::string>& loss_weight_keys();

struct LossReport {
  double content = 0.0;
  double exclusion = 0.0;
  double perceptual = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
};

/// total = content + exclusion + lambda1 * perceptual + lambda2 * reconstruction.
LossReport combine(double content, double exclusion, double perceptual, double reconstruction,
                   const LossWeights& w);

struct Gradients {
  Var dh;  // x[i+1, j] - x[i, j], zero on the last row
  Var dw;  // x[i, j+1] - x[i, j], zero on the last column
};

/// Forward differences of an (H, W, C) map.
Gradients grad_op(const Var& x);

/// Mean squared error and mean absolute error.
Var mse(const Var& a, const Var& b);
Var l1(const Var& a, const Var& b);
/// mean|dh(a) - dh(b)| + mean|dw(a) - dw(b)|.
Var gradient_l1(const Var& a, const Var& b);

/// MSE(t) + MSE(r) + alpha MSE(n) + beta (G(t) + G(r) + alpha G(n)), with G
/// the gradient L1 above.
Var content_loss(const Var& t_hat, const Var& r_hat, const Var& n_hat, const labels::LabelTriplet& labels,
                 const LossWeights& w);

/// Mean over scales n = 0, 1, 2 (2^n average-pooled inputs) and over the two
/// gradient directions of mean(D^2), where
///   D = tanh(xi1 |g_t|) * tanh(xi2 |g_r|),
///   xi1 = sqrt(mu_r / (mu_t + 1e-6)),  xi2 = sqrt(mu_t / (mu_r + 1e-6)),
/// and mu is the mean absolute gradient of that direction and scale.
/// Sides must be at least 4.
Var exclusion_loss(const Var& t_hat, const Var& r_hat);

/// Feature network with five tapped layers.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var> features(const Var& image) const = 0;
};

/// Returns the input five times.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<Var> features(const Var& image) const override;
};

/// Five fixed random 3x3 conv + ReLU layers (average pooling after the
/// second and fourth), each output tapped. Weights are constants drawn from
/// the seed.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 1, std::size_t channels = 8);
  std::vector<Var> features(const Var& image) const override;

 private:
  struct Layer {
    Var w, b;
  };
  std::vector<Layer> layers_;
};

/// sum_i omega_i mean|phi_i(t_hat) - phi_i(t)|. Throws InvalidArgument unless
/// the extractor yields five taps.
Var perceptual_loss(const Var& t_hat, const Var& t, const FeatureExtractor& extractor,
                    const std::array<double, 5>& omega);

/// mean|I - t_hat - r_hat - n_hat|.
Var reconstruction_loss(const Var& image, const Var& t_hat, const Var& r_hat, const Var& n_hat);

struct LossTerms {
  Var content, exclusion, perceptual, reconstruction, total;
  LossReport report() const;
};

/// Every term and the weighted total for one prediction.
LossTerms total_loss(const Var& t_hat, const Var& r_hat, const Var& n_hat, const Image& mixture,
                     const labels::LabelTriplet& labels, const FeatureExtractor& extractor, const LossWeights& w);

}  // namespace gfrrn::losses
