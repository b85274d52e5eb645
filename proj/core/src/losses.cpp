#include "gfrrn/losses.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <random>

#include "gfrrn/error.hpp"

namespace gfrrn::losses {

namespace {

constexpr double kExclusionEps = 1e-6;

SparseMapPtr difference_map(std::size_t h, std::size_t w, std::size_t c, int axis) {
  static std::mutex mutex;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t, int>, SparseMapPtr> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{h, w, c, axis}];
  if (slot) return slot;
  SparseMapBuilder b({h, w, c}, {h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const bool inside = axis == 0 ? y + 1 < h : x + 1 < w;
        if (inside) {
          const std::size_t next = axis == 0 ? ((y + 1) * w + x) * c + ch : (y * w + x + 1) * c + ch;
          b.add(next, 1.0);
          b.add((y * w + x) * c + ch, -1.0);
        }
        b.end_row();
      }
  return slot = b.build();
}

void require_aligned(const Var& a, const Var& b, const char* who) {
  require(a.shape() == b.shape(), std::string(who) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

Var exclusion_direction(const Var& gt, const Var& gr) {
  const Var at = ops::abs(gt), ar = ops::abs(gr);
  const Var mu_t = ops::mean(at), mu_r = ops::mean(ar);
  const Var xi1 = ops::sqrt(ops::div(mu_r, ops::shift(mu_t, kExclusionEps)));
  const Var xi2 = ops::sqrt(ops::div(mu_t, ops::shift(mu_r, kExclusionEps)));
  const Var d = ops::mul(ops::tanh(ops::mul_scalar(at, xi1)), ops::tanh(ops::mul_scalar(ar, xi2)));
  return ops::mean(ops::square(d));
}

}  // namespace

void LossWeights::validate() const {
  bool ok = alpha >= 0.0 && beta >= 0.0 && lambda1 >= 0.0 && lambda2 >= 0.0;
  for (double o : omega) ok = ok && o >= 0.0;
  if (!ok) throw ConfigError("loss weights must be non-negative");
}

const std::vector<std::string>& loss_weight_keys() {
  static const std::vector<std::string> keys{"alpha", "beta", "lambda1", "lambda2", "omega"};
  return keys;
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("loss weights: expected a JSON object");
  LossWeights w;
  try {
    w.alpha = j.value("alpha", w.alpha);
    w.beta = j.value("beta", w.beta);
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.omega = j.value("omega", w.omega);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss weights: ") + e.what());
  }
  w.validate();
  return w;
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"alpha", w.alpha}, {"beta", w.beta}, {"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"omega", w.omega}};
}

LossReport combine(double content, double exclusion, double perceptual, double reconstruction,
                   const LossWeights& w) {
  LossReport r{content, exclusion, perceptual, reconstruction, 0.0};
  r.total = content + exclusion + w.lambda1 * perceptual + w.lambda2 * reconstruction;
  return r;
}

Gradients grad_op(const Var& x) {
  require(x.rank() == 3 && x.dim(0) >= 1 && x.dim(1) >= 1, "grad_op: expected (H, W, C), got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  return {ops::linear_map(x, difference_map(h, w, c, 0)), ops::linear_map(x, difference_map(h, w, c, 1))};
}

Var mse(const Var& a, const Var& b) {
  require_aligned(a, b, "mse");
  return ops::mean(ops::square(ops::sub(a, b)));
}

Var l1(const Var& a, const Var& b) {
  require_aligned(a, b, "l1");
  return ops::mean(ops::abs(ops::sub(a, b)));
}

Var gradient_l1(const Var& a, const Var& b) {
  require_aligned(a, b, "gradient_l1");
  const Gradients ga = grad_op(a), gb = grad_op(b);
  return ops::add(l1(ga.dh, gb.dh), l1(ga.dw, gb.dw));
}

Var content_loss(const Var& t_hat, const Var& r_hat, const Var& n_hat, const labels::LabelTriplet& labels,
                 const LossWeights& w) {
  const Var t = Var::constant(labels.transmission.pixels());
  const Var r = Var::constant(labels.reflection_label);
  const Var n = Var::constant(labels.residual_label);
  require_aligned(t_hat, t, "content_loss (T)");
  require_aligned(r_hat, r, "content_loss (R)");
  require_aligned(n_hat, n, "content_loss (N)");
  const Var spatial = ops::add(ops::add(mse(t_hat, t), mse(r_hat, r)), ops::scale(mse(n_hat, n), w.alpha));
  const Var grads =
      ops::add(ops::add(gradient_l1(t_hat, t), gradient_l1(r_hat, r)), ops::scale(gradient_l1(n_hat, n), w.alpha));
  return ops::add(spatial, ops::scale(grads, w.beta));
}

Var exclusion_loss(const Var& t_hat, const Var& r_hat) {
  require_aligned(t_hat, r_hat, "exclusion_loss");
  require(t_hat.rank() == 3 && t_hat.dim(0) >= 4 && t_hat.dim(1) >= 4,
          "exclusion_loss: sides must be at least 4, got " + shape_string(t_hat.shape()));
  Var t = t_hat, r = r_hat, total;
  for (int n = 0; n < 3; ++n) {
    if (n > 0) {
      t = ops::downsample2x(t);
      r = ops::downsample2x(r);
    }
    const Gradients gt = grad_op(t), gr = grad_op(r);
    const Var level = ops::add(exclusion_direction(gt.dh, gr.dh), exclusion_direction(gt.dw, gr.dw));
    total = total.defined() ? ops::add(total, level) : level;
  }
  return ops::scale(total, 1.0 / 6.0);
}

std::vector<Var> IdentityExtractor::features(const Var& image) const { return std::vector<Var>(5, image); }

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, std::size_t channels) {
  require(channels >= 1, "random extractor: channels must be positive");
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t cin = i == 0 ? 3 : channels;
    std::uniform_real_distribution<double> dist(-std::sqrt(3.0 / (9.0 * cin)), std::sqrt(3.0 / (9.0 * cin)));
    Tensor w({3, 3, cin, channels}), b({channels});
    for (auto& v : w.data()) v = dist(rng);
    for (auto& v : b.data()) v = 0.1 * dist(rng);
    layers_.push_back({Var::constant(std::move(w)), Var::constant(std::move(b))});
  }
}

std::vector<Var> RandomConvExtractor::features(const Var& image) const {
  std::vector<Var> taps;
  Var x = image;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if ((i == 2 || i == 4) && x.dim(0) >= 2 && x.dim(1) >= 2) x = ops::downsample2x(x);
    x = ops::relu(ops::conv2d(x, layers_[i].w, layers_[i].b, 1, 1));
    taps.push_back(x);
  }
  return taps;
}

Var perceptual_loss(const Var& t_hat, const Var& t, const FeatureExtractor& extractor,
                    const std::array<double, 5>& omega) {
  require_aligned(t_hat, t, "perceptual_loss");
  const auto a = extractor.features(t_hat), b = extractor.features(t);
  require(a.size() == 5 && b.size() == 5,
          "perceptual_loss: extractor must expose 5 taps, got " + std::to_string(a.size()));
  Var total;
  for (std::size_t i = 0; i < 5; ++i) {
    const Var term = ops::scale(l1(a[i], b[i]), omega[i]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Var reconstruction_loss(const Var& image, const Var& t_hat, const Var& r_hat, const Var& n_hat) {
  require_aligned(image, t_hat, "reconstruction_loss");
  require_aligned(image, r_hat, "reconstruction_loss");
  require_aligned(image, n_hat, "reconstruction_loss");
  return ops::mean(ops::abs(ops::sub(ops::sub(ops::sub(image, t_hat), r_hat), n_hat)));
}

LossReport LossTerms::report() const {
  LossReport r;
  r.content = content.value()[0];
  r.exclusion = exclusion.value()[0];
  r.perceptual = perceptual.value()[0];
  r.reconstruction = reconstruction.value()[0];
  r.total = total.value()[0];
  return r;
}

LossTerms total_loss(const Var& t_hat, const Var& r_hat, const Var& n_hat, const Image& mixture,
                     const labels::LabelTriplet& labels, const FeatureExtractor& extractor, const LossWeights& w) {
  LossTerms terms;
  const Var image = Var::constant(mixture.pixels());
  terms.content = content_loss(t_hat, r_hat, n_hat, labels, w);
  terms.exclusion = exclusion_loss(t_hat, r_hat);
  terms.perceptual = perceptual_loss(t_hat, Var::constant(labels.transmission.pixels()), extractor, w.omega);
  terms.reconstruction = reconstruction_loss(image, t_hat, r_hat, n_hat);
  terms.total = ops::add(ops::add(terms.content, terms.exclusion),
                         ops::add(ops::scale(terms.perceptual, w.lambda1), ops::scale(terms.reconstruction, w.lambda2)));
  return terms;
}

}  // namespace gfrrn::losses
