#include "gfrrn/labels.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gfrrn/error.hpp"

namespace gfrrn::labels {

SynthesisParams SynthesisParams::sample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sigma(kMinBlurSigma, kMaxBlurSigma);
  std::uniform_real_distribution<double> weight(kMinWeight, kMaxWeight);
  SynthesisParams p;
  p.reflection_blur_sigma = sigma(rng);
  p.reflection_weight = weight(rng);
  p.rng_seed = seed;
  return p;
}

void SynthesisParams::validate() const {
  require(reflection_blur_sigma >= kMinBlurSigma && reflection_blur_sigma <= kMaxBlurSigma,
          "synthesis: blur sigma " + std::to_string(reflection_blur_sigma) + " outside [0.2, 4.0]");
  require(reflection_weight >= 0.0 && reflection_weight <= 1.0,
          "synthesis: reflection weight " + std::to_string(reflection_weight) + " outside [0, 1]");
}

ReflectionLabel parse_reflection_label(const std::string& s) {
  if (s == "unified") return ReflectionLabel::kUnified;
  if (s == "difference") return ReflectionLabel::kDifference;
  if (s == "reflection") return ReflectionLabel::kReflection;
  throw InvalidArgument("unknown reflection label mode '" + s + "' (unified, difference, reflection)");
}

const char* to_string(ReflectionLabel mode) {
  switch (mode) {
    case ReflectionLabel::kUnified: return "unified";
    case ReflectionLabel::kDifference: return "difference";
    case ReflectionLabel::kReflection: return "reflection";
  }
  return "?";
}

double default_label_sigma(std::size_t height, std::size_t width) {
  return 2.0 * static_cast<double>(std::min(height, width)) / 384.0;
}

Tensor lowpass_2d(const Tensor& hwc, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("lowpass_2d: sigma must be positive, got " + std::to_string(sigma));
  require(hwc.rank() == 3, "lowpass_2d: expected (H, W, C), got " + shape_string(hwc.shape()));
  require(hwc.all_finite(), "lowpass_2d: non-finite input");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  if (radius == 0) return hwc;

  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : kernel) v /= total;

  const std::size_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor tmp({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(x) + k, w);
        const double kv = kernel[static_cast<std::size_t>(k + radius)];
        for (std::size_t ch = 0; ch < c; ++ch) tmp[(y * w + x) * c + ch] += kv * hwc[(y * w + sx) * c + ch];
      }
  Tensor out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
      const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) + k, h);
      const double kv = kernel[static_cast<std::size_t>(k + radius)];
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] += kv * tmp[(sy * w + x) * c + ch];
    }
  return out;
}

namespace {

Tensor difference(const Image& a, const Image& b) {
  Tensor d = a.pixels();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b.pixels()[i];
  return d;
}

}  // namespace

LabelTriplet make_labels(const Image& mixture, const Image& transmission, ReflectionLabel mode, double sigma,
                         const Tensor* reflection_component) {
  require(mixture.same_size(transmission), "labels: I and T differ in size");
  const Tensor diff = difference(mixture, transmission);
  LabelTriplet out;
  out.transmission = transmission;
  switch (mode) {
    case ReflectionLabel::kUnified:
      out.reflection_label = lowpass_2d(diff, sigma);
      break;
    case ReflectionLabel::kDifference:
      out.reflection_label = diff;
      break;
    case ReflectionLabel::kReflection:
      require(reflection_component != nullptr && reflection_component->shape() == diff.shape(),
              "labels: reflection mode needs the reflection component of a synthetic pair");
      out.reflection_label = *reflection_component;
      break;
  }
  out.residual_label = diff;
  for (std::size_t i = 0; i < diff.size(); ++i) out.residual_label[i] -= out.reflection_label[i];
  return out;
}

LabelTriplet generate_unified_labels(const Image& mixture, const Image& transmission, double sigma) {
  return make_labels(mixture, transmission, ReflectionLabel::kUnified, sigma);
}

Mixture synthesize_mixture(const Image& transmission, const Image& reflection, const SynthesisParams& params,
                           double label_sigma) {
  require(transmission.same_size(reflection), "synthesis: T and R differ in size");
  params.validate();
  Tensor component = lowpass_2d(reflection.pixels(), params.reflection_blur_sigma);
  for (auto& v : component.data()) v *= params.reflection_weight;

  Tensor mix = transmission.pixels();
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = std::clamp(mix[i] + component[i], 0.0, 1.0);

  Mixture out;
  out.mixture = Image(std::move(mix));
  const double sigma =
      label_sigma > 0.0 ? label_sigma : default_label_sigma(transmission.height(), transmission.width());
  out.labels = generate_unified_labels(out.mixture, transmission, sigma);
  out.reflection_component = std::move(component);
  return out;
}

void write_label_cache(const std::filesystem::path& dir, const LabelTriplet& labels) {
  std::filesystem::create_directories(dir);
  write_png(dir / "T.png", labels.transmission);
  write_png(dir / "R.png", Image(clip01(labels.reflection_label)));
  write_signed_png16(dir / "N.png", labels.residual_label);
}

}  // namespace gfrrn::labels
