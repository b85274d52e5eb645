#pragma once

#include <cstdint>
#include <filesystem>

#include "gfrrn/image.hpp"

namespace gfrrn::labels {

/// Supervision set for one pair. transmission + reflection_label +
/// residual_label reproduces the mixture exactly; the two labels are signed
/// and never clipped.
struct LabelTriplet {
  Image transmission;
  Tensor reflection_label;
  Tensor residual_label;
};

/// Parameters of one synthetic mixture I = clip(T + w * blur(R, sigma)).
struct SynthesisParams {
  double reflection_blur_sigma = 2.0;
  double reflection_weight = 0.7;
  std::uint64_t rng_seed = 0;

  static constexpr double kMinBlurSigma = 0.2;
  static constexpr double kMaxBlurSigma = 4.0;
  static constexpr double kMinWeight = 0.4;
  static constexpr double kMaxWeight = 1.0;

  /// Draws sigma ~ U[0.2, 4.0] and weight ~ U[0.4, 1.0] from the seed.
  static SynthesisParams sample(std::uint64_t seed);
  void validate() const;
};

/// Which reflection supervision to derive from a pair (label ablation).
enum class ReflectionLabel {
  kUnified,     // (I - T) low-passed; residual takes the rest
  kDifference,  // I - T itself; residual label is zero
  kReflection,  // the true added reflection (synthetic pairs only)
};

ReflectionLabel parse_reflection_label(const std::string& s);
const char* to_string(ReflectionLabel mode);

/// Default label low-pass sigma: 2.0 px at 384 px, scaled with min(H, W).
double default_label_sigma(std::size_t height, std::size_t width);

/// Normalised Gaussian blur, radius ceil(3 sigma), reflect padding, applied
/// per channel to an (H, W, C) array. Throws InvalidArgument for sigma <= 0.
Tensor lowpass_2d(const Tensor& hwc, double sigma);

LabelTriplet generate_unified_labels(const Image& mixture, const Image& transmission, double sigma);

/// Builds labels according to `mode`. `reflection_component` is required for
/// kReflection and ignored otherwise.
LabelTriplet make_labels(const Image& mixture, const Image& transmission, ReflectionLabel mode, double sigma,
                         const Tensor* reflection_component = nullptr);

struct Mixture {
  Image mixture;
  LabelTriplet labels;
  /// w * blur(R) before clipping; the kReflection ablation label.
  Tensor reflection_component;
};

/// I = clip(T + w * blur(R, sigma_r), 0, 1); labels are computed on the
/// clipped I with the given label sigma (<= 0 selects the default).
Mixture synthesize_mixture(const Image& transmission, const Image& reflection, const SynthesisParams& params,
                           double label_sigma = 0.0);

/// Writes T.png (8-bit), R.png (8-bit, clipped for viewing) and N.png
/// (16-bit offset-encoded signed residual) into `dir`.
void write_label_cache(const std::filesystem::path& dir, const LabelTriplet& labels);

}  // namespace gfrrn::labels
