#pragma once

#include <array>
#include <optional>

#include "gfrrn/autodiff.hpp"
#include "gfrrn/params.hpp"

namespace gfrrn::freq {

enum class MaskKind { kRectangular, kGaussian };

const char* to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& s);

/// Angular frequency (radians/sample, in [-pi, pi)) of DFT bin k of n.
double bin_frequency(std::size_t k, std::size_t n);

/// A real low-pass mask sampled on an H x W DFT grid.
///
/// `params` holds the cutoffs (w_cx, w_cy) for rectangular masks or the
/// widths (sigma_x, sigma_y) for gaussian masks, both in radians/sample;
/// x runs along the width axis. `grid` is stored centred (DC at
/// (H/2, W/2)), the layout used for display and for impulse responses.
struct FrequencyMask {
  MaskKind kind = MaskKind::kGaussian;
  std::array<double, 2> params{1.0, 1.0};
  Tensor grid;  // (H, W), values in [0, 1]

  std::size_t height() const { return grid.dim(0); }
  std::size_t width() const { return grid.dim(1); }
  /// Value at DFT bin (ky, kx) in natural (unshifted) order.
  double at_bin(std::size_t ky, std::size_t kx) const;
};

/// rectangular: 1 where |w_x| <= w_cx and |w_y| <= w_cy, else 0.
/// gaussian:    exp(-(w_x^2 / sigma_x^2 + w_y^2 / sigma_y^2) / 2).
/// Throws InvalidArgument for H or W < 2 or non-positive parameters.
FrequencyMask build_mask(MaskKind kind, std::size_t height, std::size_t width, std::array<double, 2> params);

/// Centred inverse DFT of the mask (delta response sits at (H/2, W/2)).
/// Throws NumericError if the imaginary residue exceeds 1e-9.
Tensor impulse_response(const FrequencyMask& mask);

/// Depth of the deepest negative lobe relative to the peak,
/// max(0, -min h) / max h. Zero means no ringing.
double ringing_metric(const FrequencyMask& mask);
double ringing_metric(const Tensor& response);

struct FilterSummary {
  double ringing = 0.0;
  double min_response = 0.0;
  double max_response = 0.0;
};
FilterSummary summarize(const FrequencyMask& mask);

/// Differentiable low-pass y = IDFT(M(sigma) . DFT(x)) per channel of an
/// (H, W, C) map. `sigma` holds the two mask parameters in radians/sample;
/// for gaussian masks gradients flow to both x and sigma, for rectangular
/// masks only to x.
Var fft_lowpass(const Var& x, const Var& sigma, MaskKind kind = MaskKind::kGaussian);

struct BandSplit {
  Var low;
  Var high;
};

/// Complementary split: low = fft_lowpass(x, sigma), high = x - low.
BandSplit fmim_split(const Var& x, const Var& sigma, MaskKind kind = MaskKind::kGaussian);
/// Convenience overload on plain arrays.
std::pair<Tensor, Tensor> fmim_split(const Tensor& x, std::array<double, 2> sigma,
                                     MaskKind kind = MaskKind::kGaussian);

struct GaflbConfig {
  std::size_t channels = 32;
  std::size_t head_hidden = 8;
  /// Spatial blur bounds in pixels at feature resolution. The mask width in
  /// frequency is the reciprocal of the predicted spatial sigma.
  double sigma_min = 0.5;
  double sigma_max = 8.0;
  MaskKind mask = MaskKind::kGaussian;
};

/// Values captured during one G-AFLB forward pass.
struct GaflbTrace {
  Tensor sigma_pixels;  // (2): spatial sigma along x, y
  Tensor low;           // (H, W, C)
  Tensor high;          // (H, W, C)
};

/// Gaussian adaptive frequency learning block.
///
/// A small head predicts a per-image blur (sigma_x, sigma_y) from the image,
/// an enhanced projection of the image is split into low/high bands, each band
/// modulates X_in through channel-wise cross attention (X_in as query), and a
/// zero-initialised 1x1 projection of the concatenated bands is added back:
///   X_out = X_in + fuse([X_low, X_high]).
class Gaflb {
 public:
  Gaflb() = default;
  Gaflb(const Scope& scope, const GaflbConfig& cfg);

  /// x_in: (H, W, C); image: (H, W, 3) already resampled to x_in's size.
  Var forward(const Var& x_in, const Tensor& image, GaflbTrace* trace = nullptr) const;

  /// Predicted spatial sigma for an image at feature resolution.
  Var predict_sigma(const Var& image) const;

  const GaflbConfig& config() const { return cfg_; }

 private:
  struct CrossAttention {
    Var wq, wk, wv, temperature;
  };
  Var cross_attend(const CrossAttention& ca, const Var& query, const Var& band) const;

  GaflbConfig cfg_;
  Var head_conv_w_, head_conv_b_, head_fc_w_, head_fc_b_;
  Var enhance_w_, enhance_b_, enhance_conv_w_, enhance_conv_b_;
  CrossAttention low_, high_;
  Var fuse_w_, fuse_b_;
};

}  // namespace gfrrn::freq
