#include "gfrrn/frequency.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <vector>

#include "gfrrn/error.hpp"
#include "gfrrn/ops.hpp"

namespace gfrrn::freq {

namespace {

using Complex = std::complex<double>;

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

/// In-place 2-D DFT over every channel of an interleaved (H, W, C) buffer.
/// Unnormalised in both directions.
void dft2d(std::vector<Complex>& buf, std::size_t h, std::size_t w, std::size_t c, bool inverse) {
  const int n[2] = {static_cast<int>(h), static_cast<int>(w)};
  auto* data = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_many_dft(2, n, static_cast<int>(c), data, nullptr, static_cast<int>(c), 1, data, nullptr,
                              static_cast<int>(c), 1, inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
  }
  if (!plan) throw NumericError("fftw: planning failed");
  fftw_execute(plan);
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

std::vector<Complex> to_complex(const Tensor& t) {
  std::vector<Complex> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i];
  return out;
}

double mask_value(MaskKind kind, double wx, double wy, const std::array<double, 2>& p) {
  if (kind == MaskKind::kRectangular) return (std::abs(wx) <= p[0] && std::abs(wy) <= p[1]) ? 1.0 : 0.0;
  return std::exp(-0.5 * (wx * wx / (p[0] * p[0]) + wy * wy / (p[1] * p[1])));
}

/// Mask in natural DFT order, (H, W).
std::vector<double> natural_mask(MaskKind kind, std::size_t h, std::size_t w, const std::array<double, 2>& p) {
  std::vector<double> m(h * w);
  for (std::size_t ky = 0; ky < h; ++ky)
    for (std::size_t kx = 0; kx < w; ++kx)
      m[ky * w + kx] = mask_value(kind, bin_frequency(kx, w), bin_frequency(ky, h), p);
  return m;
}

void check_params(const std::array<double, 2>& p, const char* who) {
  if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
    throw NumericError(std::string(who) + ": non-finite mask parameters");
  if (!(p[0] > 0.0) || !(p[1] > 0.0))
    throw InvalidArgument(std::string(who) + ": mask parameters must be positive");
}

}  // namespace

const char* to_string(MaskKind kind) { return kind == MaskKind::kGaussian ? "gaussian" : "rectangular"; }

MaskKind parse_mask_kind(const std::string& s) {
  if (s == "gaussian") return MaskKind::kGaussian;
  if (s == "rectangular" || s == "hard") return MaskKind::kRectangular;
  throw InvalidArgument("unknown mask kind '" + s + "' (gaussian, rectangular)");
}

double bin_frequency(std::size_t k, std::size_t n) {
  const auto signed_k = static_cast<double>(k >= (n + 1) / 2 ? static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(n)
                                                              : static_cast<std::ptrdiff_t>(k));
  return 2.0 * std::numbers::pi * signed_k / static_cast<double>(n);
}

double FrequencyMask::at_bin(std::size_t ky, std::size_t kx) const {
  const std::size_t h = height(), w = width();
  return grid[((ky + h / 2) % h) * w + (kx + w / 2) % w];
}

FrequencyMask build_mask(MaskKind kind, std::size_t height, std::size_t width, std::array<double, 2> params) {
  require(height >= 2 && width >= 2, "build_mask: grid must be at least 2 x 2");
  check_params(params, "build_mask");
  FrequencyMask mask;
  mask.kind = kind;
  mask.params = params;
  mask.grid = Tensor({height, width});
  const auto natural = natural_mask(kind, height, width, params);
  for (std::size_t ky = 0; ky < height; ++ky)
    for (std::size_t kx = 0; kx < width; ++kx)
      mask.grid[((ky + height / 2) % height) * width + (kx + width / 2) % width] = natural[ky * width + kx];
  return mask;
}

Tensor impulse_response(const FrequencyMask& mask) {
  const std::size_t h = mask.height(), w = mask.width();
  std::vector<Complex> buf(h * w);
  for (std::size_t ky = 0; ky < h; ++ky)
    for (std::size_t kx = 0; kx < w; ++kx) buf[ky * w + kx] = mask.at_bin(ky, kx);
  dft2d(buf, h, w, 1, true);
  const double inv_n = 1.0 / static_cast<double>(h * w);
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Complex v = buf[y * w + x] * inv_n;
      if (std::abs(v.imag()) > 1e-9) throw NumericError("impulse_response: mask is not conjugate-symmetric");
      out[((y + h / 2) % h) * w + (x + w / 2) % w] = v.real();
    }
  return out;
}

double ringing_metric(const Tensor& response) {
  const double peak = response.max();
  if (!(peak > 0.0)) throw NumericError("ringing_metric: impulse response has no positive peak");
  return std::max(0.0, -response.min()) / peak;
}

double ringing_metric(const FrequencyMask& mask) { return ringing_metric(impulse_response(mask)); }

FilterSummary summarize(const FrequencyMask& mask) {
  const Tensor h = impulse_response(mask);
  return {ringing_metric(h), h.min(), h.max()};
}

Var fft_lowpass(const Var& x, const Var& sigma, MaskKind kind) {
  require(x.rank() == 3 && x.dim(0) >= 2 && x.dim(1) >= 2,
          "fft_lowpass: expected (H, W, C) with H, W >= 2, got " + shape_string(x.shape()));
  require(sigma.size() == 2, "fft_lowpass: sigma must hold two values");
  const std::array<double, 2> p{sigma.value()[0], sigma.value()[1]};
  check_params(p, "fft_lowpass");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::vector<double> mask = natural_mask(kind, h, w, p);
  const double inv_n = 1.0 / static_cast<double>(h * w);

  std::vector<Complex> spectrum = to_complex(x.value());
  dft2d(spectrum, h, w, c, false);
  std::vector<Complex> filtered(spectrum.size());
  for (std::size_t i = 0; i < filtered.size(); ++i) filtered[i] = spectrum[i] * mask[i / c];
  dft2d(filtered, h, w, c, true);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = filtered[i].real() * inv_n;

  return make_result(std::move(out), {x, sigma},
                     [=, spectrum = std::move(spectrum)](Node& self) {
                       Node* px = self.parents[0].get();
                       Node* ps = self.parents[1].get();
                       std::vector<Complex> g = to_complex(self.grad);
                       dft2d(g, h, w, c, false);
                       if (ps->requires_grad && kind == MaskKind::kGaussian) {
                         double dsx = 0.0, dsy = 0.0;
                         for (std::size_t ky = 0; ky < h; ++ky) {
                           const double wy = bin_frequency(ky, h);
                           for (std::size_t kx = 0; kx < w; ++kx) {
                             const double wx = bin_frequency(kx, w);
                             const std::size_t bin = ky * w + kx;
                             double dm = 0.0;
                             for (std::size_t ch = 0; ch < c; ++ch)
                               dm += (spectrum[bin * c + ch] * std::conj(g[bin * c + ch])).real();
                             dm *= inv_n * mask[bin];
                             dsx += dm * wx * wx / (p[0] * p[0] * p[0]);
                             dsy += dm * wy * wy / (p[1] * p[1] * p[1]);
                           }
                         }
                         Tensor& gs = ps->grad_buffer();
                         gs[0] += dsx;
                         gs[1] += dsy;
                       }
                       if (px->requires_grad) {
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i / c];
                         dft2d(g, h, w, c, true);
                         Tensor& gx = px->grad_buffer();
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i].real() * inv_n;
                       }
                     });
}

BandSplit fmim_split(const Var& x, const Var& sigma, MaskKind kind) {
  Var low = fft_lowpass(x, sigma, kind);
  return {low, ops::sub(x, low)};
}

std::pair<Tensor, Tensor> fmim_split(const Tensor& x, std::array<double, 2> sigma, MaskKind kind) {
  NoGradGuard no_grad;
  const BandSplit s =
      fmim_split(Var::constant(x), Var::constant(Tensor({2}, std::vector<double>{sigma[0], sigma[1]})), kind);
  return {s.low.value(), s.high.value()};
}

// ---------------------------------------------------------------- G-AFLB

Gaflb::Gaflb(const Scope& scope, const GaflbConfig& cfg) : cfg_(cfg) {
  require(cfg.sigma_min > 0.0 && cfg.sigma_max > cfg.sigma_min, "gaflb: need 0 < sigma_min < sigma_max");
  const std::size_t c = cfg.channels, hid = cfg.head_hidden;
  const Scope head = scope.sub("sigma_head");
  head_conv_w_ = head.param("conv.weight", {3, 3, 3, hid}, Init::fan_in(27));
  head_conv_b_ = head.param("conv.bias", {hid}, Init::zeros());
  head_fc_w_ = head.param("fc.weight", {hid, 2}, Init::fan_in(hid));
  head_fc_b_ = head.param("fc.bias", {2}, Init::zeros());

  const Scope enh = scope.sub("enhance");
  enhance_w_ = enh.param("proj.weight", {3, c}, Init::fan_in(3));
  enhance_b_ = enh.param("proj.bias", {c}, Init::zeros());
  enhance_conv_w_ = enh.param("conv.weight", {3, 3, c, c}, Init::fan_in(9 * c));
  enhance_conv_b_ = enh.param("conv.bias", {c}, Init::zeros());

  auto make_ca = [&](const std::string& name) {
    const Scope s = scope.sub(name);
    CrossAttention ca;
    ca.wq = s.param("q.weight", {c, c}, Init::fan_in(c));
    ca.wk = s.param("k.weight", {c, c}, Init::fan_in(c));
    ca.wv = s.param("v.weight", {c, c}, Init::fan_in(c));
    ca.temperature = s.param("temperature", {1}, Init::constant(1.0));
    return ca;
  };
  low_ = make_ca("cross_low");
  high_ = make_ca("cross_high");

  fuse_w_ = scope.param("fuse.weight", {2 * c, c}, Init::zeros());
  fuse_b_ = scope.param("fuse.bias", {c}, Init::zeros());
}

Var Gaflb::predict_sigma(const Var& image) const {
  Var h = ops::gelu(ops::conv2d(image, head_conv_w_, head_conv_b_, 1, 1));
  const std::size_t pixels = h.dim(0) * h.dim(1);
  Var pooled = ops::mean_axis(ops::reshape(h, {pixels, cfg_.head_hidden}), 0);  // (hidden)
  Var z = ops::linear(ops::reshape(pooled, {1, cfg_.head_hidden}), head_fc_w_, head_fc_b_);
  // Smooth clamp into [sigma_min, sigma_max].
  Var s = ops::shift(ops::scale(ops::sigmoid(ops::reshape(z, {2})), cfg_.sigma_max - cfg_.sigma_min), cfg_.sigma_min);
  return s;
}

Var Gaflb::cross_attend(const CrossAttention& ca, const Var& query, const Var& band) const {
  const std::size_t c = cfg_.channels;
  const std::size_t tokens = query.size() / c;
  Var q = ops::linear(ops::reshape(query, {tokens, c}), ca.wq, Var());
  Var band_flat = ops::reshape(band, {tokens, c});
  Var k = ops::linear(band_flat, ca.wk, Var());
  Var v = ops::linear(band_flat, ca.wv, Var());
  // Channel-wise attention: (C, C) affinities over L2-normalised spatial profiles.
  Var qn = ops::l2_normalize(q, 0);
  Var kn = ops::l2_normalize(k, 0);
  Var attn = ops::softmax(ops::mul_scalar(ops::matmul(qn, kn, true, false), ca.temperature));
  return ops::matmul(v, attn, false, true);  // (L, C)
}

Var Gaflb::forward(const Var& x_in, const Tensor& image, GaflbTrace* trace) const {
  require(x_in.rank() == 3 && x_in.dim(2) == cfg_.channels,
          "gaflb: expected (H, W, " + std::to_string(cfg_.channels) + ") features, got " + shape_string(x_in.shape()));
  require(image.rank() == 3 && image.dim(2) == 3 && image.dim(0) == x_in.dim(0) && image.dim(1) == x_in.dim(1),
          "gaflb: image " + shape_string(image.shape()) + " does not match feature resolution " +
              shape_string(x_in.shape()));
  const std::size_t h = x_in.dim(0), w = x_in.dim(1), c = cfg_.channels;
  const Var img = Var::constant(image);

  Var sigma_px = predict_sigma(img);
  Var ones = Var::constant(Tensor({2}, 1.0));
  Var sigma_freq = ops::div(ones, sigma_px);

  Var enhanced = ops::linear(img, enhance_w_, enhance_b_);
  enhanced = ops::conv2d(enhanced, enhance_conv_w_, enhance_conv_b_, 1, 1);
  const BandSplit bands = fmim_split(enhanced, sigma_freq, cfg_.mask);

  Var x_low = cross_attend(low_, x_in, bands.low);
  Var x_high = cross_attend(high_, x_in, bands.high);
  Var fused = ops::linear(ops::concat({x_low, x_high}, 1), fuse_w_, fuse_b_);
  if (trace) {
    trace->sigma_pixels = sigma_px.value();
    trace->low = bands.low.value();
    trace->high = bands.high.value();
  }
  return ops::add(x_in, ops::reshape(fused, {h, w, c}));
}

}  // namespace gfrrn::freq
