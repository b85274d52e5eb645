#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gfrrn/image.hpp"
#include "gfrrn/params.hpp"

namespace gfrrn::testing {

/// Plain agent attention written with explicit loops: pooled agents, two
/// softmax stages, 3x3 depthwise convolution of V, output projection.
inline Tensor agent_attention_oracle(const Tensor& x, const ParamStore& s, const std::string& pre, std::size_t heads,
                                     std::size_t wh, std::size_t ww, std::size_t ah, std::size_t aw) {
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2), d = c / heads, na = ah * aw;
  auto proj = [&](const std::string& name) {
    const Tensor& w = s.get(pre + name + ".weight").value();
    const Tensor& bias = s.get(pre + name + ".bias").value();
    Tensor out({b, l, c});
    for (std::size_t i = 0; i < b * l; ++i)
      for (std::size_t o = 0; o < c; ++o) {
        double acc = bias[o];
        for (std::size_t k = 0; k < c; ++k) acc += x[i * c + k] * w[k * c + o];
        out[i * c + o] = acc;
      }
    return out;
  };
  const Tensor q = proj("q"), k = proj("k"), v = proj("v");
  Tensor agents({b, na, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ay = 0; ay < ah; ++ay)
      for (std::size_t ax = 0; ax < aw; ++ax) {
        const std::size_t y0 = ay * wh / ah, y1 = ((ay + 1) * wh + ah - 1) / ah;
        const std::size_t x0 = ax * ww / aw, x1 = ((ax + 1) * ww + aw - 1) / aw;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) acc += q[(n * l + y * ww + xx) * c + ch];
          agents[(n * na + ay * aw + ax) * c + ch] = acc / double((y1 - y0) * (x1 - x0));
        }
      }
  const double scale = 1.0 / std::sqrt(double(d));
  Tensor attn({b, l, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      std::vector<double> va(na * d, 0.0);
      for (std::size_t a = 0; a < na; ++a) {
        std::vector<double> logit(l);
        for (std::size_t t = 0; t < l; ++t) {
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e) dot += agents[(n * na + a) * c + hd * d + e] * k[(n * l + t) * c + hd * d + e];
          logit[t] = dot * scale;
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0.0;
        for (auto& vv : logit) z += (vv = std::exp(vv - mx));
        for (std::size_t t = 0; t < l; ++t)
          for (std::size_t e = 0; e < d; ++e) va[a * d + e] += logit[t] / z * v[(n * l + t) * c + hd * d + e];
      }
      for (std::size_t t = 0; t < l; ++t) {
        std::vector<double> logit(na);
        for (std::size_t a = 0; a < na; ++a) {
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e) dot += q[(n * l + t) * c + hd * d + e] * agents[(n * na + a) * c + hd * d + e];
          logit[a] = dot * scale;
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0.0;
        for (auto& vv : logit) z += (vv = std::exp(vv - mx));
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0.0;
          for (std::size_t a = 0; a < na; ++a) acc += logit[a] / z * va[a * d + e];
          attn[(n * l + t) * c + hd * d + e] = acc;
        }
      }
    }
  const Tensor& dw = s.get(pre + "dwc.weight").value();
  const Tensor& db = s.get(pre + "dwc.bias").value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < wh; ++y)
      for (std::size_t xx = 0; xx < ww; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = db[ch];
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              const long sy = long(y) + ky, sx = long(xx) + kx;
              if (sy < 0 || sx < 0 || sy >= long(wh) || sx >= long(ww)) continue;
              acc += dw[((ky + 1) * 3 + (kx + 1)) * c + ch] * v[(n * l + sy * ww + sx) * c + ch];
            }
          attn[(n * l + y * ww + xx) * c + ch] += acc;
        }
  const Tensor& wo = s.get(pre + "proj.weight").value();
  const Tensor& bo = s.get(pre + "proj.bias").value();
  Tensor out({b, l, c});
  for (std::size_t i = 0; i < b * l; ++i)
    for (std::size_t o = 0; o < c; ++o) {
      double acc = bo[o];
      for (std::size_t kk = 0; kk < c; ++kk) acc += attn[i * c + kk] * wo[kk * c + o];
      out[i * c + o] = acc;
    }
  return out;
}

inline double psnr_oracle(const Image& a, const Image& b) {
  long double se = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < a.height(); ++y)
    for (std::size_t x = 0; x < a.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c, ++n) {
        const long double d = a.at(y, x, c) - b.at(y, x, c);
        se += d * d;
      }
  return double(10.0L * std::log10(1.0L / (se / n)));
}

// Direct 2-D weighted statistics per window position.
inline double ssim_oracle(const Image& a, const Image& b) {
  double w[11][11], norm = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) norm += w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + 11 <= a.height(); ++y)
      for (std::size_t x = 0; x + 11 <= a.width(); ++x, ++count) {
        double mx = 0, my = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            mx += w[i][j] / norm * a.at(y + i, x + j, c);
            my += w[i][j] / norm * b.at(y + i, x + j, c);
          }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double dx = a.at(y + i, x + j, c) - mx, dy = b.at(y + i, x + j, c) - my;
            vx += w[i][j] / norm * dx * dx;
            vy += w[i][j] / norm * dy * dy;
            cov += w[i][j] / norm * dx * dy;
          }
        sum += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    total += sum / double(count);
  }
  return total / 3;
}

}  // namespace gfrrn::testing
