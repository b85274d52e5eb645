#pragma once

#include <random>

#include "gfrrn/autodiff.hpp"
#include "gfrrn/image.hpp"
#include "gfrrn/ops.hpp"
#include "gfrrn/params.hpp"

namespace gfrrn::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  return Image(random_tensor({h, w, 3}, seed, 0.0, 1.0));
}

inline Var random_leaf(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t = random_tensor(std::move(shape), seed, -scale, scale);
  return Var::leaf(std::move(t), true);
}

/// Weighted sum with fixed random weights, so gradient checks see a generic
/// cotangent rather than all-ones.
inline Var probe_loss(const Var& y, std::uint64_t seed = 99) {
  Var w = Var::constant(random_tensor(y.shape(), seed));
  return ops::sum(ops::mul(y, w));
}

/// Fills every all-zero parameter with small random values, opening the
/// zero-initialised residual branches.
inline void randomise_zero_params(ParamStore& store, double scale = 0.1, std::uint64_t seed = 7) {
  for (auto& p : store.entries()) {
    bool zero = true;
    for (double v : p.var.value().data()) zero = zero && v == 0.0;
    if (zero) p.var.mutable_value() = random_tensor(p.var.shape(), fnv1a(p.name, seed), -scale, scale);
  }
}

}  // namespace gfrrn::testing
