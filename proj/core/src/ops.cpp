#include "gfrrn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include "gfrrn/error.hpp"

namespace gfrrn {

// ---------------------------------------------------------------- SparseMap

Tensor SparseMap::apply(const Tensor& in) const {
  require(in.size() == numel(in_shape), "sparse map: input " + shape_string(in.shape()) +
                                            " expected " + shape_string(in_shape));
  Tensor out(out_shape);
  const double* x = in.ptr();
  double* y = out.ptr();
  const std::size_t rows = out.size();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) acc += weights[e] * x[cols[e]];
    y[r] = acc;
  }
  return out;
}

Tensor SparseMap::apply_transpose(const Tensor& out_grad) const {
  Tensor in(in_shape);
  const double* g = out_grad.ptr();
  double* x = in.ptr();
  const std::size_t rows = numel(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) x[cols[e]] += weights[e] * gr;
  }
  return in;
}

SparseMapBuilder::SparseMapBuilder(Shape in_shape, Shape out_shape) {
  map_.in_shape = std::move(in_shape);
  map_.out_shape = std::move(out_shape);
  map_.row_ptr.reserve(numel(map_.out_shape) + 1);
  map_.row_ptr.push_back(0);
  map_.cols.reserve(numel(map_.out_shape));
  map_.weights.reserve(numel(map_.out_shape));
}

std::shared_ptr<const SparseMap> SparseMapBuilder::build() {
  require(map_.row_ptr.size() == numel(map_.out_shape) + 1,
          "sparse map builder: row count does not match output shape");
  return std::make_shared<const SparseMap>(std::move(map_));
}

// ---------------------------------------------------------------- gemm

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool transpose_a, bool transpose_b, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!transpose_a && !transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (transpose_a && !transpose_b) {
    // a stored (k, m)
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!transpose_a && transpose_b) {
    // b stored (n, k)
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] += acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

namespace ops {

namespace {

Node* parent(Node& self, std::size_t i) { return self.parents[i].get(); }

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Node* px = parent(self, 0);
    if (!px->requires_grad) return;
    Tensor& gx = px->grad_buffer();
    const Tensor& xv = px->value;
    const Tensor& yv = self.value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * df(xv[i], yv[i]);
  });
}

std::size_t trailing_check(const Var& x, const Var& b, const char* op) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  require(bs.size() <= xs.size() && std::equal(bs.rbegin(), bs.rend(), xs.rbegin()),
          std::string(op) + ": " + shape_string(bs) + " is not a trailing shape of " +
              shape_string(xs));
  return b.size();
}

struct Fibres {
  std::size_t outer, mid, inner;
};

Fibres fibres(const Shape& s, std::size_t axis) {
  require(axis < s.size(), "axis out of range for shape " + shape_string(s));
  Fibres f{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) f.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) f.inner *= s[i];
  return f;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node* p = parent(self, k);
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node* p = parent(self, k);
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      const double sgn = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sgn * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb->value[i];
    }
  });
}

Var add_trailing(const Var& x, const Var& b) {
  const std::size_t n = trailing_check(x, b, "add_trailing");
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return make_result(std::move(out), {x, b}, [n](Node& self) {
    Node* px = parent(self, 0);
    Node* pb = parent(self, 1);
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

Var mul_trailing(const Var& x, const Var& b) {
  const std::size_t n = trailing_check(x, b, "mul_trailing");
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % n];
  return make_result(std::move(out), {x, b}, [n](Node& self) {
    Node* px = parent(self, 0);
    Node* pb = parent(self, 1);
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i % n];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * px->value[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= s;
  return make_result(std::move(out), {x}, [s](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var shift(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v += s;
  return make_result(std::move(out), {x}, [](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  require(s.size() == 1, "mul_scalar: scalar operand has shape " + shape_string(s.shape()));
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.data()) v *= sv;
  return make_result(std::move(out), {x, s}, [](Node& self) {
    Node* px = parent(self, 0);
    Node* ps = parent(self, 1);
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      const double sv = ps->value[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
    }
    if (ps->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
      ps->grad_buffer()[0] += acc;
    }
  });
}

Var scale_batches(const Var& x, const Var& s) {
  require(x.rank() >= 1 && s.size() == x.dim(0),
          "scale_batches: " + shape_string(s.shape()) + " does not match batch of " +
              shape_string(x.shape()));
  const std::size_t batches = x.dim(0);
  const std::size_t per = x.size() / std::max<std::size_t>(batches, 1);
  Tensor out = x.value();
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] *= s.value()[b];
  return make_result(std::move(out), {x, s}, [batches, per](Node& self) {
    Node* px = parent(self, 0);
    Node* ps = parent(self, 1);
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t b = 0; b < batches; ++b)
        for (std::size_t i = 0; i < per; ++i) g[b * per + i] += ps->value[b] * self.grad[b * per + i];
    }
    if (ps->requires_grad) {
      Tensor& g = ps->grad_buffer();
      for (std::size_t b = 0; b < batches; ++b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < per; ++i) acc += self.grad[b * per + i] * px->value[b * per + i];
        g[b] += acc;
      }
    }
  });
}

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var abs(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sqrt(const Var& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var square(const Var& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sum(const Var& x) {
  return make_result(Tensor::scalar(x.value().sum()), {x}, [](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    const double gv = self.grad[0];
    for (auto& v : g.data()) v += gv;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.size());
  return make_result(Tensor::scalar(x.value().sum() / n), {x}, [n](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    const double gv = self.grad[0] / n;
    for (auto& v : g.data()) v += gv;
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const Fibres f = fibres(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  const double inv = 1.0 / static_cast<double>(f.mid);
  for (std::size_t o = 0; o < f.outer; ++o)
    for (std::size_t m = 0; m < f.mid; ++m)
      for (std::size_t i = 0; i < f.inner; ++i)
        out[o * f.inner + i] += xv[(o * f.mid + m) * f.inner + i] * inv;
  return make_result(std::move(out), {x}, [f, inv](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t o = 0; o < f.outer; ++o)
      for (std::size_t m = 0; m < f.mid; ++m)
        for (std::size_t i = 0; i < f.inner; ++i)
          g[(o * f.mid + m) * f.inner + i] += self.grad[o * f.inner + i] * inv;
  });
}

Var l2_normalize(const Var& x, std::size_t axis, double eps) {
  const Fibres f = fibres(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Tensor norms({f.outer * f.inner});
  for (std::size_t o = 0; o < f.outer; ++o)
    for (std::size_t i = 0; i < f.inner; ++i) {
      double ss = 0.0;
      for (std::size_t m = 0; m < f.mid; ++m) {
        const double v = xv[(o * f.mid + m) * f.inner + i];
        ss += v * v;
      }
      const double n = std::max(std::sqrt(ss), eps);
      norms[o * f.inner + i] = n;
      for (std::size_t m = 0; m < f.mid; ++m) {
        const std::size_t idx = (o * f.mid + m) * f.inner + i;
        out[idx] = xv[idx] / n;
      }
    }
  return make_result(std::move(out), {x}, [f, norms = std::move(norms), eps](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t o = 0; o < f.outer; ++o)
      for (std::size_t i = 0; i < f.inner; ++i) {
        const double n = norms[o * f.inner + i];
        double dot = 0.0;
        for (std::size_t m = 0; m < f.mid; ++m) {
          const std::size_t idx = (o * f.mid + m) * f.inner + i;
          dot += self.grad[idx] * self.value[idx];
        }
        const bool floored = n <= eps;
        for (std::size_t m = 0; m < f.mid; ++m) {
          const std::size_t idx = (o * f.mid + m) * f.inner + i;
          g[idx] += floored ? self.grad[idx] / n : (self.grad[idx] - self.value[idx] * dot) / n;
        }
      }
  });
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  require(a.rank() == 2 || a.rank() == 3, "matmul: lhs rank must be 2 or 3");
  require(b.rank() == 2 || b.rank() == 3, "matmul: rhs rank must be 2 or 3");
  const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
  require(ba == bb || ba == 1 || bb == 1, "matmul: batch mismatch " + shape_string(a.shape()) + " x " +
                                              shape_string(b.shape()));
  const std::size_t batches = std::max(ba, bb);
  const std::size_t ar = a.dim(a.rank() - 2), ac = a.dim(a.rank() - 1);
  const std::size_t br = b.dim(b.rank() - 2), bc = b.dim(b.rank() - 1);
  const std::size_t m = transpose_a ? ac : ar;
  const std::size_t k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br;
  const std::size_t n = transpose_b ? br : bc;
  require(k == kb, "matmul: inner dims differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));

  const bool out3 = a.rank() == 3 || b.rank() == 3;
  Tensor out(out3 ? Shape{batches, m, n} : Shape{m, n});
  const std::size_t sa = ba == 1 ? 0 : ar * ac;
  const std::size_t sb = bb == 1 ? 0 : br * bc;
  for (std::size_t i = 0; i < batches; ++i)
    gemm(a.value().ptr() + i * sa, b.value().ptr() + i * sb, out.ptr() + i * m * n, m, k, n, transpose_a,
         transpose_b, false);

  return make_result(std::move(out), {a, b},
                     [=](Node& self) {
                       Node* pa = parent(self, 0);
                       Node* pb = parent(self, 1);
                       const double* g = self.grad.ptr();
                       if (pa->requires_grad) {
                         double* ga = pa->grad_buffer().ptr();
                         for (std::size_t i = 0; i < batches; ++i) {
                           const double* bv = pb->value.ptr() + i * sb;
                           const double* gi = g + i * m * n;
                           double* gai = ga + i * sa;
                           if (!transpose_a) {
                             // dA (m,k) = G (m,n) . op(B)^T
                             gemm(gi, bv, gai, m, n, k, false, !transpose_b, true);
                           } else {
                             // dA (k,m) = op(B) (k,n) . G^T
                             gemm(bv, gi, gai, k, n, m, transpose_b, true, true);
                           }
                         }
                       }
                       if (pb->requires_grad) {
                         double* gb = pb->grad_buffer().ptr();
                         for (std::size_t i = 0; i < batches; ++i) {
                           const double* av = pa->value.ptr() + i * sa;
                           const double* gi = g + i * m * n;
                           double* gbi = gb + i * sb;
                           if (!transpose_b) {
                             // dB (k,n) = op(A)^T (k,m) . G
                             gemm(av, gi, gbi, k, m, n, !transpose_a, false, true);
                           } else {
                             // dB (n,k) = G^T (n,m) . op(A)
                             gemm(gi, av, gbi, n, m, k, true, transpose_a, true);
                           }
                         }
                       }
                     });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require(w.rank() == 2, "linear: weight must be rank 2");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  require(x.rank() >= 1 && x.shape().back() == in,
          "linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  if (bias.defined()) require(bias.size() == out_dim, "linear: bias size mismatch");
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  gemm(x.value().ptr(), w.value().ptr(), out.ptr(), rows, in, out_dim, false, false, false);
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bias.value()[j];
  std::vector<Var> parents{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [=](Node& self) {
    Node* px = parent(self, 0);
    Node* pw = parent(self, 1);
    const double* g = self.grad.ptr();
    if (px->requires_grad) gemm(g, pw->value.ptr(), px->grad_buffer().ptr(), rows, out_dim, in, false, true, true);
    if (pw->requires_grad) gemm(px->value.ptr(), g, pw->grad_buffer().ptr(), in, rows, out_dim, true, false, true);
    if (has_bias) {
      Node* pb = parent(self, 2);
      if (pb->requires_grad) {
        Tensor& gb = pb->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
      }
    }
  });
}

Var softmax(const Var& x) {
  require(x.rank() >= 1, "softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.ptr() + r * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= s;
  }
  return make_result(std::move(out), {x}, [n, rows](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.ptr() + r * n;
      const double* gy = self.grad.ptr() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t c = x.shape().back();
  require(gamma.size() == c && beta.size() == c, "layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / c;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  Tensor inv_std({rows});
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node* px = parent(self, 0);
                       Node* pg = parent(self, 1);
                       Node* pb = parent(self, 2);
                       const Tensor& g = self.grad;
                       if (pg->requires_grad) {
                         Tensor& gg = pg->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * xhat[i];
                       }
                       if (pb->requires_grad) {
                         Tensor& gb = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
                       }
                       if (px->requires_grad) {
                         Tensor& gx = px->grad_buffer();
                         const double inv_c = 1.0 / static_cast<double>(c);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = g[r * c + j] * pg->value[j];
                             m1 += dh;
                             m2 += dh * xhat[r * c + j];
                           }
                           m1 *= inv_c;
                           m2 *= inv_c;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = g[r * c + j] * pg->value[j];
                             gx[r * c + j] += inv_std[r] * (dh - m1 - xhat[r * c + j] * m2);
                           }
                         }
                       }
                     });
}

namespace {

struct ImageDims {
  std::size_t batch, height, width, channels;
};

ImageDims image_dims(const Var& x, const char* op) {
  require(x.rank() == 3 || x.rank() == 4, std::string(op) + ": expected (B,H,W,C) or (H,W,C), got " +
                                              shape_string(x.shape()));
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
  const ImageDims d = image_dims(x, "conv2d");
  require(w.rank() == 4 && w.dim(0) == w.dim(1) && w.dim(2) == d.channels,
          "conv2d: weight " + shape_string(w.shape()) + " incompatible with input " + shape_string(x.shape()));
  require(stride >= 1, "conv2d: stride must be positive");
  const std::size_t k = w.dim(0), cin = d.channels, cout = w.dim(3);
  if (bias.defined()) require(bias.size() == cout, "conv2d: bias size mismatch");
  require(d.height + 2 * pad >= k && d.width + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const std::size_t ho = (d.height + 2 * pad - k) / stride + 1;
  const std::size_t wo = (d.width + 2 * pad - k) / stride + 1;
  Shape out_shape = x.rank() == 3 ? Shape{ho, wo, cout} : Shape{d.batch, ho, wo, cout};
  Tensor out(out_shape);
  const double* xv = x.value().ptr();
  const double* wv = w.value().ptr();
  double* ov = out.ptr();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* o = ov + ((b * ho + oy) * wo + ox) * cout;
        if (bias.defined())
          for (std::size_t co = 0; co < cout; ++co) o[co] = bias.value()[co];
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
            const double* xi = xv + ((b * d.height + static_cast<std::size_t>(iy)) * d.width +
                                     static_cast<std::size_t>(ix)) * cin;
            const double* wk = wv + (ky * k + kx) * cin * cout;
            gemm(xi, wk, o, 1, cin, cout, false, false, true);
          }
        }
      }
  std::vector<Var> parents{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [=](Node& self) {
    Node* px = parent(self, 0);
    Node* pw = parent(self, 1);
    const double* g = self.grad.ptr();
    double* gx = px->requires_grad ? px->grad_buffer().ptr() : nullptr;
    double* gw = pw->requires_grad ? pw->grad_buffer().ptr() : nullptr;
    const double* xv = px->value.ptr();
    const double* wv = pw->value.ptr();
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double* go = g + ((b * ho + oy) * wo + ox) * cout;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
              const std::size_t xoff = ((b * d.height + static_cast<std::size_t>(iy)) * d.width +
                                        static_cast<std::size_t>(ix)) * cin;
              const std::size_t woff = (ky * k + kx) * cin * cout;
              // dx (1,cin) += go (1,cout) . W^T ; dW (cin,cout) += x^T . go
              if (gx) gemm(go, wv + woff, gx + xoff, 1, cout, cin, false, true, true);
              if (gw) gemm(xv + xoff, go, gw + woff, cin, 1, cout, true, false, true);
            }
          }
        }
    if (has_bias) {
      Node* pb = parent(self, 2);
      if (pb->requires_grad) {
        Tensor& gb = pb->grad_buffer();
        const std::size_t pixels = self.grad.size() / cout;
        for (std::size_t p = 0; p < pixels; ++p)
          for (std::size_t co = 0; co < cout; ++co) gb[co] += g[p * cout + co];
      }
    }
  });
}

Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias) {
  const ImageDims d = image_dims(x, "depthwise_conv2d");
  require(w.rank() == 3 && w.dim(0) == w.dim(1) && w.dim(0) % 2 == 1 && w.dim(2) == d.channels,
          "depthwise_conv2d: weight " + shape_string(w.shape()) + " incompatible with input " +
              shape_string(x.shape()));
  const std::size_t k = w.dim(0), c = d.channels;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  if (bias.defined()) require(bias.size() == c, "depthwise_conv2d: bias size mismatch");
  Tensor out(x.shape());
  const double* xv = x.value().ptr();
  const double* wv = w.value().ptr();
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(d.height), wd = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t xx = 0; xx < wd; ++xx) {
        double* o = out.ptr() + ((b * d.height + static_cast<std::size_t>(y)) * d.width + static_cast<std::size_t>(xx)) * c;
        if (bias.defined())
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] = bias.value()[ch];
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix = xx + static_cast<std::ptrdiff_t>(kx) - pad;
            if (ix < 0 || ix >= wd) continue;
            const double* xi =
                xv + ((b * d.height + static_cast<std::size_t>(iy)) * d.width + static_cast<std::size_t>(ix)) * c;
            const double* wk = wv + (ky * k + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wk[ch] * xi[ch];
          }
        }
      }
  std::vector<Var> parents{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [=](Node& self) {
    Node* px = parent(self, 0);
    Node* pw = parent(self, 1);
    const double* g = self.grad.ptr();
    double* gx = px->requires_grad ? px->grad_buffer().ptr() : nullptr;
    double* gw = pw->requires_grad ? pw->grad_buffer().ptr() : nullptr;
    const double* xv = px->value.ptr();
    const double* wv = pw->value.ptr();
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t xx = 0; xx < wd; ++xx) {
          const double* go =
              g + ((b * d.height + static_cast<std::size_t>(y)) * d.width + static_cast<std::size_t>(xx)) * c;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(ky) - pad;
            if (iy < 0 || iy >= h) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = xx + static_cast<std::ptrdiff_t>(kx) - pad;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t xoff =
                  ((b * d.height + static_cast<std::size_t>(iy)) * d.width + static_cast<std::size_t>(ix)) * c;
              const std::size_t woff = (ky * k + kx) * c;
              for (std::size_t ch = 0; ch < c; ++ch) {
                if (gx) gx[xoff + ch] += go[ch] * wv[woff + ch];
                if (gw) gw[woff + ch] += go[ch] * xv[xoff + ch];
              }
            }
          }
        }
    if (has_bias) {
      Node* pb = parent(self, 2);
      if (pb->requires_grad) {
        Tensor& gb = pb->grad_buffer();
        const std::size_t pixels = self.grad.size() / c;
        for (std::size_t p = 0; p < pixels; ++p)
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += g[p * c + ch];
      }
    }
  });
}

Var linear_map(const Var& x, const SparseMapPtr& map) {
  Tensor out = map->apply(x.value());
  return make_result(std::move(out), {x}, [map](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    const Tensor back = map->apply_transpose(self.grad);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  require(axis < ref.size(), "concat: axis out of range");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis)
        require(p.dim(i) == ref[i], "concat: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(ref));
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const Fibres f = fibres(out_shape, axis);
  Tensor out(out_shape);
  std::size_t base = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t wdt = widths[p];
    for (std::size_t o = 0; o < f.outer; ++o)
      std::copy_n(v.ptr() + o * wdt * f.inner, wdt * f.inner, out.ptr() + (o * total + base) * f.inner);
    base += wdt;
  }
  return make_result(std::move(out), parts, [f, widths, total](Node& self) {
    std::size_t base = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      Node* pp = parent(self, p);
      const std::size_t wdt = widths[p];
      if (pp->requires_grad) {
        Tensor& g = pp->grad_buffer();
        for (std::size_t o = 0; o < f.outer; ++o) {
          const double* src = self.grad.ptr() + (o * total + base) * f.inner;
          double* dst = g.ptr() + o * wdt * f.inner;
          for (std::size_t i = 0; i < wdt * f.inner; ++i) dst[i] += src[i];
        }
      }
      base += wdt;
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < x.rank() && begin < end && end <= x.dim(axis),
          "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
              shape_string(x.shape()));
  const Fibres f = fibres(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t wdt = end - begin;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < f.outer; ++o)
    std::copy_n(x.value().ptr() + (o * f.mid + begin) * f.inner, wdt * f.inner, out.ptr() + o * wdt * f.inner);
  return make_result(std::move(out), {x}, [f, begin, wdt](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t o = 0; o < f.outer; ++o) {
      const double* src = self.grad.ptr() + o * wdt * f.inner;
      double* dst = g.ptr() + (o * f.mid + begin) * f.inner;
      for (std::size_t i = 0; i < wdt * f.inner; ++i) dst[i] += src[i];
    }
  });
}

Var split_heads(const Var& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0,
          "split_heads: " + shape_string(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2), d = c / heads;
  Tensor out({b * heads, l, d});
  const double* xv = x.value().ptr();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv + (bi * l + t) * c + h * d, d, out.ptr() + ((bi * heads + h) * l + t) * d);
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t h = 0; h < heads; ++h) {
          const double* src = self.grad.ptr() + ((bi * heads + h) * l + t) * d;
          double* dst = g.ptr() + (bi * l + t) * c + h * d;
          for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
}

Var merge_heads(const Var& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(0) % heads == 0,
          "merge_heads: " + shape_string(x.shape()) + " incompatible with " + std::to_string(heads) + " heads");
  const std::size_t b = x.dim(0) / heads, l = x.dim(1), d = x.dim(2), c = d * heads;
  Tensor out({b, l, c});
  const double* xv = x.value().ptr();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < l; ++t)
        std::copy_n(xv + ((bi * heads + h) * l + t) * d, d, out.ptr() + (bi * l + t) * c + h * d);
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node* px = parent(self, 0);
    Tensor& g = px->grad_buffer();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < l; ++t) {
          const double* src = self.grad.ptr() + (bi * l + t) * c + h * d;
          double* dst = g.ptr() + ((bi * heads + h) * l + t) * d;
          for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
}

namespace {

using ResampleKey = std::tuple<int, std::size_t, std::size_t, std::size_t>;

SparseMapPtr resample_map(int kind, std::size_t h, std::size_t w, std::size_t c) {
  static std::mutex mutex;
  static std::map<ResampleKey, SparseMapPtr> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{kind, h, w, c}];
  if (slot) return slot;
  if (kind == 0) {
    SparseMapBuilder b({h, w, c}, {2 * h, 2 * w, c});
    // Source coordinate of output pixel o is (o + 0.5) / 2 - 0.5.
    auto taps = [](std::size_t o, std::size_t n) {
      const double src = std::clamp((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(n - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, n - 1);
      return std::tuple{i0, i1, src - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const auto [y0, y1, fy] = taps(y, h);
      for (std::size_t x = 0; x < 2 * w; ++x) {
        const auto [x0, x1, fx] = taps(x, w);
        const std::pair<std::size_t, double> rows[2] = {{y0, 1.0 - fy}, {y1, fy}};
        const std::pair<std::size_t, double> cols[2] = {{x0, 1.0 - fx}, {x1, fx}};
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (const auto& [sy, wy] : rows)
            for (const auto& [sx, wx] : cols)
              if (wy * wx != 0.0) b.add((sy * w + sx) * c + ch, wy * wx);
          b.end_row();
        }
      }
    }
    return slot = b.build();
  }
  SparseMapBuilder b({h, w, c}, {h / 2, w / 2, c});
  for (std::size_t y = 0; y < h / 2; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) b.add(((2 * y + dy) * w + 2 * x + dx) * c + ch, 0.25);
        b.end_row();
      }
  return slot = b.build();
}

}  // namespace

Var upsample2x(const Var& x) {
  require(x.rank() == 3, "upsample2x: expected (H, W, C), got " + shape_string(x.shape()));
  return linear_map(x, resample_map(0, x.dim(0), x.dim(1), x.dim(2)));
}

Var downsample2x(const Var& x) {
  require(x.rank() == 3 && x.dim(0) >= 2 && x.dim(1) >= 2,
          "downsample2x: expected (H, W, C) with sides >= 2, got " + shape_string(x.shape()));
  return linear_map(x, resample_map(1, x.dim(0), x.dim(1), x.dim(2)));
}

}  // namespace ops
}  // namespace gfrrn
