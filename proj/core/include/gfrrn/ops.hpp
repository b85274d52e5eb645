#pragma once

#include <memory>
#include <vector>

#include "gfrrn/autodiff.hpp"

namespace gfrrn {

/// Fixed sparse linear operator out = M · in over flattened tensors.
/// Used for every index-shuffling or resampling step that has no learnable
/// state: reflect padding, cropping, window partition, cyclic shifts,
/// pooling, bilinear resampling and finite differences.
struct SparseMap {
  Shape in_shape;
  Shape out_shape;
  std::vector<std::size_t> row_ptr;  // size numel(out_shape) + 1
  std::vector<std::size_t> cols;
  std::vector<double> weights;

  Tensor apply(const Tensor& in) const;
  Tensor apply_transpose(const Tensor& out_grad) const;
};

/// Accumulates rows in output order. Call add() for the entries of the
/// current row, then end_row().
class SparseMapBuilder {
 public:
  SparseMapBuilder(Shape in_shape, Shape out_shape);
  void add(std::size_t in_index, double weight) {
    map_.cols.push_back(in_index);
    map_.weights.push_back(weight);
  }
  void end_row() { map_.row_ptr.push_back(map_.cols.size()); }
  std::shared_ptr<const SparseMap> build();

 private:
  SparseMap map_;
};

using SparseMapPtr = std::shared_ptr<const SparseMap>;

namespace ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

/// b's shape must equal the trailing dims of x; b is broadcast over the rest.
Var add_trailing(const Var& x, const Var& b);
Var mul_trailing(const Var& x, const Var& b);

Var scale(const Var& x, double s);
Var shift(const Var& x, double s);
/// x * s where s holds a single value.
Var mul_scalar(const Var& x, const Var& s);
/// Scales slice x[b, ...] by s[b]; numel(s) == x.dim(0).
Var scale_batches(const Var& x, const Var& s);

Var gelu(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var abs(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
/// Reduces one axis (removed from the result shape).
Var mean_axis(const Var& x, std::size_t axis);
/// Divides each 1-D fibre along `axis` by its L2 norm (floored at eps).
Var l2_normalize(const Var& x, std::size_t axis, double eps = 1e-12);

/// Batched matrix product. Operands are (M,K)/(K,M) or (B,M,K); a batch
/// of 1 or a rank-2 operand broadcasts against the other side.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
/// x (..., in) · w (in, out) + bias (out). bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias);
Var softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// x (B,H,W,Cin) or (H,W,Cin); w (k,k,Cin,Cout); zero padding.
Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad);
/// x (B,H,W,C) or (H,W,C); w (k,k,C); same-size output with zero padding k/2.
Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias);

Var linear_map(const Var& x, const SparseMapPtr& map);
Var reshape(const Var& x, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Bilinear 2x upsampling of an (H, W, C) map with half-pixel centres and
/// clamped edges.
Var upsample2x(const Var& x);
/// 2x2 average pooling of an (H, W, C) map to (H/2, W/2) (floor; an odd
/// last row or column is dropped). Equals bilinear 2x downsampling with
/// half-pixel centres. H and W must be at least 2.
Var downsample2x(const Var& x);

/// (B, L, h*d) -> (B*h, L, d) and back.
Var split_heads(const Var& x, std::size_t heads);
Var merge_heads(const Var& x, std::size_t heads);

}  // namespace ops

// Raw kernels shared with tests and benchmarks.
/// C (MxN) (+)= op(A) op(B) on contiguous row-major buffers.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool transpose_a, bool transpose_b, bool accumulate);

}  // namespace gfrrn
