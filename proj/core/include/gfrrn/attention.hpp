#pragma once

#include <optional>
#include <vector>

#include "gfrrn/ops.hpp"
#include "gfrrn/params.hpp"

namespace gfrrn::attn {

/// Tiling of an H x W map into win_h x win_w windows. The map is
/// reflect-padded on the bottom/right up to a multiple of the window size.
struct WindowGrid {
  std::size_t height = 0, width = 0;
  std::size_t win_h = 0, win_w = 0;
  std::size_t rows = 0, cols = 0;  // windows per column / row

  std::size_t padded_h() const { return rows * win_h; }
  std::size_t padded_w() const { return cols * win_w; }
  std::size_t count() const { return rows * cols; }
  std::size_t tokens() const { return win_h * win_w; }
};

/// Throws InvalidArgument for zero sizes or windows larger than the map.
WindowGrid make_grid(std::size_t height, std::size_t width, std::size_t win_h, std::size_t win_w);

/// (H, W, C) -> (N_w, L, C), windows in row-major order, tokens row-major
/// within each window. `shift` rolls the padded map up/left first (Swin's
/// cyclic shift).
Var window_partition(const Var& x, const WindowGrid& grid, std::size_t shift = 0);
/// Inverse of window_partition (undoes the shift, crops the padding).
Var window_reverse(const Var& windows, const WindowGrid& grid, std::size_t channels, std::size_t shift = 0);
Tensor window_partition(const Tensor& x, const WindowGrid& grid, std::size_t shift = 0);
Tensor window_reverse(const Tensor& windows, const WindowGrid& grid, std::size_t channels, std::size_t shift = 0);

/// Additive (N_w, L, L) mask for shifted windows: 0 within a region, -100
/// across regions that are only adjacent because of the cyclic roll.
Tensor shifted_window_mask(const WindowGrid& grid, std::size_t shift);

/// Paints one value per window over its pixels; scores (N_w) or (N_w, 1).
Tensor window_value_map(const Tensor& scores, const WindowGrid& grid);

/// (n_a, L) adaptive-average-pooling matrix from a win_h x win_w grid to the
/// agent grid (see agent_grid).
Tensor agent_pooling_matrix(std::size_t win_h, std::size_t win_w, std::size_t agents);
/// Agent grid (rows, cols) with rows * cols = agents, as square as possible.
std::pair<std::size_t, std::size_t> agent_grid(std::size_t agents);

struct AttentionConfig {
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t win_h = 8, win_w = 8;
  std::size_t agents = 4;
  /// Zero-initialise the output projection (residual branches start closed).
  bool zero_output = false;

  void validate() const;
  std::size_t tokens() const { return win_h * win_w; }
  std::size_t head_dim() const { return channels / heads; }
};

/// Values captured during a forward pass.
struct AttentionTrace {
  std::vector<Tensor> softmax;  // every attention matrix, (B*h, rows, cols)
  Tensor scores;                // effective per-window score, (N_w, 1)
  Tensor stream_scores;         // LDAA only: (2, N_w), rows T then R
};

struct AttentionOptions {
  /// DAA: (N_w) or (N_w, 1) scores replacing the WIE output.
  /// LDAA: (2, N_w) per-stream scores (T row, R row) averaged as usual.
  std::optional<Tensor> forced_scores;
  AttentionTrace* trace = nullptr;
};

/// Window importance estimator: mean over tokens -> Linear(C, C/4) -> GELU
/// -> Linear(C/4, 1) -> 2 * sigmoid. The last layer is zero-initialised, so
/// every score starts at exactly 1.
class Wie {
 public:
  Wie() = default;
  Wie(const Scope& scope, std::size_t channels);
  /// q: (N_w, L, C) -> (N_w, 1), values in (0, 2).
  Var forward(const Var& q) const;

 private:
  Var w1_, b1_, w2_, b2_;
};

/// Dynamic agent attention over (B, L, C) windows.
class Daa {
 public:
  Daa() = default;
  Daa(const Scope& scope, const AttentionConfig& cfg);
  Var forward(const Var& x, const AttentionOptions& opt = {}) const;
  const AttentionConfig& config() const { return cfg_; }

 private:
  AttentionConfig cfg_;
  Tensor pool_;
  Var wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Var bias_agg_, bias_bcast_;  // (h, n_a, L), (h, L, n_a)
  Var dwc_w_, dwc_b_;
  Wie wie_;
};

/// Layer-wise dynamic agent attention over (N_w, 2L, C): the first L tokens
/// of each window are the T stream, the last L the R stream.
class Ldaa {
 public:
  Ldaa() = default;
  Ldaa(const Scope& scope, const AttentionConfig& cfg);
  Var forward(const Var& x, const AttentionOptions& opt = {}) const;
  const AttentionConfig& config() const { return cfg_; }

 private:
  AttentionConfig cfg_;
  Tensor pool_;
  Var wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Var bias_agg_, bias_bcast_;  // (h, 2n_a, 2L), (h, 2L, 2n_a)
  Var dwc_w_, dwc_b_;
  Wie wie_;
};

/// Window multi-head self-attention with a relative position bias table.
class Wmsa {
 public:
  Wmsa() = default;
  Wmsa(const Scope& scope, const AttentionConfig& cfg);
  /// x: (B, L, C); mask: optional additive (B, L, L).
  Var forward(const Var& x, const Tensor* mask = nullptr, AttentionTrace* trace = nullptr) const;
  const AttentionConfig& config() const { return cfg_; }
  Var relative_bias() const;  // (h, L, L)

 private:
  AttentionConfig cfg_;
  SparseMapPtr bias_gather_;
  Var wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Var bias_table_;  // ((2 win_h - 1) * (2 win_w - 1), h)
};

}  // namespace gfrrn::attn
