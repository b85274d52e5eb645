#include "gfrrn/attention.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <string>

#include "gfrrn/error.hpp"
#include "gfrrn/image.hpp"

namespace gfrrn::attn {

namespace {

/// Maps are pure functions of their key, so they are built once and shared.
SparseMapPtr cached(const std::string& key, const std::function<SparseMapPtr()>& build) {
  static std::mutex mutex;
  static std::map<std::string, SparseMapPtr> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  return cache[key] = build();
}

std::string grid_key(const char* tag, const WindowGrid& g, std::size_t c, std::size_t shift) {
  return std::string(tag) + ":" + std::to_string(g.height) + "x" + std::to_string(g.width) + "/" +
         std::to_string(g.win_h) + "x" + std::to_string(g.win_w) + "/c" + std::to_string(c) + "/s" +
         std::to_string(shift);
}

SparseMapPtr partition_map(const WindowGrid& g, std::size_t c, std::size_t shift) {
  return cached(grid_key("part", g, c, shift), [&] {
    const std::size_t hp = g.padded_h(), wp = g.padded_w();
    SparseMapBuilder b({g.height, g.width, c}, {g.count(), g.tokens(), c});
    for (std::size_t wr = 0; wr < g.rows; ++wr)
      for (std::size_t wc = 0; wc < g.cols; ++wc)
        for (std::size_t ty = 0; ty < g.win_h; ++ty)
          for (std::size_t tx = 0; tx < g.win_w; ++tx) {
            const std::size_t py = (wr * g.win_h + ty + shift) % hp;
            const std::size_t px = (wc * g.win_w + tx + shift) % wp;
            const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(py), g.height);
            const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(px), g.width);
            for (std::size_t ch = 0; ch < c; ++ch) {
              b.add((sy * g.width + sx) * c + ch, 1.0);
              b.end_row();
            }
          }
    return b.build();
  });
}

SparseMapPtr reverse_map(const WindowGrid& g, std::size_t c, std::size_t shift) {
  return cached(grid_key("rev", g, c, shift), [&] {
    const std::size_t hp = g.padded_h(), wp = g.padded_w();
    SparseMapBuilder b({g.count(), g.tokens(), c}, {g.height, g.width, c});
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const std::size_t py = (y + hp - shift % hp) % hp;
        const std::size_t px = (x + wp - shift % wp) % wp;
        const std::size_t win = (py / g.win_h) * g.cols + px / g.win_w;
        const std::size_t tok = (py % g.win_h) * g.win_w + px % g.win_w;
        for (std::size_t ch = 0; ch < c; ++ch) {
          b.add((win * g.tokens() + tok) * c + ch, 1.0);
          b.end_row();
        }
      }
    return b.build();
  });
}

/// Adds per-head tables to (B*h, R, S) logits: table (h, R, S).
Var add_head_bias(const Var& logits, const Var& table, std::size_t heads) {
  const std::size_t bh = logits.dim(0), r = logits.dim(1), s = logits.dim(2);
  Var v = ops::reshape(logits, {bh / heads, heads, r, s});
  return ops::reshape(ops::add_trailing(v, table), {bh, r, s});
}

void record(const AttentionOptions& opt, const Var& p) {
  if (opt.trace) opt.trace->softmax.push_back(p.value());
}

struct Projections {
  Var q, k, v;
};

Projections project(const Var& x, const Var& wq, const Var& bq, const Var& wk, const Var& bk, const Var& wv,
                    const Var& bv) {
  return {ops::linear(x, wq, bq), ops::linear(x, wk, bk), ops::linear(x, wv, bv)};
}

void check_input(const Var& x, std::size_t tokens, std::size_t channels, const char* who) {
  require(x.rank() == 3 && x.dim(1) == tokens && x.dim(2) == channels,
          std::string(who) + ": expected (B, " + std::to_string(tokens) + ", " + std::to_string(channels) +
              "), got " + shape_string(x.shape()));
}

Tensor forced_column(const Tensor& t, std::size_t n, const char* who) {
  require(t.size() == n, std::string(who) + ": forced scores need " + std::to_string(n) + " values, got " +
                             std::to_string(t.size()));
  return t.reshaped({n, 1});
}

}  // namespace

WindowGrid make_grid(std::size_t height, std::size_t width, std::size_t win_h, std::size_t win_w) {
  require(win_h > 0 && win_w > 0, "window_partition: window dims must be positive");
  require(height > 0 && width > 0, "window_partition: map dims must be positive");
  require(win_h <= height && win_w <= width, "window_partition: window " + std::to_string(win_h) + "x" +
                                                 std::to_string(win_w) + " exceeds map " + std::to_string(height) +
                                                 "x" + std::to_string(width));
  WindowGrid g;
  g.height = height;
  g.width = width;
  g.win_h = win_h;
  g.win_w = win_w;
  g.rows = (height + win_h - 1) / win_h;
  g.cols = (width + win_w - 1) / win_w;
  return g;
}

Var window_partition(const Var& x, const WindowGrid& grid, std::size_t shift) {
  require(x.rank() == 3 && x.dim(0) == grid.height && x.dim(1) == grid.width,
          "window_partition: map " + shape_string(x.shape()) + " does not match grid");
  return ops::linear_map(x, partition_map(grid, x.dim(2), shift));
}

Var window_reverse(const Var& windows, const WindowGrid& grid, std::size_t channels, std::size_t shift) {
  require(windows.shape() == Shape{grid.count(), grid.tokens(), channels},
          "window_reverse: windows " + shape_string(windows.shape()) + " do not match grid");
  return ops::linear_map(windows, reverse_map(grid, channels, shift));
}

Tensor window_partition(const Tensor& x, const WindowGrid& grid, std::size_t shift) {
  NoGradGuard g;
  return window_partition(Var::constant(x), grid, shift).value();
}

Tensor window_reverse(const Tensor& windows, const WindowGrid& grid, std::size_t channels, std::size_t shift) {
  NoGradGuard g;
  return window_reverse(Var::constant(windows), grid, channels, shift).value();
}

Tensor shifted_window_mask(const WindowGrid& g, std::size_t shift) {
  const std::size_t hp = g.padded_h(), wp = g.padded_w(), l = g.tokens();
  Tensor mask({g.count(), l, l});
  if (shift == 0) return mask;
  auto region = [shift](std::size_t p, std::size_t n, std::size_t win) -> int {
    if (p < n - win) return 0;
    return p < n - shift ? 1 : 2;
  };
  std::vector<int> label(l);
  for (std::size_t wr = 0; wr < g.rows; ++wr)
    for (std::size_t wc = 0; wc < g.cols; ++wc) {
      const std::size_t w = wr * g.cols + wc;
      for (std::size_t t = 0; t < l; ++t) {
        const std::size_t py = wr * g.win_h + t / g.win_w, px = wc * g.win_w + t % g.win_w;
        label[t] = region(py, hp, g.win_h) * 3 + region(px, wp, g.win_w);
      }
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) mask[(w * l + i) * l + j] = label[i] == label[j] ? 0.0 : -100.0;
    }
  return mask;
}

Tensor window_value_map(const Tensor& scores, const WindowGrid& g) {
  require(scores.size() == g.count(), "window_value_map: need one score per window");
  Tensor out({g.height, g.width});
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out[y * g.width + x] = scores[(y / g.win_h) * g.cols + x / g.win_w];
  return out;
}

std::pair<std::size_t, std::size_t> agent_grid(std::size_t agents) {
  require(agents >= 1, "agent count must be >= 1");
  std::size_t rows = static_cast<std::size_t>(std::sqrt(static_cast<double>(agents)));
  while (agents % rows != 0) --rows;
  return {rows, agents / rows};
}

Tensor agent_pooling_matrix(std::size_t win_h, std::size_t win_w, std::size_t agents) {
  const auto [ar, ac] = agent_grid(agents);
  require(ar <= win_h && ac <= win_w, "agent grid " + std::to_string(ar) + "x" + std::to_string(ac) +
                                          " does not fit a " + std::to_string(win_h) + "x" +
                                          std::to_string(win_w) + " window");
  Tensor p({agents, win_h * win_w});
  for (std::size_t i = 0; i < ar; ++i) {
    const std::size_t y0 = i * win_h / ar, y1 = ((i + 1) * win_h + ar - 1) / ar;
    for (std::size_t j = 0; j < ac; ++j) {
      const std::size_t x0 = j * win_w / ac, x1 = ((j + 1) * win_w + ac - 1) / ac;
      const double w = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) p[(i * ac + j) * win_h * win_w + y * win_w + x] = w;
    }
  }
  return p;
}

void AttentionConfig::validate() const {
  require(channels > 0 && heads > 0 && channels % heads == 0,
          "attention: channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  require(win_h > 0 && win_w > 0, "attention: window dims must be positive");
  require(agents >= 1 && agents <= tokens(), "attention: agent count must lie in [1, window tokens]");
}

// ------------------------------------------------------------------- WIE

Wie::Wie(const Scope& scope, std::size_t channels) {
  const std::size_t hidden = std::max<std::size_t>(channels / 4, 1);
  w1_ = scope.param("fc1.weight", {channels, hidden}, Init::fan_in(channels));
  b1_ = scope.param("fc1.bias", {hidden}, Init::zeros());
  w2_ = scope.param("fc2.weight", {hidden, 1}, Init::zeros());
  b2_ = scope.param("fc2.bias", {1}, Init::zeros());
}

Var Wie::forward(const Var& q) const {
  require(q.rank() == 3, "wie: expected (N_w, L, C)");
  Var pooled = ops::mean_axis(q, 1);  // (N_w, C)
  Var z = ops::linear(ops::gelu(ops::linear(pooled, w1_, b1_)), w2_, b2_);
  return ops::scale(ops::sigmoid(z), 2.0);
}

// ------------------------------------------------------------------- DAA

namespace {

struct QkvParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

QkvParams make_qkv(const Scope& s, std::size_t c, bool zero_output) {
  QkvParams p;
  p.wq = s.param("q.weight", {c, c}, Init::fan_in(c));
  p.bq = s.param("q.bias", {c}, Init::zeros());
  p.wk = s.param("k.weight", {c, c}, Init::fan_in(c));
  p.bk = s.param("k.bias", {c}, Init::zeros());
  p.wv = s.param("v.weight", {c, c}, Init::fan_in(c));
  p.bv = s.param("v.bias", {c}, Init::zeros());
  p.wo = s.param("proj.weight", {c, c}, zero_output ? Init::zeros() : Init::fan_in(c));
  p.bo = s.param("proj.bias", {c}, Init::zeros());
  return p;
}

}  // namespace

Daa::Daa(const Scope& scope, const AttentionConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, h = cfg.heads, l = cfg.tokens(), na = cfg.agents;
  pool_ = agent_pooling_matrix(cfg.win_h, cfg.win_w, na);
  const auto p = make_qkv(scope, c, cfg.zero_output);
  wq_ = p.wq, bq_ = p.bq, wk_ = p.wk, bk_ = p.bk, wv_ = p.wv, bv_ = p.bv, wo_ = p.wo, bo_ = p.bo;
  bias_agg_ = scope.param("agent_bias", {h, na, l}, Init::zeros());
  bias_bcast_ = scope.param("query_bias", {h, l, na}, Init::zeros());
  dwc_w_ = scope.param("dwc.weight", {3, 3, c}, Init::fan_in(9));
  dwc_b_ = scope.param("dwc.bias", {c}, Init::zeros());
  wie_ = Wie(scope.sub("wie"), c);
}

Var Daa::forward(const Var& x, const AttentionOptions& opt) const {
  check_input(x, cfg_.tokens(), cfg_.channels, "daa");
  const std::size_t b = x.dim(0), l = cfg_.tokens(), c = cfg_.channels, h = cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
  const auto [q, k, v] = project(x, wq_, bq_, wk_, bk_, wv_, bv_);

  const Var score =
      opt.forced_scores ? Var::constant(forced_column(*opt.forced_scores, b, "daa")) : wie_.forward(q);
  if (opt.trace) opt.trace->scores = score.value();

  Var agents = ops::matmul(Var::constant(pool_), q);  // (B, n_a, C)
  agents = ops::scale_batches(agents, score);

  const Var qh = ops::split_heads(q, h), kh = ops::split_heads(k, h), vh = ops::split_heads(v, h);
  const Var ah = ops::split_heads(agents, h);

  Var p1 = ops::softmax(add_head_bias(ops::scale(ops::matmul(ah, kh, false, true), scale), bias_agg_, h));
  record(opt, p1);
  const Var agent_v = ops::matmul(p1, vh);  // (B*h, n_a, d)
  Var p2 = ops::softmax(add_head_bias(ops::scale(ops::matmul(qh, ah, false, true), scale), bias_bcast_, h));
  record(opt, p2);
  const Var attn = ops::merge_heads(ops::matmul(p2, agent_v), h);  // (B, L, C)

  const Var dwc = ops::reshape(
      ops::depthwise_conv2d(ops::reshape(v, {b, cfg_.win_h, cfg_.win_w, c}), dwc_w_, dwc_b_), {b, l, c});
  return ops::linear(ops::add(attn, dwc), wo_, bo_);
}

// ------------------------------------------------------------------ LDAA

Ldaa::Ldaa(const Scope& scope, const AttentionConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, h = cfg.heads, l = cfg.tokens(), na = cfg.agents;
  pool_ = agent_pooling_matrix(cfg.win_h, cfg.win_w, na);
  const auto p = make_qkv(scope, c, cfg.zero_output);
  wq_ = p.wq, bq_ = p.bq, wk_ = p.wk, bk_ = p.bk, wv_ = p.wv, bv_ = p.bv, wo_ = p.wo, bo_ = p.bo;
  bias_agg_ = scope.param("agent_bias", {h, 2 * na, 2 * l}, Init::zeros());
  bias_bcast_ = scope.param("query_bias", {h, 2 * l, 2 * na}, Init::zeros());
  dwc_w_ = scope.param("dwc.weight", {3, 3, c}, Init::fan_in(9));
  dwc_b_ = scope.param("dwc.bias", {c}, Init::zeros());
  wie_ = Wie(scope.sub("wie"), c);
}

Var Ldaa::forward(const Var& x, const AttentionOptions& opt) const {
  const std::size_t l = cfg_.tokens(), c = cfg_.channels, h = cfg_.heads;
  require(x.rank() == 3 && x.dim(2) == c, "ldaa: expected (N_w, 2L, C), got " + shape_string(x.shape()));
  require(x.dim(1) % 2 == 0, "ldaa: odd token count " + std::to_string(x.dim(1)) + " cannot hold two streams");
  require(x.dim(1) == 2 * l, "ldaa: expected " + std::to_string(2 * l) + " tokens per window, got " +
                                 std::to_string(x.dim(1)));
  const std::size_t n = x.dim(0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
  const auto [q, k, v] = project(x, wq_, bq_, wk_, bk_, wv_, bv_);
  const Var q_t = ops::slice(q, 1, 0, l), q_r = ops::slice(q, 1, l, 2 * l);

  Var score_t, score_r;
  if (opt.forced_scores) {
    const Tensor& f = *opt.forced_scores;
    require(f.size() == 2 * n, "ldaa: forced scores need shape (2, N_w)");
    Tensor t({n, 1}), r({n, 1});
    for (std::size_t i = 0; i < n; ++i) t[i] = f[i], r[i] = f[n + i];
    score_t = Var::constant(std::move(t));
    score_r = Var::constant(std::move(r));
  } else {
    score_t = wie_.forward(q_t);
    score_r = wie_.forward(q_r);
  }
  const Var score = ops::scale(ops::add(score_t, score_r), 0.5);
  if (opt.trace) {
    opt.trace->scores = score.value();
    opt.trace->stream_scores = ops::concat({ops::reshape(score_t, {1, n}), ops::reshape(score_r, {1, n})}, 0).value();
  }

  const Var pool = Var::constant(pool_);
  Var agents = ops::concat({ops::matmul(pool, q_t), ops::matmul(pool, q_r)}, 1);  // (N, 2n_a, C)
  agents = ops::scale_batches(agents, score);

  const Var qh = ops::split_heads(q, h), kh = ops::split_heads(k, h), vh = ops::split_heads(v, h);
  const Var ah = ops::split_heads(agents, h);
  Var p1 = ops::softmax(add_head_bias(ops::scale(ops::matmul(ah, kh, false, true), scale), bias_agg_, h));
  record(opt, p1);
  const Var agent_v = ops::matmul(p1, vh);
  Var p2 = ops::softmax(add_head_bias(ops::scale(ops::matmul(qh, ah, false, true), scale), bias_bcast_, h));
  record(opt, p2);
  const Var attn = ops::merge_heads(ops::matmul(p2, agent_v), h);  // (N, 2L, C)

  auto dwc = [&](const Var& part) {
    return ops::reshape(
        ops::depthwise_conv2d(ops::reshape(part, {n, cfg_.win_h, cfg_.win_w, c}), dwc_w_, dwc_b_), {n, l, c});
  };
  const Var enhanced = ops::concat({dwc(ops::slice(v, 1, 0, l)), dwc(ops::slice(v, 1, l, 2 * l))}, 1);
  return ops::linear(ops::add(attn, enhanced), wo_, bo_);
}

// ------------------------------------------------------------------ W-MSA

Wmsa::Wmsa(const Scope& scope, const AttentionConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, h = cfg.heads, l = cfg.tokens();
  const auto p = make_qkv(scope, c, cfg.zero_output);
  wq_ = p.wq, bq_ = p.bq, wk_ = p.wk, bk_ = p.bk, wv_ = p.wv, bv_ = p.bv, wo_ = p.wo, bo_ = p.bo;
  const std::size_t span_w = 2 * cfg.win_w - 1, entries = (2 * cfg.win_h - 1) * span_w;
  bias_table_ = scope.param("relative_position_bias", {entries, h}, Init::normal(0.02));

  const std::string key = "relbias:" + std::to_string(cfg.win_h) + "x" + std::to_string(cfg.win_w) + "/h" +
                          std::to_string(h);
  bias_gather_ = cached(key, [&] {
    SparseMapBuilder b({entries, h}, {h, l, l});
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
          const std::size_t dy = i / cfg.win_w + cfg.win_h - 1 - j / cfg.win_w;
          const std::size_t dx = i % cfg.win_w + cfg.win_w - 1 - j % cfg.win_w;
          b.add((dy * span_w + dx) * h + head, 1.0);
          b.end_row();
        }
    return b.build();
  });
}

Var Wmsa::relative_bias() const { return ops::linear_map(bias_table_, bias_gather_); }

Var Wmsa::forward(const Var& x, const Tensor* mask, AttentionTrace* trace) const {
  check_input(x, cfg_.tokens(), cfg_.channels, "wmsa");
  const std::size_t b = x.dim(0), l = cfg_.tokens(), h = cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
  const auto [q, k, v] = project(x, wq_, bq_, wk_, bk_, wv_, bv_);
  const Var qh = ops::split_heads(q, h), kh = ops::split_heads(k, h), vh = ops::split_heads(v, h);
  Var logits = add_head_bias(ops::scale(ops::matmul(qh, kh, false, true), scale), relative_bias(), h);
  if (mask) {
    require(mask->shape() == Shape{b, l, l}, "wmsa: mask must be (B, L, L)");
    Tensor expanded({b * h, l, l});
    for (std::size_t w = 0; w < b; ++w)
      for (std::size_t head = 0; head < h; ++head)
        std::copy_n(mask->ptr() + w * l * l, l * l, expanded.ptr() + (w * h + head) * l * l);
    logits = ops::add(logits, Var::constant(std::move(expanded)));
  }
  const Var p = ops::softmax(logits);
  if (trace) trace->softmax.push_back(p.value());
  return ops::linear(ops::merge_heads(ops::matmul(p, vh), h), wo_, bo_);
}

}  // namespace gfrrn::attn
