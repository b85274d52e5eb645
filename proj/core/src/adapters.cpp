#include "gfrrn/adapters.hpp"

#include <map>
#include <mutex>

#include "gfrrn/error.hpp"

namespace gfrrn::adapters {

namespace {

Var dwconv_param(const Scope& s, const std::string& name, std::size_t k, std::size_t c) {
  return s.param(name, {k, k, c}, Init::fan_in(k * k));
}

SparseMapPtr space_to_depth_map(std::size_t h, std::size_t w, std::size_t c) {
  static std::mutex mutex;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t>, SparseMapPtr> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{h, w, c}];
  if (slot) return slot;
  SparseMapBuilder b({h, w, c}, {h / 2, w / 2, 4 * c});
  constexpr std::size_t offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (std::size_t y = 0; y < h / 2; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (const auto& o : offsets)
        for (std::size_t ch = 0; ch < c; ++ch) {
          b.add(((2 * y + o[0]) * w + 2 * x + o[1]) * c + ch, 1.0);
          b.end_row();
        }
  return slot = b.build();
}

}  // namespace

Var space_to_depth(const Var& x) {
  require(x.rank() == 3 && x.dim(0) % 2 == 0 && x.dim(1) % 2 == 0,
          "space_to_depth: need an (H, W, C) map with even sides, got " + shape_string(x.shape()));
  return ops::linear_map(x, space_to_depth_map(x.dim(0), x.dim(1), x.dim(2)));
}

// ------------------------------------------------------------------ Mona

MonaLayer::MonaLayer(const Scope& s, std::size_t channels, std::size_t reduction) : channels_(channels) {
  require(reduction >= 1 && channels >= reduction, "mona: reduction must lie in [1, channels]");
  hidden_ = channels / reduction;
  ln_g_ = s.param("norm.weight", {channels}, Init::constant(1.0));
  ln_b_ = s.param("norm.bias", {channels}, Init::zeros());
  gamma_ = s.param("gamma", {channels}, Init::constant(1e-6));
  gamma_x_ = s.param("gammax", {channels}, Init::constant(1.0));
  down_w_ = s.param("down.weight", {channels, hidden_}, Init::fan_in(channels));
  down_b_ = s.param("down.bias", {hidden_}, Init::zeros());
  dw3_w_ = dwconv_param(s, "conv3.weight", 3, hidden_);
  dw3_b_ = s.param("conv3.bias", {hidden_}, Init::zeros());
  dw5_w_ = dwconv_param(s, "conv5.weight", 5, hidden_);
  dw5_b_ = s.param("conv5.bias", {hidden_}, Init::zeros());
  dw7_w_ = dwconv_param(s, "conv7.weight", 7, hidden_);
  dw7_b_ = s.param("conv7.bias", {hidden_}, Init::zeros());
  pw_w_ = s.param("pointwise.weight", {hidden_, hidden_}, Init::fan_in(hidden_));
  pw_b_ = s.param("pointwise.bias", {hidden_}, Init::zeros());
  up_w_ = s.param("up.weight", {hidden_, channels}, Init::zeros());
  up_b_ = s.param("up.bias", {channels}, Init::zeros());
}

Var MonaLayer::forward(const Var& x) const {
  require(x.rank() == 3 && x.dim(2) == channels_,
          "mona: expected an (H, W, " + std::to_string(channels_) + ") map, got " + shape_string(x.shape()));
  const Var n = ops::add(ops::mul_trailing(ops::layer_norm(x, ln_g_, ln_b_), gamma_), ops::mul_trailing(x, gamma_x_));
  const Var z = ops::gelu(ops::linear(n, down_w_, down_b_));
  Var branches = ops::add(ops::depthwise_conv2d(z, dw3_w_, dw3_b_), ops::depthwise_conv2d(z, dw5_w_, dw5_b_));
  branches = ops::add(branches, ops::depthwise_conv2d(z, dw7_w_, dw7_b_));
  const Var mixed = ops::linear(branches, pw_w_, pw_b_);
  return ops::add(x, ops::linear(mixed, up_w_, up_b_));
}

// ------------------------------------------------------------- Swin block

SwinBlock::SwinBlock(const Scope& b, const Scope* mona, const SwinBlockConfig& cfg, std::size_t mona_reduction)
    : cfg_(cfg) {
  const std::size_t c = cfg.channels, hidden = c * cfg.mlp_ratio;
  ln1_g_ = b.param("norm1.weight", {c}, Init::constant(1.0));
  ln1_b_ = b.param("norm1.bias", {c}, Init::zeros());
  ln2_g_ = b.param("norm2.weight", {c}, Init::constant(1.0));
  ln2_b_ = b.param("norm2.bias", {c}, Init::zeros());
  attn::AttentionConfig ac;
  ac.channels = c;
  ac.heads = cfg.heads;
  ac.win_h = ac.win_w = cfg.window;
  ac.agents = 1;
  attn_ = attn::Wmsa(b.sub("attn"), ac);
  fc1_w_ = b.param("mlp.fc1.weight", {c, hidden}, Init::fan_in(c));
  fc1_b_ = b.param("mlp.fc1.bias", {hidden}, Init::zeros());
  fc2_w_ = b.param("mlp.fc2.weight", {hidden, c}, Init::fan_in(hidden));
  fc2_b_ = b.param("mlp.fc2.bias", {c}, Init::zeros());
  if (mona) {
    has_mona_ = true;
    mona1_ = MonaLayer(mona->sub("mona1"), c, mona_reduction);
    mona2_ = MonaLayer(mona->sub("mona2"), c, mona_reduction);
  }
}

Var SwinBlock::forward(const Var& x) const {
  require(x.rank() == 3 && x.dim(2) == cfg_.channels, "swin block: bad input " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = cfg_.channels;
  require(h >= cfg_.window && w >= cfg_.window,
          "swin block: map " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the window");
  const auto grid = attn::make_grid(h, w, cfg_.window, cfg_.window);
  const bool shift = cfg_.shifted && (h > cfg_.window || w > cfg_.window);
  const std::size_t s = shift ? cfg_.window / 2 : 0;

  const Var windows = attn::window_partition(ops::layer_norm(x, ln1_g_, ln1_b_), grid, s);
  Tensor mask;
  if (s > 0) mask = attn::shifted_window_mask(grid, s);
  const Var a = attn_.forward(windows, s > 0 ? &mask : nullptr);
  Var y = ops::add(x, attn::window_reverse(a, grid, c, s));
  if (has_mona_) y = mona1_.forward(y);
  const Var mlp = ops::linear(ops::gelu(ops::linear(ops::layer_norm(y, ln2_g_, ln2_b_), fc1_w_, fc1_b_)), fc2_w_, fc2_b_);
  y = ops::add(y, mlp);
  if (has_mona_) y = mona2_.forward(y);
  return y;
}

// ------------------------------------------------------------- Encoder 1

void EncoderConfig::validate() const {
  require(!channels.empty() && channels.size() == depths.size() && channels.size() == heads.size(),
          "encoder: channels, depths and heads must have one entry per stage");
  for (std::size_t i = 0; i < channels.size(); ++i)
    require(heads[i] > 0 && channels[i] % heads[i] == 0, "encoder: stage channels not divisible by heads");
  require(window >= 1 && patch >= 1 && mlp_ratio >= 1, "encoder: window, patch and mlp ratio must be positive");
}

Encoder1::Encoder1(const Scope& scope, const EncoderConfig& cfg, TuningMode mode) : cfg_(cfg), mode_(mode) {
  cfg.validate();
  const Scope bb = scope.with_group(ParamGroup::kBackbone);
  const Scope mona_root = scope.with_group(ParamGroup::kMona);
  const std::size_t c0 = cfg.channels[0], p = cfg.patch;
  embed_w_ = bb.param("patch_embed.weight", {p, p, 3, c0}, Init::fan_in(p * p * 3));
  embed_b_ = bb.param("patch_embed.bias", {c0}, Init::zeros());
  embed_ln_g_ = bb.param("patch_embed.norm.weight", {c0}, Init::constant(1.0));
  embed_ln_b_ = bb.param("patch_embed.norm.bias", {c0}, Init::zeros());

  for (std::size_t st = 0; st < cfg.channels.size(); ++st) {
    std::vector<SwinBlock> blocks;
    for (std::size_t i = 0; i < cfg.depths[st]; ++i) {
      const std::string name = "stage" + std::to_string(st) + ".block" + std::to_string(i);
      SwinBlockConfig bc;
      bc.channels = cfg.channels[st];
      bc.heads = cfg.heads[st];
      bc.window = cfg.window;
      bc.mlp_ratio = cfg.mlp_ratio;
      bc.shifted = i % 2 == 1;
      const Scope mona = mona_root.sub(name);
      blocks.emplace_back(bb.sub(name), mode == TuningMode::kFrozen ? nullptr : &mona, bc, cfg.mona_reduction);
    }
    stages_.push_back(std::move(blocks));
    if (st + 1 < cfg.channels.size()) {
      const std::size_t c = cfg.channels[st];
      const Scope m = bb.sub("merge" + std::to_string(st));
      merges_.push_back({m.param("norm.weight", {4 * c}, Init::constant(1.0)), m.param("norm.bias", {4 * c}, Init::zeros()),
                         m.param("reduction.weight", {4 * c, cfg.channels[st + 1]}, Init::fan_in(4 * c))});
    }
  }
}

std::vector<Var> Encoder1::forward(const Var& image) const {
  const std::size_t m = cfg_.stride_multiple();
  require(image.rank() == 3 && image.dim(2) == 3 && image.dim(0) % m == 0 && image.dim(1) % m == 0,
          "encoder1: image sides must be multiples of " + std::to_string(m) + ", got " + shape_string(image.shape()));
  Var x = ops::conv2d(image, embed_w_, embed_b_, cfg_.patch, 0);
  x = ops::layer_norm(x, embed_ln_g_, embed_ln_b_);
  std::vector<Var> out;
  for (std::size_t st = 0; st < stages_.size(); ++st) {
    for (const auto& block : stages_[st]) x = block.forward(x);
    out.push_back(x);
    if (st < merges_.size()) {
      const auto& mg = merges_[st];
      x = ops::linear(ops::layer_norm(space_to_depth(x), mg.ln_g, mg.ln_b), mg.w, Var());
    }
  }
  return out;
}

}  // namespace gfrrn::adapters
