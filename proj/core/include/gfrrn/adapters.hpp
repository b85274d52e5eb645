#pragma once

#include <vector>

#include "gfrrn/attention.hpp"
#include "gfrrn/params.hpp"

namespace gfrrn::adapters {

/// Multi-cognitive visual adapter on an (H, W, C) map:
///   n = LN(x) * gamma + x * gamma_x
///   z = GELU(down(n))                       C -> C/r
///   y = x + up(pointwise(dw3(z) + dw5(z) + dw7(z)))
/// `up` is zero-initialised, so a fresh layer is an exact identity.
class MonaLayer {
 public:
  MonaLayer() = default;
  MonaLayer(const Scope& scope, std::size_t channels, std::size_t reduction);
  Var forward(const Var& x) const;
  std::size_t hidden() const { return hidden_; }

 private:
  std::size_t channels_ = 0, hidden_ = 0;
  Var ln_g_, ln_b_, gamma_, gamma_x_;
  Var down_w_, down_b_;
  Var dw3_w_, dw3_b_, dw5_w_, dw5_b_, dw7_w_, dw7_b_;
  Var pw_w_, pw_b_;
  Var up_w_, up_b_;
};

struct SwinBlockConfig {
  std::size_t channels = 32;
  std::size_t heads = 2;
  std::size_t window = 8;
  std::size_t mlp_ratio = 4;
  bool shifted = false;
};

/// Swin block on an (H, W, C) map with optional Mona layers:
///   x = x + W-MSA(LN(x));  x = Mona1(x);  x = x + MLP(LN(x));  x = Mona2(x)
/// The map must be at least one window on each side; shifting is skipped
/// when one window covers the map.
class SwinBlock {
 public:
  SwinBlock() = default;
  /// `mona` null builds the plain block.
  SwinBlock(const Scope& backbone, const Scope* mona, const SwinBlockConfig& cfg, std::size_t mona_reduction);
  Var forward(const Var& x) const;
  bool has_mona() const { return has_mona_; }

 private:
  SwinBlockConfig cfg_;
  Var ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  attn::Wmsa attn_;
  Var fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  bool has_mona_ = false;
  MonaLayer mona1_, mona2_;
};

struct EncoderConfig {
  std::vector<std::size_t> channels{32, 64};
  std::vector<std::size_t> depths{2, 2};
  std::vector<std::size_t> heads{2, 4};
  std::size_t window = 8;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 2;
  std::size_t mona_reduction = 8;

  void validate() const;
  /// Input sides must be multiples of this.
  std::size_t stride_multiple() const { return patch << (channels.size() - 1); }
};

/// Miniature Swin hierarchy standing in for the pretrained encoder: patch
/// embedding, then per stage `depth` Swin blocks, with 2x2 patch merging
/// between stages. Backbone weights are tagged kBackbone, Mona layers kMona;
/// frozen mode builds no Mona layers at all.
class Encoder1 {
 public:
  Encoder1() = default;
  Encoder1(const Scope& scope, const EncoderConfig& cfg, TuningMode mode);

  /// image (H, W, 3) -> one map per stage: (H/p, W/p, C0), (H/2p, W/2p, C1), ...
  std::vector<Var> forward(const Var& image) const;
  const EncoderConfig& config() const { return cfg_; }
  TuningMode mode() const { return mode_; }

 private:
  EncoderConfig cfg_;
  TuningMode mode_ = TuningMode::kMona;
  Var embed_w_, embed_b_, embed_ln_g_, embed_ln_b_;
  std::vector<std::vector<SwinBlock>> stages_;
  struct Merge {
    Var ln_g, ln_b, w;
  };
  std::vector<Merge> merges_;
};

/// (H, W, C) -> (H/2, W/2, 4C), concatenating each 2x2 neighbourhood as
/// [(0,0), (1,0), (0,1), (1,1)]. H and W must be even.
Var space_to_depth(const Var& x);

}  // namespace gfrrn::adapters
