#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfrrn/adapters.hpp"
#include "gfrrn/attention.hpp"
#include "gfrrn/frequency.hpp"
#include "gfrrn/image.hpp"

namespace gfrrn::net {

/// Transmission and reflection feature maps of equal shape.
struct StreamPair {
  Var t;
  Var r;
};

enum class AttentionKind { kDaa, kWmsa };

const char* to_string(AttentionKind k);
AttentionKind parse_attention_kind(const std::string& s);

struct DecoderLevelConfig {
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t blocks = 2;  // K
  std::size_t agents = 4;
  std::size_t ffn_ratio = 2;
  AttentionKind attention = AttentionKind::kDaa;
  freq::GaflbConfig gaflb;

  void validate() const;
};

/// Values captured from one decoder level.
struct LevelTrace {
  attn::WindowGrid grid;
  freq::GaflbTrace gaflb_t, gaflb_r;
  std::vector<attn::AttentionTrace> self, cross;  // one per block
};

/// Dual-stream gated MLP: each stream's hidden units are gated by a GELU
/// projection of the other stream,
///   y_t = W2_t(W1_t x_t * GELU(G_t x_r)),  y_r = W2_r(W1_r x_r * GELU(G_r x_t)).
/// W2 is zero-initialised.
class Dslp {
 public:
  Dslp() = default;
  Dslp(const Scope& scope, std::size_t channels, std::size_t ratio);
  StreamPair forward(const StreamPair& x) const;

 private:
  struct Stream {
    Var w1, b1, gate_w, gate_b, w2, b2;
  };
  Stream t_, r_;
};

/// Dual-stream interactive block on (H, W, C) maps:
///   x' = LN(x) per stream
///   SA = self attention on the windows of T stacked after those of R
///   CA = cross attention on windows holding the T tokens then the R tokens
///   x  = x + SA + CA
///   x  = x + DSLP(LN(x))
class Ddib {
 public:
  Ddib() = default;
  Ddib(const Scope& scope, const DecoderLevelConfig& cfg);
  StreamPair forward(const StreamPair& x, attn::AttentionTrace* self_trace = nullptr,
                     attn::AttentionTrace* cross_trace = nullptr) const;

 private:
  DecoderLevelConfig cfg_;
  Var n1t_g_, n1t_b_, n1r_g_, n1r_b_, n2t_g_, n2t_b_, n2r_g_, n2r_b_;
  attn::Daa daa_;
  attn::Ldaa ldaa_;
  attn::Wmsa self_wmsa_, cross_wmsa_;
  Dslp ffn_;
};

/// One decoder level: a G-AFLB shared by both streams, then K DDIBs.
class DecoderLevel {
 public:
  DecoderLevel() = default;
  DecoderLevel(const Scope& scope, const DecoderLevelConfig& cfg);
  /// image: (H, W, 3) at the level's resolution.
  StreamPair forward(const StreamPair& x, const Tensor& image, LevelTrace* trace = nullptr) const;
  /// The G-AFLB prefix on its own.
  StreamPair frequency_prefix(const StreamPair& x, const Tensor& image, LevelTrace* trace = nullptr) const;
  const std::vector<Ddib>& blocks() const { return blocks_; }
  const freq::Gaflb& gaflb() const { return gaflb_; }

 private:
  DecoderLevelConfig cfg_;
  freq::Gaflb gaflb_;
  std::vector<Ddib> blocks_;
};

/// Convolutional dual-stream pyramid: a shared stem at full resolution
/// (C/2 channels), stride-2 convolutions to each coarser scale (C channels),
/// and separate 3x3 T/R heads per scale. Scale 0 is full resolution.
class Encoder2 {
 public:
  Encoder2() = default;
  Encoder2(const Scope& scope, std::size_t channels, std::size_t scales);
  std::vector<StreamPair> forward(const Var& image) const;
  std::size_t stem_channels() const { return stem_channels_; }

 private:
  struct Conv {
    Var w, b;
  };
  std::size_t channels_ = 0, stem_channels_ = 0;
  Conv stem_;
  std::vector<Conv> down_;
  std::vector<Conv> head_t_, head_r_;
};

/// Gated convolution producing the residual term:
///   h = conv3x3([t, r, I]) with 2c channels; n = W (h[:c] * h[c:]).
class ResidualEstimator {
 public:
  ResidualEstimator() = default;
  ResidualEstimator(const Scope& scope, std::size_t hidden);
  Var forward(const Var& t_hat, const Var& r_hat, const Var& image) const;

 private:
  std::size_t hidden_ = 0;
  Var conv_w_, conv_b_, out_w_, out_b_;
};

struct NetworkConfig {
  adapters::EncoderConfig encoder;
  DecoderLevelConfig decoder;
  std::size_t residual_hidden = 8;
  TuningMode mode = TuningMode::kMona;

  void validate() const;
  std::size_t levels() const { return encoder.channels.size(); }
  /// Padded input sides are multiples of this...
  std::size_t input_multiple() const;
  /// ...and at least this large.
  std::size_t min_side() const;
};

/// Flat JSON keys: channels, encoder_channels, depths, encoder_heads, heads,
/// window, K, n_a, ffn_ratio, mlp_ratio, mona_reduction, sigma_min,
/// sigma_max, mask, gaflb_hidden, attention, residual_hidden, tuning_mode.
nlohmann::json to_json(const NetworkConfig& cfg);
/// Reads the keys above, leaving absent ones at their defaults; other keys
/// are ignored.
NetworkConfig network_config_from_json(const nlohmann::json& j);
const std::vector<std::string>& network_config_keys();
std::uint64_t config_hash(const NetworkConfig& cfg);

struct ForwardTrace {
  std::vector<LevelTrace> levels;  // coarse to fine
  Tensor padded_image;
};

struct Prediction {
  Var t_hat, r_hat, n_hat;  // (H, W, 3) at the input size
};

struct GfrrnOutput {
  Image t_hat, r_hat;
  Tensor n_hat;
};

/// Full network: two encoders, fused per scale, decoded coarse to fine.
class Gfrrn {
 public:
  Gfrrn(ParamStore& store, const NetworkConfig& cfg, std::uint64_t seed);

  /// image: (H, W, 3). The input is reflect-padded to the architecture
  /// multiples and the outputs cropped back.
  Prediction forward(const Tensor& image, ForwardTrace* trace = nullptr) const;
  /// Gradient-free inference.
  GfrrnOutput infer(const Image& image, ForwardTrace* trace = nullptr) const;

  const NetworkConfig& config() const { return cfg_; }
  ParamStore& store() const { return *store_; }
  const std::vector<DecoderLevel>& levels() const { return levels_; }

 private:
  ParamStore* store_;
  NetworkConfig cfg_;
  adapters::Encoder1 enc1_;
  Encoder2 enc2_;
  struct Fusion {
    Var wt, bt, wr, br;
  };
  std::vector<Fusion> fusion_;  // per decoder level
  std::vector<DecoderLevel> levels_;
  Var out_t_w_, out_t_b_, out_r_w_, out_r_b_;  // C -> stem channels at full resolution
  Var head_t_w_, head_t_b_, head_r_w_, head_r_b_;
  ResidualEstimator residual_;
};

}  // namespace gfrrn::net
