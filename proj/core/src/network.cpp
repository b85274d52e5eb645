#include "gfrrn/network.hpp"

#include <algorithm>
#include <cmath>

#include "gfrrn/error.hpp"

namespace gfrrn::net {

namespace {

Var ln_weight(const Scope& s, const std::string& name, std::size_t c) {
  return s.param(name + ".weight", {c}, Init::constant(1.0));
}
Var ln_bias(const Scope& s, const std::string& name, std::size_t c) {
  return s.param(name + ".bias", {c}, Init::zeros());
}

Var crop_var(const Var& x, std::size_t h, std::size_t w) {
  Var y = x;
  if (x.dim(0) != h) y = ops::slice(y, 0, 0, h);
  if (x.dim(1) != w) y = ops::slice(y, 1, 0, w);
  return y;
}

void require_pair(const StreamPair& x, std::size_t channels, const char* who) {
  require(x.t.defined() && x.r.defined() && x.t.shape() == x.r.shape(),
          std::string(who) + ": stream shapes differ");
  require(x.t.rank() == 3 && x.t.dim(2) == channels,
          std::string(who) + ": expected (H, W, " + std::to_string(channels) + ") streams, got " +
              shape_string(x.t.shape()));
}

}  // namespace

const char* to_string(AttentionKind k) { return k == AttentionKind::kDaa ? "daa" : "wmsa"; }

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "daa") return AttentionKind::kDaa;
  if (s == "wmsa") return AttentionKind::kWmsa;
  throw ConfigError("unknown attention kind '" + s + "' (expected daa or wmsa)");
}

void DecoderLevelConfig::validate() const {
  require(blocks >= 1, "decoder: K must be at least 1");
  require(heads > 0 && channels % heads == 0, "decoder: channels not divisible by heads");
  require(window >= 1 && agents >= 1 && ffn_ratio >= 1, "decoder: window, agents and ffn ratio must be positive");
  require(gaflb.channels == channels, "decoder: G-AFLB channels must match the decoder width");
}

// ------------------------------------------------------------------ DSLP

Dslp::Dslp(const Scope& s, std::size_t c, std::size_t ratio) {
  const std::size_t hidden = c * ratio;
  auto make = [&](const Scope& st) {
    return Stream{st.param("fc1.weight", {c, hidden}, Init::fan_in(c)), st.param("fc1.bias", {hidden}, Init::zeros()),
                  st.param("gate.weight", {c, hidden}, Init::fan_in(c)), st.param("gate.bias", {hidden}, Init::zeros()),
                  st.param("fc2.weight", {hidden, c}, Init::zeros()), st.param("fc2.bias", {c}, Init::zeros())};
  };
  t_ = make(s.sub("t"));
  r_ = make(s.sub("r"));
}

StreamPair Dslp::forward(const StreamPair& x) const {
  auto branch = [](const Stream& p, const Var& self, const Var& other) {
    const Var h = ops::linear(self, p.w1, p.b1);
    const Var g = ops::gelu(ops::linear(other, p.gate_w, p.gate_b));
    return ops::linear(ops::mul(h, g), p.w2, p.b2);
  };
  return {branch(t_, x.t, x.r), branch(r_, x.r, x.t)};
}

// ------------------------------------------------------------------ DDIB

Ddib::Ddib(const Scope& s, const DecoderLevelConfig& cfg) : cfg_(cfg) {
  const std::size_t c = cfg.channels;
  n1t_g_ = ln_weight(s, "norm1_t", c);
  n1t_b_ = ln_bias(s, "norm1_t", c);
  n1r_g_ = ln_weight(s, "norm1_r", c);
  n1r_b_ = ln_bias(s, "norm1_r", c);
  n2t_g_ = ln_weight(s, "norm2_t", c);
  n2t_b_ = ln_bias(s, "norm2_t", c);
  n2r_g_ = ln_weight(s, "norm2_r", c);
  n2r_b_ = ln_bias(s, "norm2_r", c);
  attn::AttentionConfig ac;
  ac.channels = c;
  ac.heads = cfg.heads;
  ac.win_h = ac.win_w = cfg.window;
  ac.agents = cfg.agents;
  ac.zero_output = true;
  if (cfg.attention == AttentionKind::kDaa) {
    daa_ = attn::Daa(s.sub("daa"), ac);
    ldaa_ = attn::Ldaa(s.sub("ldaa"), ac);
  } else {
    self_wmsa_ = attn::Wmsa(s.sub("self_attn"), ac);
    ac.win_h *= 2;
    cross_wmsa_ = attn::Wmsa(s.sub("cross_attn"), ac);
  }
  ffn_ = Dslp(s.sub("dslp"), c, cfg.ffn_ratio);
}

StreamPair Ddib::forward(const StreamPair& x, attn::AttentionTrace* self_trace,
                         attn::AttentionTrace* cross_trace) const {
  require_pair(x, cfg_.channels, "ddib");
  const std::size_t c = cfg_.channels;
  const auto grid = attn::make_grid(x.t.dim(0), x.t.dim(1), cfg_.window, cfg_.window);
  const std::size_t n = grid.count(), l = grid.tokens();
  const Var wt = attn::window_partition(ops::layer_norm(x.t, n1t_g_, n1t_b_), grid);
  const Var wr = attn::window_partition(ops::layer_norm(x.r, n1r_g_, n1r_b_), grid);
  const Var stacked = ops::concat({wt, wr}, 0);
  const Var joined = ops::concat({wt, wr}, 1);

  Var sa, ca;
  if (cfg_.attention == AttentionKind::kDaa) {
    attn::AttentionOptions so, co;
    so.trace = self_trace;
    co.trace = cross_trace;
    sa = daa_.forward(stacked, so);
    ca = ldaa_.forward(joined, co);
  } else {
    sa = self_wmsa_.forward(stacked, nullptr, self_trace);
    ca = cross_wmsa_.forward(joined, nullptr, cross_trace);
  }
  const Var sa_t = attn::window_reverse(ops::slice(sa, 0, 0, n), grid, c);
  const Var sa_r = attn::window_reverse(ops::slice(sa, 0, n, 2 * n), grid, c);
  const Var ca_t = attn::window_reverse(ops::slice(ca, 1, 0, l), grid, c);
  const Var ca_r = attn::window_reverse(ops::slice(ca, 1, l, 2 * l), grid, c);
  const Var t = ops::add(ops::add(x.t, sa_t), ca_t);
  const Var r = ops::add(ops::add(x.r, sa_r), ca_r);

  const StreamPair f = ffn_.forward({ops::layer_norm(t, n2t_g_, n2t_b_), ops::layer_norm(r, n2r_g_, n2r_b_)});
  return {ops::add(t, f.t), ops::add(r, f.r)};
}

// --------------------------------------------------------- decoder level

DecoderLevel::DecoderLevel(const Scope& s, const DecoderLevelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  gaflb_ = freq::Gaflb(s.sub("gaflb"), cfg.gaflb);
  for (std::size_t k = 0; k < cfg.blocks; ++k) blocks_.emplace_back(s.sub("block" + std::to_string(k)), cfg);
}

StreamPair DecoderLevel::frequency_prefix(const StreamPair& x, const Tensor& image, LevelTrace* trace) const {
  require_pair(x, cfg_.channels, "decoder level");
  return {gaflb_.forward(x.t, image, trace ? &trace->gaflb_t : nullptr),
          gaflb_.forward(x.r, image, trace ? &trace->gaflb_r : nullptr)};
}

StreamPair DecoderLevel::forward(const StreamPair& x, const Tensor& image, LevelTrace* trace) const {
  StreamPair cur = frequency_prefix(x, image, trace);
  if (trace) {
    trace->grid = attn::make_grid(x.t.dim(0), x.t.dim(1), cfg_.window, cfg_.window);
    trace->self.assign(blocks_.size(), {});
    trace->cross.assign(blocks_.size(), {});
  }
  for (std::size_t k = 0; k < blocks_.size(); ++k)
    cur = blocks_[k].forward(cur, trace ? &trace->self[k] : nullptr, trace ? &trace->cross[k] : nullptr);
  return cur;
}

// ------------------------------------------------------------- Encoder 2

Encoder2::Encoder2(const Scope& s, std::size_t channels, std::size_t scales)
    : channels_(channels), stem_channels_(std::max<std::size_t>(1, channels / 2)) {
  require(channels >= 1 && scales >= 1, "encoder2: channels and scales must be positive");
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    return Conv{s.param(name + ".weight", {3, 3, cin, cout}, Init::fan_in(9 * cin)),
                s.param(name + ".bias", {cout}, Init::zeros())};
  };
  stem_ = conv("stem", 3, stem_channels_);
  for (std::size_t k = 0; k < scales; ++k)
    down_.push_back(conv("down" + std::to_string(k), k == 0 ? stem_channels_ : channels, channels));
  for (std::size_t k = 0; k <= scales; ++k) {
    const std::size_t c = k == 0 ? stem_channels_ : channels;
    head_t_.push_back(conv("head_t" + std::to_string(k), c, c));
    head_r_.push_back(conv("head_r" + std::to_string(k), c, c));
  }
}

std::vector<StreamPair> Encoder2::forward(const Var& image) const {
  require(image.rank() == 3 && image.dim(2) == 3, "encoder2: expected an (H, W, 3) image");
  std::vector<StreamPair> out;
  Var x = ops::gelu(ops::conv2d(image, stem_.w, stem_.b, 1, 1));
  for (std::size_t k = 0; k < head_t_.size(); ++k) {
    if (k > 0) {
      require(x.dim(0) % 2 == 0 && x.dim(1) % 2 == 0, "encoder2: odd map size at scale " + std::to_string(k));
      x = ops::gelu(ops::conv2d(x, down_[k - 1].w, down_[k - 1].b, 2, 1));
    }
    out.push_back({ops::conv2d(x, head_t_[k].w, head_t_[k].b, 1, 1), ops::conv2d(x, head_r_[k].w, head_r_[k].b, 1, 1)});
  }
  return out;
}

// ---------------------------------------------------- residual estimator

ResidualEstimator::ResidualEstimator(const Scope& s, std::size_t hidden) : hidden_(hidden) {
  require(hidden >= 1, "residual estimator: hidden width must be positive");
  conv_w_ = s.param("conv.weight", {3, 3, 9, 2 * hidden}, Init::fan_in(81));
  conv_b_ = s.param("conv.bias", {2 * hidden}, Init::zeros());
  out_w_ = s.param("out.weight", {hidden, 3}, Init::zeros());
  out_b_ = s.param("out.bias", {3}, Init::zeros());
}

Var ResidualEstimator::forward(const Var& t_hat, const Var& r_hat, const Var& image) const {
  require(t_hat.rank() == 3 && t_hat.dim(2) == 3 && t_hat.shape() == r_hat.shape() && t_hat.shape() == image.shape(),
          "residual estimator: expected three aligned (H, W, 3) inputs");
  const Var h = ops::conv2d(ops::concat({t_hat, r_hat, image}, 2), conv_w_, conv_b_, 1, 1);
  const Var gated = ops::mul(ops::slice(h, 2, 0, hidden_), ops::slice(h, 2, hidden_, 2 * hidden_));
  return ops::linear(gated, out_w_, out_b_);
}

// ----------------------------------------------------------------- config

void NetworkConfig::validate() const {
  encoder.validate();
  decoder.validate();
  require(encoder.patch == 2, "network: encoder patch size must be 2 to align with the decoder scales");
  require(residual_hidden >= 1, "network: residual_hidden must be positive");
}

std::size_t NetworkConfig::input_multiple() const { return std::size_t{1} << levels(); }

std::size_t NetworkConfig::min_side() const {
  return std::max(encoder.window, decoder.window) << levels();
}

const std::vector<std::string>& network_config_keys() {
  static const std::vector<std::string> keys{
      "channels", "encoder_channels", "depths",     "encoder_heads", "heads",     "window",
      "K",        "n_a",              "ffn_ratio",  "mlp_ratio",     "mona_reduction", "sigma_min",
      "sigma_max", "mask",            "gaflb_hidden", "attention",   "residual_hidden", "tuning_mode"};
  return keys;
}

nlohmann::json to_json(const NetworkConfig& c) {
  return {{"channels", c.decoder.channels},
          {"encoder_channels", c.encoder.channels},
          {"depths", c.encoder.depths},
          {"encoder_heads", c.encoder.heads},
          {"heads", c.decoder.heads},
          {"window", c.decoder.window},
          {"K", c.decoder.blocks},
          {"n_a", c.decoder.agents},
          {"ffn_ratio", c.decoder.ffn_ratio},
          {"mlp_ratio", c.encoder.mlp_ratio},
          {"mona_reduction", c.encoder.mona_reduction},
          {"sigma_min", c.decoder.gaflb.sigma_min},
          {"sigma_max", c.decoder.gaflb.sigma_max},
          {"mask", freq::to_string(c.decoder.gaflb.mask)},
          {"gaflb_hidden", c.decoder.gaflb.head_hidden},
          {"attention", to_string(c.decoder.attention)},
          {"residual_hidden", c.residual_hidden},
          {"tuning_mode", to_string(c.mode)}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "network config: expected a JSON object");
  NetworkConfig c;
  try {
    c.decoder.channels = j.value("channels", c.decoder.channels);
    c.encoder.channels = j.value("encoder_channels", c.encoder.channels);
    c.encoder.depths = j.value("depths", c.encoder.depths);
    c.encoder.heads = j.value("encoder_heads", c.encoder.heads);
    c.decoder.heads = j.value("heads", c.decoder.heads);
    c.decoder.window = j.value("window", c.decoder.window);
    c.encoder.window = c.decoder.window;
    c.decoder.blocks = j.value("K", c.decoder.blocks);
    c.decoder.agents = j.value("n_a", c.decoder.agents);
    c.decoder.ffn_ratio = j.value("ffn_ratio", c.decoder.ffn_ratio);
    c.encoder.mlp_ratio = j.value("mlp_ratio", c.encoder.mlp_ratio);
    c.encoder.mona_reduction = j.value("mona_reduction", c.encoder.mona_reduction);
    c.decoder.gaflb.sigma_min = j.value("sigma_min", c.decoder.gaflb.sigma_min);
    c.decoder.gaflb.sigma_max = j.value("sigma_max", c.decoder.gaflb.sigma_max);
    c.decoder.gaflb.mask = freq::parse_mask_kind(j.value("mask", std::string(freq::to_string(c.decoder.gaflb.mask))));
    c.decoder.gaflb.head_hidden = j.value("gaflb_hidden", c.decoder.gaflb.head_hidden);
    c.decoder.attention = parse_attention_kind(j.value("attention", std::string(to_string(c.decoder.attention))));
    c.residual_hidden = j.value("residual_hidden", c.residual_hidden);
    c.mode = parse_tuning_mode(j.value("tuning_mode", std::string(to_string(c.mode))));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  c.decoder.gaflb.channels = c.decoder.channels;
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::uint64_t config_hash(const NetworkConfig& cfg) { return fnv1a(to_json(cfg).dump()); }

// ----------------------------------------------------------------- GFRRN

Gfrrn::Gfrrn(ParamStore& store, const NetworkConfig& cfg, std::uint64_t seed) : store_(&store), cfg_(cfg) {
  cfg_.decoder.gaflb.channels = cfg_.decoder.channels;
  cfg_.validate();
  const Scope root(store, seed, ParamGroup::kTask);
  const std::size_t c = cfg_.decoder.channels, n = cfg_.levels();
  enc1_ = adapters::Encoder1(root.sub("encoder1"), cfg_.encoder, cfg_.mode);
  enc2_ = Encoder2(root.sub("encoder2"), c, n);
  for (std::size_t i = 0; i < n; ++i) {
    const Scope f = root.sub("fusion" + std::to_string(i));
    const std::size_t cin = c + cfg_.encoder.channels[n - 1 - i];
    fusion_.push_back({f.param("t.weight", {cin, c}, Init::fan_in(cin)), f.param("t.bias", {c}, Init::zeros()),
                       f.param("r.weight", {cin, c}, Init::fan_in(cin)), f.param("r.bias", {c}, Init::zeros())});
    levels_.emplace_back(root.sub("decoder.level" + std::to_string(i)), cfg_.decoder);
  }
  const std::size_t cs = enc2_.stem_channels();
  const Scope out = root.sub("output");
  out_t_w_ = out.param("t.proj.weight", {c, cs}, Init::fan_in(c));
  out_t_b_ = out.param("t.proj.bias", {cs}, Init::zeros());
  out_r_w_ = out.param("r.proj.weight", {c, cs}, Init::fan_in(c));
  out_r_b_ = out.param("r.proj.bias", {cs}, Init::zeros());
  head_t_w_ = out.param("t.head.weight", {3, 3, cs, 3}, Init::zeros());
  head_t_b_ = out.param("t.head.bias", {3}, Init::zeros());
  head_r_w_ = out.param("r.head.weight", {3, 3, cs, 3}, Init::zeros());
  head_r_b_ = out.param("r.head.bias", {3}, Init::constant(-2.0));
  residual_ = ResidualEstimator(root.sub("residual"), cfg_.residual_hidden);
}

Prediction Gfrrn::forward(const Tensor& image, ForwardTrace* trace) const {
  require(image.rank() == 3 && image.dim(2) == 3 && image.dim(0) >= 2 && image.dim(1) >= 2,
          "gfrrn: expected an (H, W, 3) image with sides >= 2, got " + shape_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), n = cfg_.levels();
  auto padded_side = [&](std::size_t s) {
    const std::size_t m = cfg_.input_multiple();
    return std::max(cfg_.min_side(), (s + m - 1) / m * m);
  };
  const Tensor padded = pad_reflect(image, padded_side(h), padded_side(w));
  if (trace) {
    trace->padded_image = padded;
    trace->levels.assign(n, {});
  }
  const Var img = Var::constant(padded);
  const auto e1 = enc1_.forward(img);
  const auto e2 = enc2_.forward(img);

  StreamPair cur;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = n - i;
    const Var& enc = e1[s - 1];
    const auto& f = fusion_[i];
    StreamPair fused{ops::linear(ops::concat({e2[s].t, enc}, 2), f.wt, f.bt),
                     ops::linear(ops::concat({e2[s].r, enc}, 2), f.wr, f.br)};
    if (i > 0) fused = {ops::add(ops::upsample2x(cur.t), fused.t), ops::add(ops::upsample2x(cur.r), fused.r)};
    cur = levels_[i].forward(fused, downsample_area(padded, std::size_t{1} << s), trace ? &trace->levels[i] : nullptr);
  }
  const Var ft = ops::add(ops::linear(ops::upsample2x(cur.t), out_t_w_, out_t_b_), e2[0].t);
  const Var fr = ops::add(ops::linear(ops::upsample2x(cur.r), out_r_w_, out_r_b_), e2[0].r);

  Tensor logit = padded;
  for (auto& v : logit.data()) {
    const double p = std::clamp(v, 1e-3, 1.0 - 1e-3);
    v = std::log(p / (1.0 - p));
  }
  const Var t_hat = ops::sigmoid(ops::add(ops::conv2d(ops::gelu(ft), head_t_w_, head_t_b_, 1, 1), Var::constant(logit)));
  const Var r_hat = ops::sigmoid(ops::conv2d(ops::gelu(fr), head_r_w_, head_r_b_, 1, 1));
  const Var n_hat = residual_.forward(t_hat, r_hat, img);
  return {crop_var(t_hat, h, w), crop_var(r_hat, h, w), crop_var(n_hat, h, w)};
}

GfrrnOutput Gfrrn::infer(const Image& image, ForwardTrace* trace) const {
  const NoGradGuard guard;
  const Prediction p = forward(image.pixels(), trace);
  return {Image(p.t_hat.value()), Image(p.r_hat.value()), p.n_hat.value()};
}

}  // namespace gfrrn::net
