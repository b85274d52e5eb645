#include "gfrrn/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "gfrrn/error.hpp"

namespace gfrrn::train {

namespace {

constexpr char kMagic[8] = {'G', 'F', 'R', 'R', 'N', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::ostream& out, float f) { put(out, std::bit_cast<std::uint32_t>(f)); }

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(byte())) << (8 * i);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_string(std::size_t limit = std::size_t{1} << 26) {
    const auto n = get<std::uint32_t>();
    if (n > limit) fail("string length out of range");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) fail("truncated");
    return s;
  }
  void get_floats(std::vector<float>& out, std::size_t n) {
    out.resize(n);
    for (auto& f : out) f = get_f32();
  }
  [[noreturn]] void fail(const std::string& what) const { throw IoError("checkpoint " + path_ + ": " + what); }

 private:
  char byte() {
    char c;
    if (!in_.get(c)) fail("truncated");
    return c;
  }
  std::istream& in_;
  std::string path_;
};

std::vector<float> to_floats(const Tensor& t) {
  std::vector<float> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

Tensor from_floats(const std::vector<float>& v, const Shape& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool finite(const losses::LossReport& r) {
  return std::isfinite(r.content) && std::isfinite(r.exclusion) && std::isfinite(r.perceptual) &&
         std::isfinite(r.reconstruction) && std::isfinite(r.total);
}

std::string describe(const losses::LossReport& r) {
  return "content=" + fmt(r.content) + ", exclusion=" + fmt(r.exclusion) + ", perceptual=" + fmt(r.perceptual) +
         ", reconstruction=" + fmt(r.reconstruction) + ", total=" + fmt(r.total);
}

std::string csv_row(const StepRecord& r) {
  return std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt(r.loss.content) + "," +
         fmt(r.loss.exclusion) + "," + fmt(r.loss.perceptual) + "," + fmt(r.loss.reconstruction) + "," +
         fmt(r.loss.total);
}

std::ofstream open_log(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open " + path.string());
  if (fresh) out << "epoch,step,content,exclusion,perceptual,reconstruction,total\n";
  return out;
}

}  // namespace

// ----------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (image_size < 4) throw ConfigError("image_size must be at least 4");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
    throw ConfigError("adam moments must lie in [0, 1) and eps must be positive");
}

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys{"learning_rate", "batch_size",  "epochs",      "image_size",
                                             "seed",          "synthetic_pairs", "label_mode", "label_sigma",
                                             "adam_beta1",    "adam_beta2",  "adam_eps"};
  return keys;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  std::set<std::string> known;
  for (const auto* keys : {&net::network_config_keys(), &losses::loss_weight_keys(), &train_config_keys()})
    known.insert(keys->begin(), keys->end());
  for (const auto& item : j.items())
    if (!known.count(item.key())) throw ConfigError("run config: unknown key '" + item.key() + "'");

  RunConfig c;
  c.network = net::network_config_from_json(j);
  c.loss = losses::loss_weights_from_json(j);
  TrainConfig& t = c.train;
  try {
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.epochs = j.value("epochs", t.epochs);
    t.image_size = j.value("image_size", t.image_size);
    t.seed = j.value("seed", t.seed);
    t.synthetic_pairs = j.value("synthetic_pairs", t.synthetic_pairs);
    t.label_mode = labels::parse_reflection_label(j.value("label_mode", std::string(labels::to_string(t.label_mode))));
    t.label_sigma = j.value("label_sigma", t.label_sigma);
    t.adam_beta1 = j.value("adam_beta1", t.adam_beta1);
    t.adam_beta2 = j.value("adam_beta2", t.adam_beta2);
    t.adam_eps = j.value("adam_eps", t.adam_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  t.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = net::to_json(c.network);
  j.update(losses::to_json(c.loss));
  const TrainConfig& t = c.train;
  j.update({{"learning_rate", t.learning_rate},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"image_size", t.image_size},
            {"seed", t.seed},
            {"synthetic_pairs", t.synthetic_pairs},
            {"label_mode", labels::to_string(t.label_mode)},
            {"label_sigma", t.label_sigma},
            {"adam_beta1", t.adam_beta1},
            {"adam_beta2", t.adam_beta2},
            {"adam_eps", t.adam_eps}});
  return j;
}

std::uint64_t config_hash(const RunConfig& cfg) { return net::config_hash(cfg.network); }

void snap_to_float32(Tensor& t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

// ------------------------------------------------------------------- Adam

void Adam::step(ParamStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
  for (auto& p : store.entries()) {
    if (!p.trainable) continue;
    const Tensor g = p.var.grad();
    auto [it, fresh] = state_.try_emplace(p.name);
    if (fresh) it->second = {Tensor(p.var.shape()), Tensor(p.var.shape())};
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    Tensor& x = p.var.mutable_value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      x[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ------------------------------------------------------------- checkpoint

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put(out, Checkpoint::kVersion);
    put(out, ck.config_hash);
    put_string(out, ck.config.dump());
    put(out, ck.epoch);
    put(out, ck.step);
    put(out, ck.adam_steps);
    put(out, static_cast<std::uint32_t>(ck.entries.size()));
    for (const auto& e : ck.entries) {
      put_string(out, e.name);
      put(out, static_cast<std::uint8_t>(e.group));
      put(out, static_cast<std::uint8_t>(e.trainable ? 1 : 0));
      put(out, static_cast<std::uint32_t>(e.shape.size()));
      for (std::size_t d : e.shape) put(out, static_cast<std::uint64_t>(d));
      for (float f : e.values) put_f32(out, f);
      const bool moments = !e.m.empty();
      put(out, static_cast<std::uint8_t>(moments ? 1 : 0));
      if (moments) {
        for (float f : e.m) put_f32(out, f);
        for (float f : e.v) put_f32(out, f);
      }
    }
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic)) r.fail("not a checkpoint archive");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) r.fail("unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = r.get<std::uint64_t>();
  try {
    ck.config = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad config record: ") + e.what());
  }
  ck.epoch = r.get<std::uint64_t>();
  ck.step = r.get<std::uint64_t>();
  ck.adam_steps = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    e.name = r.get_string(4096);
    const auto group = r.get<std::uint8_t>();
    if (group > static_cast<std::uint8_t>(ParamGroup::kTask)) r.fail("bad group tag for " + e.name);
    e.group = static_cast<ParamGroup>(group);
    e.trainable = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) r.fail("bad rank for " + e.name);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      numel *= e.shape.back();
      if (numel > (std::size_t{1} << 31)) r.fail("tensor too large: " + e.name);
    }
    r.get_floats(e.values, numel);
    if (r.get<std::uint8_t>() != 0) {
      r.get_floats(e.m, numel);
      r.get_floats(e.v, numel);
    }
    ck.entries.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return ck;
}

void load_parameters(ParamStore& store, const Checkpoint& ck, bool allow_extra) {
  std::set<std::string> used;
  for (auto& p : store.entries()) {
    const auto* e = ck.find(p.name);
    if (!e) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (e->shape != p.var.shape())
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + shape_string(e->shape) + ", expected " +
                        shape_string(p.var.shape()));
    p.var.mutable_value() = from_floats(e->values, e->shape);
    used.insert(p.name);
  }
  if (!allow_extra)
    for (const auto& e : ck.entries)
      if (!used.count(e.name)) throw ConfigError("checkpoint has unknown parameter '" + e.name + "'");
}

std::size_t load_backbone_weights(ParamStore& store, const std::filesystem::path& archive) {
  const Checkpoint ck = read_checkpoint(archive);
  std::size_t loaded = 0;
  for (auto& p : store.entries()) {
    if (p.group != ParamGroup::kBackbone) continue;
    const auto* e = ck.find(p.name);
    if (!e) continue;
    if (e->shape != p.var.shape())
      throw ConfigError("backbone weight '" + p.name + "' has shape " + shape_string(e->shape) + ", expected " +
                        shape_string(p.var.shape()));
    p.var.mutable_value() = from_floats(e->values, e->shape);
    ++loaded;
  }
  return loaded;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(const RunConfig& cfg, std::uint64_t model_seed)
    : cfg_(cfg),
      store_(std::make_unique<ParamStore>()),
      adam_(cfg.train.learning_rate, cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps),
      extractor_(std::make_unique<losses::RandomConvExtractor>(1)) {
  cfg_.train.validate();
  cfg_.loss.validate();
  model_ = std::make_unique<net::Gfrrn>(*store_, cfg_.network, model_seed);
  for (auto& p : store_->entries()) snap_to_float32(p.var.mutable_value());
  view_ = trainable_parameter_filter(*store_, cfg_.network.mode);
  view_.sync_requires_grad();
}

losses::LossReport Trainer::train_step(const std::vector<data::Sample>& batch) {
  require(!batch.empty(), "train_step: empty batch");
  view_.sync_requires_grad();
  view_.zero_grad();
  const double inv = 1.0 / double(batch.size());
  losses::LossReport mean;
  for (const auto& s : batch) {
    std::optional<losses::LossTerms> terms;
    try {
      const net::Prediction p = model_->forward(s.mixture.pixels());
      terms = losses::total_loss(p.t_hat, p.r_hat, p.n_hat, s.mixture, s.labels, *extractor_, cfg_.loss);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_ + 1) + ": non-finite values on '" + s.id + "': " + e.what());
    }
    const losses::LossReport r = terms->report();
    if (!finite(r))
      throw NumericError("step " + std::to_string(step_ + 1) + ": non-finite loss on '" + s.id + "' (" + describe(r) +
                         ")");
    backward(ops::scale(terms->total, inv));
    mean.content += inv * r.content;
    mean.exclusion += inv * r.exclusion;
    mean.perceptual += inv * r.perceptual;
    mean.reconstruction += inv * r.reconstruction;
    mean.total += inv * r.total;
  }
  adam_.step(view_);
  ++step_;
  return mean;
}

losses::LossReport Trainer::evaluate(const data::Sample& s) const {
  const NoGradGuard guard;
  const net::Prediction p = model_->forward(s.mixture.pixels());
  return losses::total_loss(p.t_hat, p.r_hat, p.n_hat, s.mixture, s.labels, *extractor_, cfg_.loss).report();
}

void Trainer::snap_state() {
  for (auto& p : store_->entries()) snap_to_float32(p.var.mutable_value());
  for (auto& [name, st] : adam_.state()) {
    snap_to_float32(st.m);
    snap_to_float32(st.v);
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config_hash = config_hash(cfg_);
  ck.config = to_json(cfg_);
  ck.epoch = epoch_;
  ck.step = step_;
  ck.adam_steps = adam_.steps();
  for (const auto& p : view_.entries()) {
    Checkpoint::Entry e;
    e.name = p.name;
    e.group = p.group;
    e.trainable = p.trainable;
    e.shape = p.var.shape();
    e.values = to_floats(p.var.value());
    if (auto it = adam_.state().find(p.name); it != adam_.state().end()) {
      e.m = to_floats(it->second.m);
      e.v = to_floats(it->second.v);
    }
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const { write_checkpoint(path, checkpoint()); }

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.config_hash != config_hash(cfg_))
    throw ConfigError("checkpoint " + path.string() + " was written for network config " + hex(ck.config_hash) +
                      ", this run uses " + hex(config_hash(cfg_)));
  load_parameters(*store_, ck);
  adam_.state().clear();
  for (const auto& p : view_.entries()) {
    const auto* e = ck.find(p.name);
    if (p.trainable && e && !e->m.empty())
      adam_.state()[p.name] = {from_floats(e->m, e->shape), from_floats(e->v, e->shape)};
  }
  adam_.set_steps(ck.adam_steps);
  epoch_ = ck.epoch;
  step_ = ck.step;
}

// -------------------------------------------------------------------- fit

std::vector<data::Sample> epoch_samples(const TrainConfig& cfg, const data::Manifest* manifest, std::size_t epoch) {
  std::vector<data::Sample> out;
  if (manifest)
    for (const auto& e : manifest->entries)
      out.push_back(data::load_pair(e, cfg.label_mode, cfg.label_sigma, cfg.image_size));
  const std::uint64_t base = fnv1a(std::to_string(cfg.seed) + "/" + std::to_string(epoch));
  for (std::size_t i = 0; i < cfg.synthetic_pairs; ++i)
    out.push_back(data::synthetic_sample(cfg.image_size, (base + i) & 0xffffffffffffULL, cfg.label_mode, cfg.label_sigma));
  std::mt19937_64 rng(base);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

FitResult fit(Trainer& tr, const FitOptions& opt) {
  require(!opt.out_dir.empty(), "fit: out_dir is required");
  std::filesystem::create_directories(opt.out_dir);
  const TrainConfig& cfg = tr.config().train;
  FitResult res;
  res.trainable_parameters = tr.view().count_trainable();
  res.total_parameters = tr.view().count_all();
  {
    const nlohmann::json info{{"tuning_mode", to_string(tr.config().network.mode)},
                              {"trainable_parameters", res.trainable_parameters},
                              {"total_parameters", res.total_parameters},
                              {"config_hash", hex(config_hash(tr.config()))},
                              {"config", to_json(tr.config())}};
    std::ofstream out(opt.out_dir / "run.json");
    out << info.dump(2) << "\n";
    if (!out) throw IoError("cannot write " + (opt.out_dir / "run.json").string());
  }
  std::ofstream steps_log = open_log(opt.out_dir / "steps.csv");
  std::ofstream metrics_log = open_log(opt.out_dir / "metrics.csv");

  auto capped = [&] { return opt.max_steps > 0 && tr.step() >= opt.max_steps; };
  for (std::size_t e = tr.epoch(); e < cfg.epochs && !capped(); ++e) {
    const auto samples = epoch_samples(cfg, opt.manifest, e);
    losses::LossReport sum;
    std::size_t n = 0;
    bool stopped = false;
    for (std::size_t i = 0; i < samples.size(); i += cfg.batch_size) {
      if (capped()) {
        stopped = true;
        break;
      }
      const std::vector<data::Sample> batch(samples.begin() + i,
                                            samples.begin() + std::min(samples.size(), i + cfg.batch_size));
      const StepRecord rec{e, tr.step() + 1, tr.train_step(batch)};
      res.steps.push_back(rec);
      steps_log << csv_row(rec) << "\n" << std::flush;
      if (opt.on_step) opt.on_step(rec);
      sum.content += rec.loss.content;
      sum.exclusion += rec.loss.exclusion;
      sum.perceptual += rec.loss.perceptual;
      sum.reconstruction += rec.loss.reconstruction;
      sum.total += rec.loss.total;
      ++n;
    }
    tr.snap_state();
    if (stopped || (capped() && n * cfg.batch_size < samples.size())) {
      const auto path = opt.out_dir / ("checkpoint_step" + std::to_string(tr.step()) + ".bin");
      tr.save_checkpoint(path);
      res.checkpoints.push_back(path);
      break;
    }
    tr.set_epoch(e + 1);
    char name[48];
    std::snprintf(name, sizeof name, "checkpoint_epoch%03zu.bin", e + 1);
    tr.save_checkpoint(opt.out_dir / name);
    res.checkpoints.push_back(opt.out_dir / name);
    const double inv = n ? 1.0 / double(n) : 0.0;
    const StepRecord mean{e + 1, tr.step(),
                          {sum.content * inv, sum.exclusion * inv, sum.perceptual * inv, sum.reconstruction * inv,
                           sum.total * inv}};
    metrics_log << csv_row(mean) << "\n" << std::flush;
  }
  return res;
}

}  // namespace gfrrn::train
