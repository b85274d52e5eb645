#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfrrn/data.hpp"
#include "gfrrn/losses.hpp"
#include "gfrrn/network.hpp"

namespace gfrrn::train {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 1;
  std::size_t epochs = 60;
  std::size_t image_size = 384;
  std::uint64_t seed = 0;
  /// Fresh synthetic pairs drawn each epoch, in addition to manifest pairs.
  std::size_t synthetic_pairs = 4;
  labels::ReflectionLabel label_mode = labels::ReflectionLabel::kUnified;
  double label_sigma = 0.0;  // <= 0: default for the crop size
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Network, loss and training settings read from one flat JSON object.
struct RunConfig {
  net::NetworkConfig network;
  losses::LossWeights loss;
  TrainConfig train;
};

/// Training keys: learning_rate, batch_size, epochs, image_size, seed,
/// synthetic_pairs, label_mode, label_sigma, adam_beta1, adam_beta2, adam_eps.
const std::vector<std::string>& train_config_keys();
/// Unknown keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);
/// Hash of the network part, which decides checkpoint compatibility.
std::uint64_t config_hash(const RunConfig& cfg);

/// Rounds every value to the nearest float32 (checkpoint precision).
void snap_to_float32(Tensor& t);

/// Adam with default moments. State exists only for trainable parameters.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  /// Updates every trainable parameter of `store` from its gradient.
  void step(ParamStore& store);

  struct State {
    Tensor m, v;
  };
  std::size_t steps() const { return t_; }
  const std::unordered_map<std::string, State>& state() const { return state_; }
  std::unordered_map<std::string, State>& state() { return state_; }
  void set_steps(std::size_t t) { t_ = t; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, State> state_;
};

/// Parsed checkpoint archive.
///
/// Layout (little endian): magic "GFRRNCKP", u32 version, u64 config hash,
/// u32 length + run-config JSON, u64 epoch, u64 step, u64 adam steps,
/// u32 entry count, then per entry: u32 length + name, u8 group,
/// u8 trainable, u32 rank, u64 dims, f32 values, u8 has-moments and, when
/// set, f32 first and second moments.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    ParamGroup group = ParamGroup::kUntagged;
    bool trainable = false;
    Shape shape;
    std::vector<float> values;
    std::vector<float> m, v;  // empty without optimizer state
  };

  std::uint64_t config_hash = 0;
  nlohmann::json config;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  std::uint64_t adam_steps = 0;
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const;
};

/// Writes to a temporary file, then renames over `path`.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError for unreadable or malformed archives.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `store`. Every store parameter must be
/// present with the same shape; extra entries are an error unless
/// `allow_extra`.
void load_parameters(ParamStore& store, const Checkpoint& ckpt, bool allow_extra = false);

/// Loads externally converted backbone weights: entries whose names match a
/// kBackbone parameter are copied (shapes must match); returns how many.
std::size_t load_backbone_weights(ParamStore& store, const std::filesystem::path& archive);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  losses::LossReport loss;
};

/// Owns the parameters, model, optimizer and counters of one training run.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg, std::uint64_t model_seed = 0);

  /// Forward, total loss, gradients of the trainable parameters, Adam update.
  /// Throws NumericError (naming the step and term values) on a non-finite loss.
  losses::LossReport train_step(const std::vector<data::Sample>& batch);
  losses::LossReport train_step(const data::Sample& sample) { return train_step(std::vector<data::Sample>{sample}); }
  /// Total loss without an update.
  losses::LossReport evaluate(const data::Sample& sample) const;

  /// Rounds parameters and optimizer moments to float32 so that a checkpoint
  /// written now restores this exact state.
  void snap_state();
  Checkpoint checkpoint() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state and counters. Throws ConfigError
  /// when the network config hash differs.
  void load_checkpoint(const std::filesystem::path& path);

  const RunConfig& config() const { return cfg_; }
  ParamStore& store() { return *store_; }
  const ParamStore& store() const { return *store_; }
  /// Store copy carrying the tuning mode's trainable flags.
  const ParamStore& view() const { return view_; }
  const net::Gfrrn& model() const { return *model_; }
  const Adam& optimizer() const { return adam_; }
  Adam& optimizer() { return adam_; }
  const losses::FeatureExtractor& extractor() const { return *extractor_; }

  std::size_t step() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  void set_epoch(std::size_t e) { epoch_ = e; }

 private:
  RunConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<net::Gfrrn> model_;
  ParamStore view_;
  Adam adam_;
  std::unique_ptr<losses::FeatureExtractor> extractor_;
  std::size_t step_ = 0, epoch_ = 0;
};

/// The pairs of one epoch: manifest pairs (centre-cropped to image_size)
/// followed by `synthetic_pairs` fresh synthetic pairs seeded from
/// (seed, epoch), shuffled with the same seed.
std::vector<data::Sample> epoch_samples(const TrainConfig& cfg, const data::Manifest* manifest, std::size_t epoch);

struct FitOptions {
  std::filesystem::path out_dir;
  /// Stop after this many optimizer steps in total (0: run every epoch).
  std::size_t max_steps = 0;
  const data::Manifest* manifest = nullptr;
  std::function<void(const StepRecord&)> on_step;
};

struct FitResult {
  std::vector<StepRecord> steps;         // steps taken by this call
  std::vector<std::filesystem::path> checkpoints;
  std::size_t trainable_parameters = 0;
  std::size_t total_parameters = 0;
};

/// Epoch loop from trainer.epoch() to cfg.epochs. Per epoch: resample the
/// data, one step per batch, then write checkpoint_epochNNN.bin and one row
/// of epoch means to metrics.csv. Every step appends a row to steps.csv.
/// Stopping at max_steps inside an epoch writes checkpoint_stepN.bin instead.
/// run.json records the parameter counts and mode.
FitResult fit(Trainer& trainer, const FitOptions& opt);

}  // namespace gfrrn::train
