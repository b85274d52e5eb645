#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gfrrn/autodiff.hpp"

namespace gfrrn {

enum class ParamGroup : std::uint8_t { kUntagged = 0, kBackbone = 1, kMona = 2, kTask = 3 };
enum class TuningMode : std::uint8_t { kFrozen = 0, kFft = 1, kMona = 2 };

const char* to_string(ParamGroup g);
const char* to_string(TuningMode m);
TuningMode parse_tuning_mode(const std::string& s);
ParamGroup parse_param_group(const std::string& s);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kUntagged;
  bool trainable = true;
  Var var;  // leaf node shared with every module that reads it
};

/// Named, shape-tagged parameter collection. Copies are shallow: they share
/// the underlying tensors but carry their own trainable flags.
class ParamStore {
 public:
  Var create(const std::string& name, Tensor init, ParamGroup group);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);
  Var get(const std::string& name) const { return at(name).var; }

  std::vector<Parameter>& entries() { return entries_; }
  const std::vector<Parameter>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Number of scalar values over parameters matching the predicate.
  std::size_t count(const std::function<bool(const Parameter&)>& pred) const;
  std::size_t count_all() const;
  std::size_t count_trainable() const;

  /// Makes node->requires_grad follow the trainable flags.
  void sync_requires_grad();
  /// Marks every parameter as requiring gradients (gradient checks).
  void require_all_grads();
  void zero_grad();

  /// FNV-1a over names and raw value bytes of parameters in `group`.
  std::uint64_t hash_values(ParamGroup group) const;
  std::uint64_t hash_values() const;

 private:
  std::vector<Parameter> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Sets trainable flags from (group, mode):
///   fft    -> everything trainable
///   mona   -> backbone frozen, mona and task trainable
///   frozen -> backbone frozen, task trainable (the frozen baseline is built
///             without mona layers; any present are frozen too)
/// Throws ConfigError on an untagged parameter.
ParamStore trainable_parameter_filter(const ParamStore& store, TuningMode mode);

/// How a fresh parameter is filled.
struct Init {
  enum class Kind { kZeros, kConstant, kNormal, kUniform } kind = Kind::kZeros;
  double a = 0.0;

  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init constant(double v) { return {Kind::kConstant, v}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
  static Init uniform(double bound) { return {Kind::kUniform, bound}; }
  /// Uniform(+-1/sqrt(fan_in)), the usual default for linear and conv layers.
  static Init fan_in(std::size_t fan) { return uniform(1.0 / std::sqrt(static_cast<double>(fan))); }
};

/// Hierarchical parameter factory. Each parameter draws from its own RNG
/// stream keyed on (seed, full name), so initial values do not depend on
/// creation order or on which optional layers exist.
class Scope {
 public:
  Scope(ParamStore& store, std::uint64_t seed, ParamGroup group, std::string prefix = "")
      : store_(&store), seed_(seed), group_(group), prefix_(std::move(prefix)) {}

  Scope sub(const std::string& name) const;
  Scope with_group(ParamGroup group) const;

  Var param(const std::string& name, Shape shape, Init init) const;

  ParamStore& store() const { return *store_; }
  ParamGroup group() const { return group_; }
  const std::string& prefix() const { return prefix_; }
  std::uint64_t seed() const { return seed_; }

 private:
  ParamStore* store_;
  std::uint64_t seed_;
  ParamGroup group_;
  std::string prefix_;
};

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ULL);

}  // namespace gfrrn
