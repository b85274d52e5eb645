#include "gfrrn/params.hpp"

#include <cmath>
#include <random>

#include "gfrrn/error.hpp"

namespace gfrrn {

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kMona: return "mona";
    case ParamGroup::kTask: return "task";
    case ParamGroup::kUntagged: break;
  }
  return "untagged";
}

const char* to_string(TuningMode m) {
  switch (m) {
    case TuningMode::kFrozen: return "frozen";
    case TuningMode::kFft: return "fft";
    case TuningMode::kMona: return "mona";
  }
  return "?";
}

TuningMode parse_tuning_mode(const std::string& s) {
  if (s == "frozen") return TuningMode::kFrozen;
  if (s == "fft") return TuningMode::kFft;
  if (s == "mona") return TuningMode::kMona;
  throw ConfigError("unknown tuning mode '" + s + "' (expected frozen, fft or mona)");
}

ParamGroup parse_param_group(const std::string& s) {
  if (s == "backbone") return ParamGroup::kBackbone;
  if (s == "mona") return ParamGroup::kMona;
  if (s == "task") return ParamGroup::kTask;
  return ParamGroup::kUntagged;
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) { return fnv1a(s.data(), s.size(), h); }

Var ParamStore::create(const std::string& name, Tensor init, ParamGroup group) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  Parameter p;
  p.name = name;
  p.group = group;
  p.trainable = true;
  p.var = Var::leaf(std::move(init), true);
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(p));
  return entries_.back().var;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return entries_[it->second];
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return entries_[it->second];
}

std::size_t ParamStore::count(const std::function<bool(const Parameter&)>& pred) const {
  std::size_t n = 0;
  for (const auto& p : entries_)
    if (pred(p)) n += p.var.size();
  return n;
}

std::size_t ParamStore::count_all() const {
  return count([](const Parameter&) { return true; });
}

std::size_t ParamStore::count_trainable() const {
  return count([](const Parameter& p) { return p.trainable; });
}

void ParamStore::sync_requires_grad() {
  for (auto& p : entries_) p.var.node()->requires_grad = p.trainable;
}

void ParamStore::require_all_grads() {
  for (auto& p : entries_) p.var.node()->requires_grad = true;
}

void ParamStore::zero_grad() {
  for (auto& p : entries_) p.var.node()->zero_grad();
}

std::uint64_t ParamStore::hash_values(ParamGroup group) const {
  std::uint64_t h = fnv1a(to_string(group));
  for (const auto& p : entries_) {
    if (p.group != group) continue;
    h = fnv1a(p.name, h);
    h = fnv1a(p.var.value().ptr(), p.var.size() * sizeof(double), h);
  }
  return h;
}

std::uint64_t ParamStore::hash_values() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : entries_) {
    h = fnv1a(p.name, h);
    h = fnv1a(p.var.value().ptr(), p.var.size() * sizeof(double), h);
  }
  return h;
}

ParamStore trainable_parameter_filter(const ParamStore& store, TuningMode mode) {
  ParamStore out = store;
  for (auto& p : out.entries()) {
    switch (p.group) {
      case ParamGroup::kUntagged:
        throw ConfigError("parameter '" + p.name + "' has no group tag");
      case ParamGroup::kTask:
        p.trainable = true;
        break;
      case ParamGroup::kBackbone:
        p.trainable = mode == TuningMode::kFft;
        break;
      case ParamGroup::kMona:
        p.trainable = mode != TuningMode::kFrozen;
        break;
    }
  }
  return out;
}

Scope Scope::sub(const std::string& name) const {
  return Scope(*store_, seed_, group_, prefix_.empty() ? name : prefix_ + "." + name);
}

Scope Scope::with_group(ParamGroup group) const { return Scope(*store_, seed_, group, prefix_); }

Var Scope::param(const std::string& name, Shape shape, Init init) const {
  const std::string full = prefix_.empty() ? name : prefix_ + "." + name;
  Tensor t(std::move(shape));
  std::mt19937_64 rng(fnv1a(full, seed_ ^ 0x9e3779b97f4a7c15ULL));
  switch (init.kind) {
    case Init::Kind::kZeros:
      break;
    case Init::Kind::kConstant:
      t.fill(init.a);
      break;
    case Init::Kind::kNormal: {
      std::normal_distribution<double> dist(0.0, init.a);
      for (auto& v : t.data()) v = dist(rng);
      break;
    }
    case Init::Kind::kUniform: {
      std::uniform_real_distribution<double> dist(-init.a, init.a);
      for (auto& v : t.data()) v = dist(rng);
      break;
    }
  }
  return store_->create(full, std::move(t), group_);
}

}  // namespace gfrrn
