#include "gfrrn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gfrrn/error.hpp"

namespace gfrrn {

namespace {

double evaluate(const std::function<Var()>& loss) {
  NoGradGuard no_grad;
  const Var v = loss();
  require(v.size() == 1, "gradient_check: loss must be a scalar");
  return v.value()[0];
}

}  // namespace

GradCheckReport gradient_check(const std::function<Var()>& loss, const std::vector<NamedVar>& inputs,
                               const GradCheckOptions& options) {
  require(options.step > 0.0, "gradient_check: step must be positive");
  std::vector<bool> saved_flags;
  for (const auto& in : inputs) {
    require(in.var.defined() && in.var.get()->parents.empty(), "gradient_check: '" + in.name + "' is not a leaf");
    saved_flags.push_back(in.var.get()->requires_grad);
    in.var.get()->requires_grad = true;
    in.var.get()->zero_grad();
  }

  const Var root = loss();
  backward(root);
  std::vector<Tensor> analytic;
  for (const auto& in : inputs) analytic.push_back(in.var.grad());

  // (input, entry) pairs to probe.
  std::mt19937_64 rng(options.seed);
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> idx(inputs[i].var.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.samples_per_tensor > 0 && idx.size() > options.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.samples_per_tensor);
    }
    for (auto k : idx) probes.emplace_back(i, k);
  }
  if (options.total_samples > 0 && probes.size() > options.total_samples) {
    std::shuffle(probes.begin(), probes.end(), rng);
    probes.resize(options.total_samples);
  }

  GradCheckReport report;
  for (const auto& [i, k] : probes) {
    Tensor& value = inputs[i].var.get()->value;
    const double original = value[k];
    value[k] = original + options.step;
    const double plus = evaluate(loss);
    value[k] = original - options.step;
    const double minus = evaluate(loss);
    value[k] = original;

    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic[i][k];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error || report.checked == 0) {
      report.max_rel_error = rel;
      report.worst = inputs[i].name + "[" + std::to_string(k) + "]";
    }
    ++report.checked;
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].var.get()->requires_grad = saved_flags[i];
    inputs[i].var.get()->zero_grad();
  }
  return report;
}

}  // namespace gfrrn
