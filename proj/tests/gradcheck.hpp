#pragma once

// Central-difference gradient checking shared by the unit and acceptance
// suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "d3lane/nn/layers.hpp"
#include "d3lane/nn/rng.hpp"

namespace d3l::gradcheck {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;    // coordinates whose difference interval straddles a kink
  std::string worst;  // parameter name and index of the largest error
};

inline double rel_err(double a, double n) {
  const double denom = std::max({std::abs(a), std::abs(n), 1e-7});
  return std::abs(a - n) / denom;
}

namespace detail {

// Central difference at `step`; nullopt when the objective is visibly
// non-smooth inside the interval (ReLU / L1 kinks), detected by comparing
// against the half-step estimate, which agrees to O(step^2) otherwise.
template <class Set>
std::optional<double> central_difference(Set&& set_value, double orig, const std::function<double()>& loss,
                                         double step) {
  auto diff = [&](double h) {
    set_value(orig + h);
    const double lp = loss();
    set_value(orig - h);
    const double lm = loss();
    set_value(orig);
    return (lp - lm) / (2 * h);
  };
  const double full = diff(step);
  const double half = diff(step / 2);
  if (rel_err(full, half) > 1e-4) return std::nullopt;
  return full;
}

}  // namespace detail

// `loss` recomputes the scalar objective from current parameter values.
// Analytic gradients must already be present in each parameter's grad.
// Checks up to `per_param` smooth coordinates per parameter tensor.
inline GradCheckResult check_params(const nn::ParamList<double>& params, const std::function<double()>& loss,
                                    int per_param, std::uint64_t seed, double step = 1e-4) {
  GradCheckResult r;
  nn::Rng rng(seed);
  for (auto* p : params) {
    const int n = static_cast<int>(p->size());
    const int want = std::min(per_param, n);
    int done = 0;
    for (int attempt = 0; attempt < 4 * want && done < want; ++attempt) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      auto numeric = detail::central_difference([&](double v) { p->value[i] = v; }, p->value[i], loss, step);
      if (!numeric) {
        ++r.skipped;
        continue;
      }
      const double e = rel_err(p->grad[i], *numeric);
      if (e > r.max_rel_err) {
        r.max_rel_err = e;
        r.worst = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(p->grad[i]) + " numeric " +
                  std::to_string(*numeric);
      }
      ++r.checked;
      ++done;
    }
  }
  return r;
}

// Same, for gradients with respect to an input vector.
inline GradCheckResult check_inputs(d3l::Buffer<double>& x, const d3l::Buffer<double>& analytic,
                                    const std::function<double()>& loss, int samples, std::uint64_t seed,
                                    double step = 1e-4) {
  GradCheckResult r;
  nn::Rng rng(seed);
  const int n = static_cast<int>(x.size());
  const int want = std::min(samples, n);
  for (int attempt = 0; attempt < 4 * want && r.checked < want; ++attempt) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
    auto numeric = detail::central_difference([&](double v) { x[i] = v; }, x[i], loss, step);
    if (!numeric) {
      ++r.skipped;
      continue;
    }
    const double e = rel_err(analytic[i], *numeric);
    if (e > r.max_rel_err) {
      r.max_rel_err = e;
      r.worst = "input[" + std::to_string(i) + "] analytic " + std::to_string(analytic[i]) + " numeric " +
                std::to_string(*numeric);
    }
    ++r.checked;
  }
  return r;
}

}  // namespace d3l::gradcheck

namespace d3l::gradcheck {

// Zero-initialized biases put ReLU inputs exactly on the kink wherever the
// incoming activations vanish; jitter them so finite differences are smooth.
inline void jitter_biases(const nn::ParamList<double>& params, std::uint64_t seed, double scale = 0.1) {
  nn::Rng rng(seed);
  for (auto* p : params)
    if (p->name.size() >= 4 && p->name.compare(p->name.size() - 4, 4, "bias") == 0)
      for (auto& v : p->value) v = rng.uniform(-scale, scale);
}

}  // namespace d3l::gradcheck
