#pragma once

// Central-difference oracle used by the gradient tests. It only evaluates
// forward passes; the analytic side comes from Tape::backward.

#include <doctest.h>

#include <functional>
#include <random>
#include <vector>

#include "dipwm/tape.hpp"

namespace dipwm::testing {

using DTensor = Tensor<double>;
using DTape = Tape<double>;
using DVar = DTape::Var;

inline DTensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  DTensor t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = d(rng);
  return t;
}

using GraphFn = std::function<DVar(DTape&, const std::vector<DVar>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

/// Compares d<r, f(inputs)>/d inputs from the tape against central
/// differences. The error metric per entry is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult gradcheck(const GraphFn& f, std::vector<DTensor> inputs, std::uint64_t seed = 1,
                                 double h = 1e-6, double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  DTensor weights;
  std::vector<DTensor> analytic;
  {
    DTape tape;
    std::vector<DVar> vars;
    for (const auto& in : inputs) vars.push_back(tape.variable(in));
    auto out = f(tape, vars);
    weights = random_tensor(tape.shape(out), rng);
    tape.backward(out, weights);
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }
  auto objective = [&](const std::vector<DTensor>& xs) {
    DTape tape;
    std::vector<DVar> vars;
    for (const auto& in : xs) vars.push_back(tape.constant(in));
    return (tape.value(f(tape, vars)).data * weights.data).sum();
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data[i];
      inputs[k].data[i] = orig + h;
      const double up = objective(inputs);
      inputs[k].data[i] = orig - h;
      const double down = objective(inputs);
      inputs[k].data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(a));
    }
  }
  return res;
}

using ParamGraphFn = std::function<DVar(DTape&, const Bound<double>&)>;

/// Like `gradcheck`, but differentiates with respect to every entry of a
/// ParamSet bound on the tape.
inline GradCheckResult param_gradcheck(const ParamGraphFn& f, ParamSet<double> params,
                                       std::uint64_t seed = 1, double h = 1e-6, double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  DTensor weights;
  ParamSet<double> analytic;
  {
    DTape tape;
    Bound<double> bound(tape, params, true);
    auto out = f(tape, bound);
    weights = random_tensor(tape.shape(out), rng);
    tape.backward(out, weights);
    analytic = bound.gradients(tape);
  }
  auto objective = [&]() {
    DTape tape;
    Bound<double> bound(tape, params, false);
    return (tape.value(f(tape, bound)).data * weights.data).sum();
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      const double orig = params[k].data[i];
      params[k].data[i] = orig + h;
      const double up = objective();
      params[k].data[i] = orig - h;
      const double down = objective();
      params[k].data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(a));
    }
  }
  return res;
}

}  // namespace dipwm::testing
