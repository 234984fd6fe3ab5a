#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "graftnet/tape.hpp"

namespace graftnet::testing {

/// Builds a scalar loss on `tape` from the current values of `inputs`.
using LossBuilder =
    std::function<Var(Tape<double>& tape, std::vector<BasicParameter<double>>& inputs)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

inline double loss_value(const LossBuilder& build,
                         std::vector<BasicParameter<double>>& inputs) {
  Tape<double> tape;
  const Var loss = build(tape, inputs);
  return tape.value(loss)[0];
}

/// Relative error |a - n| / max(|a|, |n|, floor) per element, maximised.
/// `collect`, when given, runs after the analytic backward pass to copy
/// gradients that landed in state owned by the builder (e.g. BN gamma/beta)
/// back into `inputs`.
inline GradCheckResult grad_check(
    const LossBuilder& build, std::vector<BasicParameter<double>> inputs,
    double h = 1e-4, double floor = 1e-6,
    const std::function<void(std::vector<BasicParameter<double>>&)>& collect = {}) {
  for (auto& p : inputs) {
    p.grad = BasicTensor<double>(p.value.shape());
    p.trainable = true;
  }
  {
    Tape<double> tape;
    const Var loss = build(tape, inputs);
    tape.backward(loss);
    if (collect) collect(inputs);
  }
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].value.numel(); ++i) {
      auto perturbed = inputs;
      perturbed[k].value[i] = inputs[k].value[i] + h;
      const double up = loss_value(build, perturbed);
      perturbed[k].value[i] = inputs[k].value[i] - h;
      const double down = loss_value(build, perturbed);
      const double numeric = (up - down) / (2 * h);
      const double analytic = inputs[k].grad[i];
      const double abs_err = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
      ++r.checked;
    }
  }
  return r;
}

inline BasicTensor<double> random_tensor(Shape shape, std::mt19937_64& rng,
                                         double lo = -1.0, double hi = 1.0) {
  BasicTensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Values bounded away from zero, for checking piecewise-linear layers away
/// from their kinks.
inline BasicTensor<double> random_tensor_away_from_zero(Shape shape,
                                                        std::mt19937_64& rng,
                                                        double gap = 0.05) {
  BasicTensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

/// Projects an arbitrary tensor output onto a fixed random direction so the
/// scalar loss exercises every output element.
inline Var random_projection(Tape<double>& tape, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& shape = tape.value(y).shape();
  const std::size_t n = shape[0];
  const std::size_t d = tape.value(y).numel() / n;
  BasicTensor<double> flat_w({1, d});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : flat_w.data()) v = u(rng);
  const Var flat = reshape(tape, y, {n, d});
  const Var out = dense(tape, flat, tape.constant(flat_w),
                        tape.constant(BasicTensor<double>({1})));
  const Var s = sum(tape, out);
  return s;
}

}  // namespace graftnet::testing
