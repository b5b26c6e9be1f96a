#pragma once

// Central finite-difference oracle. Independent of the tape's backward rules:
// it only ever evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil::testing {

using LossFn = std::function<Var(Tape&, std::vector<Var>&)>;

inline double eval_loss(const LossFn& fn, std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(tape.constant(t));
  return fn(tape, vars).value().item();
}

/// Max over inputs of ||analytic - numeric||_inf / ||numeric||_inf.
inline double gradcheck(const LossFn& fn, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.clear_grad();
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tape.watch(t));
    tape.backward(fn(tape, vars));
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    std::vector<double> analytic(inputs[p].size(), 0.0);
    if (inputs[p].has_grad()) {
      auto g = inputs[p].grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    double max_diff = 0.0, max_num = 0.0;
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      const double orig = inputs[p][i];
      inputs[p][i] = orig + h;
      const double up = eval_loss(fn, inputs);
      inputs[p][i] = orig - h;
      const double down = eval_loss(fn, inputs);
      inputs[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      max_num = std::max(max_num, std::abs(numeric));
    }
    worst = std::max(worst, max_diff / std::max(max_num, 1e-12));
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace cil::testing

#include "cil/model.hpp"

namespace cil::testing {

using ModelLossFn = std::function<Var(const ParamBinding&)>;

/// Finite-difference sweep over every entry of every parameter in `state`.
/// Returns ||analytic - numeric||_inf / ||numeric||_inf over the concatenated
/// parameter gradient. Per-tensor ratios are ill-posed here: some gradients
/// vanish identically (key biases under softmax shift invariance) and leave
/// only roundoff in the numeric estimate.
inline double model_gradcheck(ModelState state, const ModelLossFn& fn, double h = 1e-5) {
  state.zero_grad();
  {
    Tape tape;
    ParamBinding p(tape, state, Trainable::all);
    tape.backward(fn(p));
  }
  auto eval = [&]() {
    Tape tape;
    ParamBinding p(tape, static_cast<const ModelState&>(state));
    return fn(p).value().item();
  };
  double max_diff = 0.0, max_num = 0.0;
  for (auto& [name, t] : state.params) {
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = eval();
      t[i] = orig - h;
      const double down = eval();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      max_num = std::max(max_num, std::abs(numeric));
    }
  }
  return max_diff / std::max(max_num, 1e-12);
}

}  // namespace cil::testing
