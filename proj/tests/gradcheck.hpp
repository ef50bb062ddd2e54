#pragma once

// Central-difference gradient checking shared by the unit and acceptance
// suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "meta/autograd.hpp"
#include "meta/ops.hpp"

namespace testutil {

using meta::Tape;
using meta::Tensor;
using meta::Var;

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(const meta::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data) v = u(rng);
  return t;
}

inline double evaluate(const LossFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().data[0];
}

/// Worst elementwise |analytic - numeric| / max(1, |numeric|) over all inputs.
inline double gradcheck(const LossFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  Var loss = f(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> analytic = vars[i].grad();
    if (analytic.empty()) analytic.assign(inputs[i].size(), 0.0);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = probe[i].data[j];
      probe[i].data[j] = x0 + h;
      const double fp = evaluate(f, probe);
      probe[i].data[j] = x0 - h;
      const double fm = evaluate(f, probe);
      probe[i].data[j] = x0;
      const double num = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[j] - num) / std::max(1.0, std::abs(num)));
    }
  }
  return worst;
}

/// Weighted sum with fixed random coefficients, turning any output into a
/// scalar with a non-trivial upstream gradient.
inline Var project(Tape& tape, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng);
  return meta::sum(meta::mul(y, tape.constant(std::move(w))));
}

}  // namespace testutil
