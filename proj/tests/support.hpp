#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cbt/graph.hpp"
#include "cbt/params.hpp"
#include "cbt/rng.hpp"
#include "cbt/tensor.hpp"

namespace cbt::testing {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Overwrites every tensor of `store` with N(0, scale^2) values.
inline void randomize(ParamStore<double>& store, Rng& rng, double scale = 0.5) {
  for (const auto& name : store.names()) store.set(name, random_tensor(rng, store.get(name).shape(), scale));
}

// Scalar loss built from a list of leaves.
using LossFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::string worst;  // "input[index]" of the worst probe
};

// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor so
// that gradients that are zero up to rounding do not dominate.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() against central differences at up to `probes_per_input`
// randomly chosen entries of every input (all entries when fewer).
inline GradCheckResult grad_check(const LossFn& fn, const std::vector<Tensor<double>>& inputs, Rng& rng,
                                  std::size_t probes_per_input = 100, double step = 1e-5,
                                  double floor = 1e-6) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(g.leaf(x, true));
    return fn(g, leaves).value().item();
  };
  Graph<double> g;
  std::vector<Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(g.leaf(x, true));
  const auto grads = g.backward(fn(g, leaves));

  GradCheckResult result;
  auto work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = grads.of(leaves[k]);
    std::vector<std::size_t> idx;
    if (inputs[k].size() <= probes_per_input) {
      for (std::size_t i = 0; i < inputs[k].size(); ++i) idx.push_back(i);
    } else {
      idx = rng.choose(inputs[k].size(), probes_per_input);
    }
    for (std::size_t i : idx) {
      const double orig = work[k][i];
      work[k][i] = orig + step;
      const double up = evaluate(work);
      work[k][i] = orig - step;
      const double down = evaluate(work);
      work[k][i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double err = rel_error(analytic[i], numeric, floor);
      ++result.probes;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = "input" + std::to_string(k) + "[" + std::to_string(i) + "] analytic=" +
                       std::to_string(analytic[i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace cbt::testing
