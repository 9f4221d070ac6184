#pragma once

#include <functional>
#include <random>
#include <vector>

#include "diin/gradcheck.hpp"
#include "diin/ops.hpp"
#include "diin/tape.hpp"
#include "diin/tensor.hpp"

namespace testutil {

inline diin::Tensor<double> rand_tensor(diin::Shape shape, std::mt19937& rng, double lo = -1.0,
                                        double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  auto t = diin::Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return t;
}

using GraphBuilder =
    std::function<diin::Var(diin::Tape<double>&, const std::vector<diin::Var>&)>;

// Finite-difference check of a single op (or small subgraph). The graph is
// rebuilt from scratch for every probe; the scalar loss is a fixed random
// weighting of the output so every output coordinate influences it.
inline double op_fd_max_err(std::vector<diin::Tensor<double>> inputs, const GraphBuilder& build,
                            std::mt19937& rng, int probes_per_tensor = 20, double eps = 1e-6) {
  // Forward once to learn the output size, then freeze the probe weights.
  std::vector<double> probe;
  {
    diin::Tape<double> tape;
    std::vector<diin::Var> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    diin::Var out = build(tape, leaves);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    probe.resize(tape.value(out).size());
    for (auto& v : probe) v = dist(rng);
  }

  std::vector<diin::Tensor<double>> grads(inputs.size());
  auto run = [&](bool with_grads) {
    diin::Tape<double> tape;
    std::vector<diin::Var> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    diin::Var out = build(tape, leaves);
    diin::Var pw = tape.leaf(diin::Tensor<double>::from(tape.shape(out), probe));
    diin::Var loss = diin::sum_all(tape, diin::mul(tape, out, pw));
    if (with_grads) {
      tape.backward(loss);
      for (std::size_t i = 0; i < leaves.size(); ++i) grads[i] = tape.grad_tensor(leaves[i]);
    }
    return tape.value(loss)[0];
  };

  std::vector<diin::GradCheckItem> items;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    diin::GradCheckItem item;
    item.name = "input" + std::to_string(i);
    item.value = &inputs[i];
    item.grad = &grads[i];
    item.coords = diin::sample_coords(inputs[i].numel(), probes_per_tensor, rng);
    items.push_back(std::move(item));
  }
  auto report = diin::grad_check(
      items, [&] { return run(true); }, [&] { return run(false); }, eps);
  return report.max_rel_error;
}

}  // namespace testutil
