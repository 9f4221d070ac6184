#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "diin/tensor.hpp"

// Central finite-difference gradient checking. Runs in 64-bit; finite
// differences are not trustworthy in 32-bit.

namespace diin {

struct ParamGradStat {
  std::string name;
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::int64_t worst_coord = -1;
  int probed = 0;
  bool finite = true;
};

struct GradReport {
  std::vector<ParamGradStat> params;
  double max_rel_error = 0.0;

  bool pass(double tol) const {
    if (!(max_rel_error < tol)) return false;
    for (const auto& p : params) {
      if (!p.finite) return false;
    }
    return true;
  }
};

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

// One tensor to probe. `value` is perturbed in place; `grad` must hold the
// analytic gradient after `loss_with_grads` ran.
struct GradCheckItem {
  std::string name;
  Tensor<double>* value = nullptr;
  const Tensor<double>* grad = nullptr;
  std::vector<std::int64_t> coords;
};

inline std::vector<std::int64_t> sample_coords(std::int64_t numel, int count, std::mt19937& rng) {
  std::vector<std::int64_t> coords;
  if (numel <= count) {
    coords.resize(static_cast<std::size_t>(numel));
    for (std::int64_t i = 0; i < numel; ++i) coords[static_cast<std::size_t>(i)] = i;
    return coords;
  }
  std::uniform_int_distribution<std::int64_t> dist(0, numel - 1);
  coords.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) coords.push_back(dist(rng));
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

// Sample coordinates restricted to the given rows of a [rows, width] tensor.
inline std::vector<std::int64_t> sample_coords_rows(const std::vector<int>& rows, int width,
                                                    int count, std::mt19937& rng) {
  std::vector<std::int64_t> coords;
  if (rows.empty()) return coords;
  std::uniform_int_distribution<std::size_t> rdist(0, rows.size() - 1);
  std::uniform_int_distribution<int> cdist(0, width - 1);
  for (int i = 0; i < count; ++i) {
    coords.push_back(static_cast<std::int64_t>(rows[rdist(rng)]) * width + cdist(rng));
  }
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

// `loss_with_grads` runs forward+backward and leaves analytic gradients in
// each item's grad tensor; `loss_only` runs the identical forward pass. Both
// must be deterministic functions of the current parameter values.
inline GradReport grad_check(std::vector<GradCheckItem>& items,
                             const std::function<double()>& loss_with_grads,
                             const std::function<double()>& loss_only, double eps = 1e-6) {
  GradReport report;
  loss_with_grads();
  // Freeze the analytic samples before any perturbation.
  std::vector<std::vector<double>> analytic(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    analytic[i].reserve(items[i].coords.size());
    for (std::int64_t c : items[i].coords) {
      analytic[i].push_back(items[i].grad->data[static_cast<std::size_t>(c)]);
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    GradCheckItem& item = items[i];
    ParamGradStat stat;
    stat.name = item.name;
    for (std::size_t ci = 0; ci < item.coords.size(); ++ci) {
      const std::int64_t c = item.coords[ci];
      double& slot = item.value->data[static_cast<std::size_t>(c)];
      const double saved = slot;
      slot = saved + eps;
      const double lp = loss_only();
      slot = saved - eps;
      const double lm = loss_only();
      slot = saved;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = analytic[i][ci];
      double err;
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        err = std::numeric_limits<double>::infinity();
        stat.finite = false;
      } else {
        err = rel_error(a, numeric);
      }
      ++stat.probed;
      if (err > stat.max_rel_error || stat.worst_coord < 0) {
        stat.max_rel_error = err;
        stat.analytic_at_worst = a;
        stat.numeric_at_worst = numeric;
        stat.worst_coord = c;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, stat.max_rel_error);
    report.params.push_back(std::move(stat));
  }
  return report;
}

}  // namespace diin
