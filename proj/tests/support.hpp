/*
 * Copyright 2026 The gpderain Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


// Shared helpers for the unit and acceptance tests.

#pragma once

#include "gpderain/random.hpp"
#include "gpderain/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace gpderain::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Compares backward() against central differences on `samples` entries
/// drawn across `params` (all entries when samples == 0).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                  std::size_t samples, Rng& rng, double step = 1e-5,
                                  double floor = 1e-7) {
  Tape::current().clear();
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params) {
    const auto g = p.has_grad() ? p.grad() : std::span<const double>();
    analytic.emplace_back(p.numel(), 0.0);
    std::copy(g.begin(), g.end(), analytic.back().begin());
  }

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::size_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  if (samples == 0 || samples >= total) {
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].numel(); ++i) picks.emplace_back(k, i);
  } else {
    for (std::size_t s = 0; s < samples; ++s) {
      std::size_t flat = rng.index(total), k = 0;
      while (flat >= params[k].numel()) flat -= params[k++].numel();
      picks.emplace_back(k, flat);
    }
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [k, i] : picks) {
    double& w = params[k].mutable_data()[i];
    const double saved = w;
    w = saved + step;
    const double up = loss_fn().item();
    w = saved - step;
    const double down = loss_fn().item();
    w = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = relative_error(analytic[k][i], numeric, floor);
    if (rel > result.max_rel) {
      result.max_rel = rel;
      result.worst = "param " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " +
                     std::to_string(analytic[k][i]) + " numeric " + std::to_string(numeric);
    }
    ++result.checked;
  }
  return result;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gpderain_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gpderain::testing
