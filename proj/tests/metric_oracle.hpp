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


#pragma once

#include "gpderain/tensor.hpp"

#include <cmath>
#include <cstddef>

namespace gpderain::testing {

// Direct-loop SSIM: gray = channel mean, every 8x8 window, population moments.
inline double naive_ssim(const Tensor& a, const Tensor& b) {
  const std::size_t C = a.dim(1), H = a.dim(2), W = a.dim(3), win = 8;
  auto gray = [&](const Tensor& t, std::size_t r, std::size_t c) {
    double s = 0.0;
    for (std::size_t k = 0; k < C; ++k) s += t.at((k * H + r) * W + c);
    return s / static_cast<double>(C);
  };
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + win <= H; ++r)
    for (std::size_t c = 0; c + win <= W; ++c) {
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          mx += gray(a, r + i, c + j);
          my += gray(b, r + i, c + j);
        }
      mx /= 64.0;
      my /= 64.0;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          const double dx = gray(a, r + i, c + j) - mx, dy = gray(b, r + i, c + j) - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      vx /= 64.0;
      vy /= 64.0;
      cxy /= 64.0;
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace gpderain::testing
