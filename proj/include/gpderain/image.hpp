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

#include <filesystem>
#include <vector>

namespace gpderain {

/// Three-channel planar (CHW) image with values nominally in [0,1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  Buffer data;

  static constexpr std::size_t kChannels = 3;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0)
      : width(w), height(h), data(kChannels * w * h, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }

  /// [1,3,H,W] tensor copy.
  Tensor to_tensor() const;
  static Image from_tensor(const Tensor& t);

  /// Sub-image with top-left corner (x0, y0).
  Image crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const;

  bool operator==(const Image&) const = default;
};

/// Reads an 8-bit (or 16-bit) PNG; gray and alpha variants are converted to RGB.
Image read_png(const std::filesystem::path& path);
/// Writes 8-bit RGB; values are clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
/// The 8-bit quantization write_png applies, without touching the disk.
Image quantize8(const Image& image);

}  // namespace gpderain
