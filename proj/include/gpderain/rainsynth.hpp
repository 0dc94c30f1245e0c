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

#include "gpderain/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gpderain {

/// Generative parameters of one synthetic rain domain. Angles are measured
/// counter-clockwise from the image x axis (90 = vertical streaks).
struct RainParams {
  double orientation_deg = 90.0;
  double orientation_spread_deg = 10.0;
  double density = 8.0;  // expected streaks per 1000 pixels
  double length_px = 10.0;
  double length_spread_px = 3.0;
  double width_px = 1.5;  // in [1,3]
  double intensity = 0.25;
  double intensity_spread = 0.1;
  double blur_sigma = 1.0;  // along-streak smoothing, pixels
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const RainParams&) const = default;
};

nlohmann::json to_json(const RainParams& p);
/// Unknown keys are rejected.
RainParams rain_params_from_json(const nlohmann::json& j, const RainParams& defaults = {});

struct RainSample {
  Image rainy;    // clamp(clean + residue, 0, 1)
  Image residue;  // unclamped, >= 0
};

/// Renders anti-aliased streaks (Gaussian cross-profile, Gaussian-smoothed
/// ends) and adds them to `clean`. Deterministic in (clean, params).
RainSample render_rain(const Image& clean, const RainParams& params);

/// Expected mean residue value per pixel: density/1000 * length * width * intensity.
double expected_residue_mean(const RainParams& params);

/// Seeded procedural clean image: smooth gradients, flat shapes and soft texture.
Image procedural_texture(std::size_t width, std::size_t height, std::uint64_t seed);

/// Loads every PNG in `dir`, sorted by file name.
std::vector<Image> load_image_dir(const std::filesystem::path& dir);

struct ManifestRecord {
  std::optional<std::filesystem::path> clean;  // absolute after load
  std::filesystem::path rainy;
  std::uint64_t seed = 0;
  std::string id;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;

  std::string domain;
  std::string split;
  bool labeled = true;
  RainParams params;
  std::vector<ManifestRecord> records;

  /// Paths are written relative to the manifest's directory.
  void save(const std::filesystem::path& path) const;
  /// Resolves paths and checks that every referenced file exists.
  static DatasetManifest load(const std::filesystem::path& path);
};

struct DomainSpec {
  std::string domain;
  std::string split;
  RainParams params;
  std::size_t count = 0;
  std::size_t image_size = 64;
  bool labeled = true;
};

/// Writes `count` records into out_dir (clean images drawn cyclically from
/// `base_images` with seeded random crops, per-record seeds derived from the
/// domain seed) plus out_dir/manifest.json, and returns the manifest.
DatasetManifest make_domain(const std::vector<Image>& base_images, const DomainSpec& spec,
                            const std::filesystem::path& out_dir);

}  // namespace gpderain
