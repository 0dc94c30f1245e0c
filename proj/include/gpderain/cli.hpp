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

#include "gpderain/model.hpp"
#include "gpderain/rainsynth.hpp"
#include "gpderain/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>

namespace gpderain {

/// Bad invocation or configuration (exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset layout for `synth` and the manifests `train` reads back.
struct DataConfig {
  std::size_t source_train = 200;
  std::size_t source_test = 50;
  std::size_t target_train = 200;
  std::size_t target_test = 50;
  std::size_t image_size = 64;
  std::size_t base_images = 64;      // procedural textures per split family
  std::size_t base_image_size = 96;  // textures are cropped down to image_size
  std::uint64_t base_seed = 1234;
  std::string base_dir;  // user PNGs instead of procedural textures
  std::string root = "data";
  std::map<std::string, std::string> dirs = {{"source_train", "source_train"},
                                             {"source_test", "source_test"},
                                             {"target_train", "target_train"},
                                             {"target_test", "target_test"}};
};

struct RunSpec {
  ModelConfig model;
  TrainConfig train;
  RainParams source;
  RainParams target;
  DataConfig data;
  std::filesystem::path base_path = ".";  // relative paths resolve against this
};

RunSpec default_run_spec();
/// Unknown keys at any level are rejected.
RunSpec run_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_path = ".");
RunSpec load_run_spec(const std::filesystem::path& path);
nlohmann::json to_json(const RunSpec& spec);

std::filesystem::path resolve(const RunSpec& spec, const std::string& path);

/// Split name -> manifest path under `root`.
std::map<std::string, std::filesystem::path> manifest_paths(const RunSpec& spec,
                                                            const std::filesystem::path& root);

/// Writes the four domains (source train/test labeled, target train
/// unlabeled, target test labeled) below `out`.
std::map<std::string, std::filesystem::path> synthesize(const RunSpec& spec,
                                                        const std::filesystem::path& out);

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gpderain
