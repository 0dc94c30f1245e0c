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

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gpderain {

/// Where the stored latent matrix is read from.
enum class LatentTap {
  kLastDownsample,  // after the final downsample, 2*base channels
  kEncoderOutput,   // final encoder output, 4*base channels
};

std::string to_string(LatentTap tap);
LatentTap latent_tap_from_string(const std::string& name);

struct ModelConfig {
  std::size_t base_channels = 16;
  std::size_t crop = 64;
  std::size_t res2_scale = 4;
  std::size_t n_downsamples = 3;
  LatentTap latent_tap = LatentTap::kLastDownsample;
  double leaky_slope = 0.2;
  bool skip_connections = true;  // U-Net concatenation of encoder features

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  std::size_t latent_side() const { return crop >> n_downsamples; }
  std::size_t encoder_channels() const { return 4 * base_channels; }
  /// Rows M of the latent matrix view.
  std::size_t latent_rows() const {
    return latent_tap == LatentTap::kLastDownsample ? 2 * base_channels
                                                    : 4 * base_channels;
  }
  /// Columns D of the latent matrix view.
  std::size_t latent_cols() const { return latent_side() * latent_side(); }

  bool operator==(const ModelConfig&) const = default;
};

/// M x D row-major matrix; row m is the row-major flattening of feature map m.
struct LatentMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Buffer values;

  /// From a [1,M,s,s] or [M,D] tensor.
  static LatentMatrix from_tensor(const Tensor& t);
  /// Back to [1,M,s,s]; s*s must equal cols.
  Tensor to_feature_maps(std::size_t side) const;
  std::span<const double> row(std::size_t m) const {
    return std::span<const double>(values).subspan(m * cols, cols);
  }
  bool operator==(const LatentMatrix&) const = default;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t padding = 0;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, padding); }
};

/// Multi-scale residual block: 1x1 entry conv, hierarchical 3x3 convs over
/// `scale` channel groups with cumulative feed-through, 1x1 exit conv, and an
/// additive skip (1x1 projection when channel counts differ).
class Res2Block {
 public:
  Res2Block(std::string name, std::size_t in_channels, std::size_t out_channels,
            std::size_t scale, std::vector<NamedParam>& registry);

  Tensor forward(const Tensor& x, double slope) const;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  bool has_projection() const { return in_ != out_; }

 private:
  std::size_t in_, out_, scale_;
  Conv2d entry_;
  std::vector<Conv2d> branches_;
  Conv2d exit_;
  Conv2d projection_;
};

/// Encoder/decoder deraining network predicting an additive rain residue.
class UDeNet {
 public:
  /// Builds the layer graph and initializes parameters deterministically from
  /// `seed` (fan-in scaled uniform weights, zero biases).
  UDeNet(const ModelConfig& config, std::uint64_t seed);
  // Layers hold handles into params_, so copies would alias parameters.
  UDeNet(const UDeNet&) = delete;
  UDeNet& operator=(const UDeNet&) = delete;
  UDeNet(UDeNet&&) = default;
  UDeNet& operator=(UDeNet&&) = default;

  struct Encoding {
    Tensor latent;  // [N, 4*base, s, s], decoder input
    Tensor tap;     // [N, M, s, s], stored latent view
    std::vector<Tensor> skips;  // pre-pool encoder features, finest first
  };

  Encoding encode(const Tensor& x) const;
  /// Encoder prefix up to the latent tap only.
  Tensor encode_tap(const Tensor& x) const;
  Tensor decode(const Encoding& encoding) const;
  /// Latent-only decoding; requires skip_connections == false.
  Tensor decode(const Tensor& latent) const;
  /// x - decode(encode(x)); never clamped.
  Tensor derain(const Tensor& x) const;

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<Tensor> encoder_params() const;
  std::vector<Tensor> decoder_params() const;
  static bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }
  std::size_t parameter_count() const;

  void zero_grad();
  /// Sets every parameter to zero; the result predicts a zero residue.
  void zero_all();

  void save(const std::filesystem::path& path) const;
  static UDeNet load(const std::filesystem::path& path);

 private:
  void check_input(const Tensor& x) const;
  Tensor encode_prefix(const Tensor& x, std::vector<Tensor>* skips) const;

  ModelConfig config_;
  std::vector<NamedParam> params_;
  Conv2d enc_in_;
  std::vector<Res2Block> enc_pre_;   // before the tap (interleaved with downsampling)
  std::vector<Res2Block> enc_post_;  // after the tap
  std::vector<Res2Block> dec_;
  Conv2d dec_out_;
};

nlohmann::json to_json(const ModelConfig& c);
/// Strict: unknown keys are rejected; missing keys keep `defaults`.
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults = {});

/// Scale of the fan-in uniform initializer: weights ~ U(-s, s).
double init_bound(std::size_t fan_in, double slope);

}  // namespace gpderain
