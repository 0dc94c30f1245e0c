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

#include "gpderain/gp.hpp"
#include "gpderain/image.hpp"
#include "gpderain/model.hpp"
#include "gpderain/objective.hpp"
#include "gpderain/rainsynth.hpp"
#include "gpderain/random.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace gpderain {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 2e-4;
  std::size_t batch = 4;
  std::size_t epochs = 60;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_every = 30;
  std::size_t nn = 32;
  double lambda_p = 0.04;
  double lambda_unsup = 1.5e-3;
  KernelKind kernel = KernelKind::kLinear;
  double rq_alpha = 1.0;
  GpMode gp_mode = GpMode::kPerFeatureMap;
  double sigma_eps2 = 1.0;
  std::uint64_t seed = 0;
  std::size_t bank_max_entries = 256;
  std::size_t unlabeled_ratio = 1;
  std::size_t eval_every = 1;
  std::uint64_t extractor_seed = 7;
  /// Rows sampled for the median length-scale heuristic.
  std::size_t length_scale_rows = 512;
  bool write_samples = true;

  void validate() const;
  LossWeights weights() const { return {lambda_p, lambda_unsup}; }
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

/// lr0 * factor^floor(epoch / every), epochs counted from 0.
double scheduled_lr(double lr0, std::size_t epoch, std::size_t every, double factor);

/// Adam with standard bias correction and per-parameter step counts.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates every tensor that carries a gradient; others are left untouched.
  void step(std::vector<Tensor>& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct State {
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<const detail::TensorImpl*, State> state_;
};

struct Sample {
  std::string id;
  Image rainy;
  std::optional<Image> clean;
};

/// Reads every record of a manifest into memory.
std::vector<Sample> load_samples(const DatasetManifest& manifest);

/// Stacks images into an [N,3,H,W] tensor.
Tensor stack_images(const std::vector<const Image*>& images);

/// Full-image deraining: a single pass when the image equals the crop size,
/// otherwise tiles of crop size with 50% overlap blended by linear ramps.
/// Images smaller than the crop are reflect-padded. Output is clamped to [0,1].
Image derain_image(const UDeNet& net, const Image& rainy);

struct MetricRow {
  std::string image_id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricSummary {
  std::vector<MetricRow> rows;
  std::vector<std::string> skipped;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  nlohmann::json to_json() const;
};

MetricSummary evaluate(const UDeNet& net, const std::vector<Sample>& samples);
/// Records whose files are missing are skipped with a warning.
MetricSummary evaluate(const UDeNet& net, const std::filesystem::path& manifest_path);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::vector<double> sup_losses;
  std::vector<double> unsup_losses;
  double mean_sup = 0.0;
  double mean_unsup = 0.0;
  std::map<std::string, std::pair<double, double>> eval;  // name -> (psnr, ssim)
  double length_scale = 0.0;
  std::size_t bank_size = 0;
  double wall_time_s = 0.0;

  nlohmann::json to_json() const;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
};

struct EvalSet {
  std::string name;
  std::vector<Sample> samples;
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, const ModelConfig& model_config, std::vector<Sample> labeled,
          std::vector<Sample> unlabeled);

  /// Forward, supervised loss, backward and an Adam update of all parameters.
  double labeled_step(const Tensor& x, const Tensor& y, const std::string& batch_id = "");
  /// Mean unsupervised loss over the batch (before lambda_unsup scaling).
  /// Only encoder parameters are updated. Returns 0 with gp_mode off.
  double unlabeled_step(const Tensor& x_u);

  /// Rebuilds the feature bank with the current encoder and resolves the kernel.
  void rebuild_bank(std::size_t epoch);

  EpochRecord run_epoch(std::size_t epoch, const std::vector<EvalSet>& eval_sets);

  UDeNet& net() { return net_; }
  const UDeNet& net() const { return net_; }
  const FeatureBank& bank() const { return bank_; }
  const KernelSpec& kernel() const { return kernel_; }
  const TrainConfig& config() const { return config_; }
  Adam& optimizer() { return adam_; }

 private:
  Tensor crop_batch(const std::vector<std::size_t>& idx, const std::vector<Sample>& set, Rng& rng,
                    bool clean) const;

  TrainConfig config_;
  UDeNet net_;
  Adam adam_;
  PerceptualLoss perceptual_;
  std::vector<Sample> labeled_;
  std::vector<Sample> unlabeled_;
  std::vector<BankSource> bank_sources_;
  FeatureBank bank_;
  KernelSpec kernel_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainResult {
  RunLog log;
  std::filesystem::path checkpoint;
};

/// Full schedule: per epoch rebuild bank, interleave labeled and unlabeled
/// steps, evaluate, append to out_dir/runlog.jsonl and checkpoint. The final
/// bank (rebuilt with the trained encoder) is written to out_dir/bank.json.
TrainResult train(const TrainConfig& config, const ModelConfig& model_config,
                  const std::filesystem::path& labeled_manifest,
                  const std::optional<std::filesystem::path>& unlabeled_manifest,
                  const std::vector<std::pair<std::string, std::filesystem::path>>& eval_manifests,
                  const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

/// In-memory variant; returns the trained model alongside the log.
RunLog train_in_memory(Trainer& trainer, const std::vector<EvalSet>& eval_sets,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                       const EpochCallback& on_epoch = {});

}  // namespace gpderain
