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
#include "gpderain/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace gpderain {

struct LossWeights {
  double lambda_p = 0.04;
  double lambda_unsup = 1.5e-3;

  void validate() const;
};

/// Mean absolute error.
Tensor l1_loss(const Tensor& y_pred, const Tensor& y);

/// Maps an image batch to a list of feature tensors; gradients must flow to the input.
using FeatureFn = std::function<std::vector<Tensor>(const Tensor&)>;

/// Frozen, seeded three-layer random convolutional feature extractor used in
/// place of a pretrained perceptual network. Any other FeatureFn can be
/// plugged into PerceptualLoss instead.
class RandomConvFeatures {
 public:
  explicit RandomConvFeatures(std::uint64_t seed, double slope = 0.2);
  std::vector<Tensor> operator()(const Tensor& x) const;

 private:
  struct Layer {
    Tensor weight, bias;
  };
  std::vector<Layer> layers_;
  double slope_;
};

class PerceptualLoss {
 public:
  explicit PerceptualLoss(std::uint64_t extractor_seed);
  explicit PerceptualLoss(FeatureFn extractor) : extractor_(std::move(extractor)) {}

  /// Mean over layers of the mean squared feature difference.
  Tensor operator()(const Tensor& y_pred, const Tensor& y) const;

 private:
  FeatureFn extractor_;
};

Tensor feature_loss(const Tensor& y_pred, const Tensor& y, std::uint64_t extractor_seed);

/// l1 + lambda_p * perceptual.
Tensor sup_loss(const Tensor& y_pred, const Tensor& y, const LossWeights& weights,
                const PerceptualLoss& perceptual);

/// trace(delta^T Sigma^-1 delta) / norm_cols + log det Sigma, where delta is
/// rows x C and Sigma rows x rows. Differentiable in both arguments; Sigma is
/// symmetrized before factorization.
Tensor gaussian_nll(const Tensor& sigma, const Tensor& delta, std::size_t norm_cols);

/// Variance-weighted latent loss against the posterior. z_pred is the [M,D]
/// latent view; mu acts as a constant target.
Tensor unsup_loss(const Tensor& z_pred, const GPPosterior& post);

/// 10 log10(1/MSE), capped at 100 dB. Inputs are expected in [0,1].
double psnr(const Tensor& y_pred, const Tensor& y);

/// Mean SSIM over all 8x8 windows (stride 1) of the channel-mean grayscale
/// images, population statistics, C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Tensor& y_pred, const Tensor& y);

inline constexpr double kPsnrCap = 100.0;
inline constexpr std::size_t kSsimWindow = 8;

}  // namespace gpderain
