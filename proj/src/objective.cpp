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

#include "gpderain/objective.hpp"

#include "gpderain/model.hpp"
#include "gpderain/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace gpderain {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapRow = Eigen::Map<const RowMat>;
using MapRow = Eigen::Map<RowMat>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

struct Plane {
  std::size_t channels, height, width;
};

Plane image_plane(const char* op, const Tensor& t) {
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.dim(3)};
  throw std::invalid_argument(std::string(op) + ": expected [C,H,W] or [1,C,H,W], got " +
                              shape_str(t.shape()));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_p < 0.0 || lambda_unsup < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

Tensor l1_loss(const Tensor& y_pred, const Tensor& y) {
  require_same_shape("l1_loss", y_pred, y);
  return abs_mean(sub(y_pred, y));
}

RandomConvFeatures::RandomConvFeatures(std::uint64_t seed, double slope) : slope_(slope) {
  const std::size_t widths[][2] = {{3, 8}, {8, 16}, {16, 16}};
  Rng rng(derive_seed(seed, 0xFEA7));
  for (const auto& w : widths) {
    Layer layer{Tensor::zeros({w[1], w[0], 3, 3}), Tensor::zeros({w[1]})};
    const double bound = init_bound(w[0] * 9, slope);
    for (double& v : layer.weight.mutable_data()) v = rng.uniform(-bound, bound);
    layers_.push_back(std::move(layer));
  }
}

std::vector<Tensor> RandomConvFeatures::operator()(const Tensor& x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i > 0) h = avg_pool2(h);
    h = leaky_relu(conv2d(h, layers_[i].weight, layers_[i].bias, 1), slope_);
    out.push_back(h);
  }
  return out;
}

PerceptualLoss::PerceptualLoss(std::uint64_t extractor_seed)
    : extractor_(RandomConvFeatures(extractor_seed)) {}

Tensor PerceptualLoss::operator()(const Tensor& y_pred, const Tensor& y) const {
  require_same_shape("feature_loss", y_pred, y);
  const std::vector<Tensor> fp = extractor_(y_pred);
  std::vector<Tensor> fy;
  {
    NoGradGuard no_grad;
    fy = extractor_(y);
  }
  if (fp.empty() || fp.size() != fy.size()) {
    throw std::runtime_error("feature_loss: extractor returned inconsistent feature lists");
  }
  Tensor total;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    Tensor term = mean(square(sub(fp[i], fy[i])));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(fp.size()));
}

Tensor feature_loss(const Tensor& y_pred, const Tensor& y, std::uint64_t extractor_seed) {
  return PerceptualLoss(extractor_seed)(y_pred, y);
}

Tensor sup_loss(const Tensor& y_pred, const Tensor& y, const LossWeights& weights,
                const PerceptualLoss& perceptual) {
  Tensor loss = l1_loss(y_pred, y);
  if (weights.lambda_p > 0.0) loss = add(loss, scale(perceptual(y_pred, y), weights.lambda_p));
  return loss;
}

Tensor gaussian_nll(const Tensor& sigma, const Tensor& delta, std::size_t norm_cols) {
  if (sigma.rank() != 2 || sigma.dim(0) != sigma.dim(1)) {
    throw GpError("gaussian_nll: covariance must be square, got " + shape_str(sigma.shape()));
  }
  if (delta.rank() != 2 || delta.dim(0) != sigma.dim(0)) {
    throw GpError("gaussian_nll: residual " + shape_str(delta.shape()) +
                  " incompatible with covariance " + shape_str(sigma.shape()));
  }
  if (norm_cols == 0) throw GpError("gaussian_nll: norm_cols must be positive");
  const std::size_t m = sigma.dim(0), c = delta.dim(1);
  const Matrix S = ConstMapRow(sigma.data().data(), m, m);
  const Matrix Ss = 0.5 * (S + S.transpose());
  Eigen::LLT<Matrix> llt(Ss);
  if (llt.info() != Eigen::Success) {
    throw GpError("gaussian_nll: posterior covariance is not positive definite");
  }
  const Matrix Dm = ConstMapRow(delta.data().data(), m, c);
  const Matrix SinvD = llt.solve(Dm);
  const double norm = static_cast<double>(norm_cols);
  const double quad = (Dm.array() * SinvD.array()).sum() / norm;
  const Matrix L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const Matrix Sinv = llt.solve(Matrix::Identity(static_cast<Eigen::Index>(m),
                                                 static_cast<Eigen::Index>(m)));
  return make_result(
      "gaussian_nll", {}, {quad + logdet}, {sigma, delta},
      [SinvD, Sinv, m, c, norm](std::span<const double> g, std::vector<std::span<double>>& gi) {
        if (!gi[0].empty()) {
          const Matrix dS = g[0] * (Sinv - SinvD * SinvD.transpose() / norm);
          MapRow(gi[0].data(), m, m) += dS;
        }
        if (!gi[1].empty()) MapRow(gi[1].data(), m, c) += (2.0 * g[0] / norm) * SinvD;
      });
}

Tensor unsup_loss(const Tensor& z_pred, const GPPosterior& post) {
  if (z_pred.numel() != static_cast<std::size_t>(post.mu.size())) {
    throw GpError("unsup_loss: latent " + shape_str(z_pred.shape()) + " does not match posterior mean " +
                  std::to_string(post.mu.rows()) + "x" + std::to_string(post.mu.cols()));
  }
  const std::size_t r = static_cast<std::size_t>(post.mu.rows());
  const std::size_t c = static_cast<std::size_t>(post.mu.cols());
  const Tensor z = z_pred.reshape({r, c});
  std::vector<double> mu(r * c);
  MapRow(mu.data(), r, c) = post.mu;
  const Tensor delta = sub(z, Tensor::from({r, c}, std::move(mu)));
  return gaussian_nll(post.sigma, delta, post.latent_cols);
}

double psnr(const Tensor& y_pred, const Tensor& y) {
  require_same_shape("psnr", y_pred, y);
  auto a = y_pred.data(), b = y.data();
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& y_pred, const Tensor& y) {
  require_same_shape("ssim", y_pred, y);
  const Plane p = image_plane("ssim", y_pred);
  const std::size_t H = p.height, W = p.width, HW = H * W, win = kSsimWindow;
  if (H < win || W < win) {
    throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                                " is smaller than the " + std::to_string(win) + "x" +
                                std::to_string(win) + " window");
  }
  auto gray = [&](const Tensor& t) {
    std::vector<double> g(HW, 0.0);
    auto d = t.data();
    for (std::size_t c = 0; c < p.channels; ++c)
      for (std::size_t i = 0; i < HW; ++i) g[i] += d[c * HW + i];
    for (double& v : g) v /= static_cast<double>(p.channels);
    return g;
  };
  const std::vector<double> x = gray(y_pred), yv = gray(y);

  // Summed-area tables of x, y, x^2, y^2, xy with a zero border.
  const std::size_t Ws = W + 1;
  std::vector<double> sx((H + 1) * Ws, 0.0), sy(sx), sxx(sx), syy(sx), sxy(sx);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c, o = (r + 1) * Ws + (c + 1);
      const std::size_t up = r * Ws + (c + 1), left = (r + 1) * Ws + c, diag = r * Ws + c;
      const double a = x[i], b = yv[i];
      sx[o] = a + sx[up] + sx[left] - sx[diag];
      sy[o] = b + sy[up] + sy[left] - sy[diag];
      sxx[o] = a * a + sxx[up] + sxx[left] - sxx[diag];
      syy[o] = b * b + syy[up] + syy[left] - syy[diag];
      sxy[o] = a * b + sxy[up] + sxy[left] - sxy[diag];
    }
  }
  auto box = [&](const std::vector<double>& s, std::size_t r, std::size_t c) {
    return s[(r + win) * Ws + (c + win)] - s[r * Ws + (c + win)] - s[(r + win) * Ws + c] +
           s[r * Ws + c];
  };
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const double n = static_cast<double>(win * win);
  double total = 0.0;
  for (std::size_t r = 0; r + win <= H; ++r) {
    for (std::size_t c = 0; c + win <= W; ++c) {
      const double mx = box(sx, r, c) / n, my = box(sy, r, c) / n;
      const double vx = box(sxx, r, c) / n - mx * mx;
      const double vy = box(syy, r, c) / n - my * my;
      const double cxy = box(sxy, r, c) / n - mx * my;
      total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) /
               ((mx * mx + my * my + C1) * (vx + vy + C2));
    }
  }
  return total / static_cast<double>((H - win + 1) * (W - win + 1));
}

}  // namespace gpderain
