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
#include "gpderain/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpderain {

using Matrix = Eigen::MatrixXd;

enum class KernelKind { kLinear, kSquaredExponential, kRationalQuadratic };

std::string to_string(KernelKind kind);
KernelKind kernel_kind_from_string(const std::string& name);

struct KernelSpec {
  KernelKind kind = KernelKind::kLinear;
  double length_scale = 1.0;  // SE, RQ
  double alpha = 1.0;         // RQ

  void validate() const;
};

/// LIN: cosine similarity (0 when either vector is zero).
/// SE:  exp(-|a-b|^2 / (2 l^2)).
/// RQ:  (1 + |a-b|^2 / (2 alpha l^2))^(-alpha).
double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b);

/// Entry (i,j) = kernel_eval(spec, A.row(i), B.row(j)).
Matrix gram(const KernelSpec& spec, const Matrix& A, const Matrix& B);
/// Symmetric gram(spec, A, A).
Matrix gram(const KernelSpec& spec, const Matrix& A);

enum class GpMode {
  kOff,
  kWholeLatent,    // one weighted combination of whole labeled latents
  kPerFeatureMap,  // a separate function per latent row
};

std::string to_string(GpMode mode);
GpMode gp_mode_from_string(const std::string& name);

class GpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BankEntry {
  std::string image_id;
  LatentMatrix latent;
};

/// Labeled latent matrices used as GP training points.
class FeatureBank {
 public:
  FeatureBank() = default;
  FeatureBank(GpMode mode, int built_at_epoch) : mode_(mode), built_at_epoch_(built_at_epoch) {}

  void add(std::string image_id, LatentMatrix latent);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  GpMode mode() const { return mode_; }
  int built_at_epoch() const { return built_at_epoch_; }
  const BankEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<BankEntry>& entries() const { return entries_; }

  /// Resolved kernel (length scale fixed at build time).
  const KernelSpec& kernel() const { return kernel_; }
  void set_kernel(const KernelSpec& spec) { kernel_ = spec; }

  /// Unit-norm flattened latent of entry i (zero vector stays zero).
  std::span<const double> unit_flat(std::size_t i) const {
    return std::span<const double>(unit_flat_).subspan(i * rows_ * cols_, rows_ * cols_);
  }

  void save(const std::filesystem::path& path) const;
  static FeatureBank load(const std::filesystem::path& path);

 private:
  GpMode mode_ = GpMode::kPerFeatureMap;
  int built_at_epoch_ = 0;
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<BankEntry> entries_;
  Buffer unit_flat_;
  KernelSpec kernel_;
};

struct Neighbor {
  std::size_t index;
  std::string image_id;
  double score;
};

/// The n bank entries with the highest whole-latent cosine similarity to z_u.
/// Ties are broken by ascending bank index.
std::vector<Neighbor> nearest(const LatentMatrix& z_u, const FeatureBank& bank, std::size_t n);

/// Median pairwise Euclidean distance among bank rows (per-feature-map mode)
/// or flattened latents (whole-latent mode). At most `max_rows` rows are used,
/// drawn with `seed` when the bank has more. Returns 1.0 if all rows coincide.
double median_pairwise_distance(const FeatureBank& bank, std::size_t max_rows, std::uint64_t seed);

/// Conditional Gaussian of an unlabeled latent given its neighbors.
struct GPPosterior {
  GpMode mode = GpMode::kPerFeatureMap;
  /// Pseudo ground truth: M x D (per-feature-map) or 1 x (M*D) (whole-latent).
  Matrix mu;
  /// Posterior covariance, M x M or 1 x 1. Stays on the tape when z_u is tracked.
  Tensor sigma;
  /// Factor of K(F,F) + noise*I over the conditioning rows.
  std::shared_ptr<const Eigen::LLT<Matrix>> chol;
  /// Conditioning rows F (P x D or N_n x M*D).
  Matrix index_rows;
  /// k_star * G^-1, rows x |F|. In whole-latent mode these are the combination
  /// weights of the neighbor latents.
  Matrix alpha;
  std::vector<Neighbor> neighbors;
  double sigma_eps2 = 1.0;
  /// Diagonal noise actually used in G after any jitter escalation.
  double noise_used = 1.0;
  /// Column count used to normalize the quadratic term of the loss (D).
  std::size_t latent_cols = 0;

  Matrix sigma_matrix() const;
};

/// Differentiable kernel matrix between the rows of Z (tracked) and constant rows F.
Tensor kernel_cross(const KernelSpec& spec, const Tensor& Z, const Matrix& F);
/// Differentiable self kernel matrix of the rows of Z.
Tensor kernel_self(const KernelSpec& spec, const Tensor& Z);
/// G^-1 B for a constant SPD G given by its Cholesky factor.
Tensor spd_solve(std::shared_ptr<const Eigen::LLT<Matrix>> chol, const Tensor& B);

/// z_u is the [M,D] latent view of one unlabeled image (optionally tracked).
/// Diagonal noise is escalated x10 up to four times if factorization fails.
GPPosterior posterior(const Tensor& z_u, const FeatureBank& bank,
                      const std::vector<Neighbor>& neighbors, const KernelSpec& spec,
                      double sigma_eps2, GpMode mode);
GPPosterior posterior(const LatentMatrix& z_u, const FeatureBank& bank,
                      const std::vector<Neighbor>& neighbors, const KernelSpec& spec,
                      double sigma_eps2, GpMode mode);

struct BankSource {
  std::string image_id;
  Tensor image;  // [1,3,crop,crop]
};

/// Encodes a seeded subset of at most `max_entries` labeled images with
/// gradient recording disabled.
FeatureBank rebuild_bank(const std::vector<BankSource>& labeled, const UDeNet& net,
                         std::size_t max_entries, std::uint64_t seed, GpMode mode,
                         int epoch);

}  // namespace gpderain
