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

#include "gpderain/gp.hpp"

#include "gpderain/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gpderain {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapRow = Eigen::Map<const RowMat>;
using MapRow = Eigen::Map<RowMat>;

constexpr const char* kBankFormat = "gpderain-bank";
constexpr int kBankVersion = 1;
constexpr int kJitterEscalations = 4;

Matrix normalized_rows(const Matrix& A) {
  Matrix out = A;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const double n = A.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
    else out.row(i).setZero();
  }
  return out;
}

Matrix squared_distances(const Matrix& A, const Matrix& B) {
  const Eigen::VectorXd a2 = A.rowwise().squaredNorm();
  const Eigen::VectorXd b2 = B.rowwise().squaredNorm();
  Matrix d = -2.0 * (A * B.transpose());
  d.colwise() += a2;
  d.rowwise() += b2.transpose();
  return d.cwiseMax(0.0);
}

// Elementwise map of squared distances to kernel values.
Matrix stationary_from_d2(const KernelSpec& spec, const Matrix& d2) {
  const double l2 = spec.length_scale * spec.length_scale;
  if (spec.kind == KernelKind::kSquaredExponential) return (-d2.array() / (2.0 * l2)).exp().matrix();
  return (1.0 + d2.array() / (2.0 * spec.alpha * l2)).pow(-spec.alpha).matrix();
}

void require_same_cols(const char* op, Eigen::Index a, Eigen::Index b) {
  if (a != b) {
    throw GpError(std::string(op) + ": vector dimension mismatch (" + std::to_string(a) +
                  " vs " + std::to_string(b) + ")");
  }
}

Matrix tensor_to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw GpError("expected a rank-2 tensor, got " + shape_str(t.shape()));
  return ConstMapRow(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                     static_cast<Eigen::Index>(t.dim(1)));
}

// Gradient of sum_ij G_ij k(z_i, f_j) with respect to Z, given values Z, F and K.
Matrix kernel_grad_first_arg(const KernelSpec& spec, const Matrix& G, const Matrix& Z,
                             const Matrix& F, const Matrix& K) {
  if (spec.kind == KernelKind::kLinear) {
    const Matrix Fn = normalized_rows(F);
    Matrix dZ = G * Fn;
    const Eigen::VectorXd gk = (G.array() * K.array()).rowwise().sum();
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
      const double n = Z.row(i).norm();
      if (n > 0.0) dZ.row(i) = (dZ.row(i) - gk(i) * Z.row(i) / n) / n;
      else dZ.row(i).setZero();
    }
    return dZ;
  }
  const double l2 = spec.length_scale * spec.length_scale;
  Matrix W;
  if (spec.kind == KernelKind::kSquaredExponential) {
    W = G.cwiseProduct(K);
  } else {
    W = (G.array() * K.array().pow((spec.alpha + 1.0) / spec.alpha)).matrix();
  }
  const Eigen::VectorXd wsum = W.rowwise().sum();
  return -(wsum.asDiagonal() * Z - W * F) / l2;
}

Matrix kernel_matrix(const KernelSpec& spec, const Matrix& A, const Matrix& B) {
  require_same_cols("gram", A.cols(), B.cols());
  if (spec.kind == KernelKind::kLinear) return normalized_rows(A) * normalized_rows(B).transpose();
  return stationary_from_d2(spec, squared_distances(A, B));
}

}  // namespace

std::string to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::kLinear: return "lin";
    case KernelKind::kSquaredExponential: return "se";
    case KernelKind::kRationalQuadratic: return "rq";
  }
  return "?";
}

KernelKind kernel_kind_from_string(const std::string& name) {
  if (name == "lin") return KernelKind::kLinear;
  if (name == "se") return KernelKind::kSquaredExponential;
  if (name == "rq") return KernelKind::kRationalQuadratic;
  throw std::invalid_argument("unknown kernel '" + name + "' (expected lin, se or rq)");
}

void KernelSpec::validate() const {
  if (!(length_scale > 0.0)) throw std::invalid_argument("kernel length_scale must be > 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("kernel alpha must be > 0");
}

std::string to_string(GpMode mode) {
  switch (mode) {
    case GpMode::kOff: return "off";
    case GpMode::kWholeLatent: return "syn2real";
    case GpMode::kPerFeatureMap: return "syn2real++";
  }
  return "?";
}

GpMode gp_mode_from_string(const std::string& name) {
  if (name == "off") return GpMode::kOff;
  if (name == "syn2real") return GpMode::kWholeLatent;
  if (name == "syn2real++") return GpMode::kPerFeatureMap;
  throw std::invalid_argument("unknown gp mode '" + name + "' (expected off, syn2real or syn2real++)");
}

double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw GpError("kernel_eval: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                  std::to_string(b.size()) + ")");
  }
  if (spec.kind == KernelKind::kLinear) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / (std::sqrt(aa) * std::sqrt(bb));
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  const double l2 = spec.length_scale * spec.length_scale;
  if (spec.kind == KernelKind::kSquaredExponential) return std::exp(-d2 / (2.0 * l2));
  return std::pow(1.0 + d2 / (2.0 * spec.alpha * l2), -spec.alpha);
}

Matrix gram(const KernelSpec& spec, const Matrix& A, const Matrix& B) {
  return kernel_matrix(spec, A, B);
}

Matrix gram(const KernelSpec& spec, const Matrix& A) {
  Matrix K = kernel_matrix(spec, A, A);
  K = 0.5 * (K + K.transpose()).eval();
  if (spec.kind != KernelKind::kLinear) {
    K.diagonal().setOnes();
  } else {
    for (Eigen::Index i = 0; i < A.rows(); ++i) K(i, i) = A.row(i).squaredNorm() > 0.0 ? 1.0 : 0.0;
  }
  return K;
}

// ---------------------------------------------------------------------------
// Differentiable pieces

Tensor kernel_cross(const KernelSpec& spec, const Tensor& Z, const Matrix& F) {
  const Matrix Zm = tensor_to_matrix(Z);
  require_same_cols("kernel_cross", Zm.cols(), F.cols());
  Matrix K = kernel_matrix(spec, Zm, F);
  const std::size_t m = Z.dim(0), p = static_cast<std::size_t>(F.rows());
  Buffer out(m * p);
  MapRow(out.data(), m, p) = K;
  return make_result("kernel_cross", {m, p}, std::move(out), {Z},
                     [spec, Zm, F, K, m, p](std::span<const double> g,
                                            std::vector<std::span<double>>& gi) {
                       const Matrix G = ConstMapRow(g.data(), m, p);
                       MapRow(gi[0].data(), m, Zm.cols()) +=
                           kernel_grad_first_arg(spec, G, Zm, F, K);
                     });
}

Tensor kernel_self(const KernelSpec& spec, const Tensor& Z) {
  const Matrix Zm = tensor_to_matrix(Z);
  Matrix K = gram(spec, Zm);
  const std::size_t m = Z.dim(0);
  Buffer out(m * m);
  MapRow(out.data(), m, m) = K;
  return make_result("kernel_self", {m, m}, std::move(out), {Z},
                     [spec, Zm, K, m](std::span<const double> g,
                                      std::vector<std::span<double>>& gi) {
                       const Matrix G = ConstMapRow(g.data(), m, m);
                       const Matrix Gs = G + G.transpose();
                       MapRow(gi[0].data(), m, Zm.cols()) +=
                           kernel_grad_first_arg(spec, Gs, Zm, Zm, K);
                     });
}

Tensor spd_solve(std::shared_ptr<const Eigen::LLT<Matrix>> chol, const Tensor& B) {
  const Matrix Bm = tensor_to_matrix(B);
  if (Bm.rows() != chol->rows()) {
    throw GpError("spd_solve: right-hand side has " + std::to_string(Bm.rows()) +
                  " rows, factor is " + std::to_string(chol->rows()) + "x" +
                  std::to_string(chol->rows()));
  }
  const Matrix X = chol->solve(Bm);
  const std::size_t r = B.dim(0), c = B.dim(1);
  Buffer out(r * c);
  MapRow(out.data(), r, c) = X;
  return make_result("spd_solve", {r, c}, std::move(out), {B},
                     [chol, r, c](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       const Matrix G = ConstMapRow(g.data(), r, c);
                       MapRow(gi[0].data(), r, c) += chol->solve(G);
                     });
}

Matrix GPPosterior::sigma_matrix() const { return tensor_to_matrix(sigma); }

// ---------------------------------------------------------------------------
// Bank

void FeatureBank::add(std::string image_id, LatentMatrix latent) {
  if (latent.rows == 0 || latent.cols == 0 || latent.values.size() != latent.rows * latent.cols) {
    throw GpError("FeatureBank::add: malformed latent for " + image_id);
  }
  if (entries_.empty()) {
    rows_ = latent.rows;
    cols_ = latent.cols;
  } else if (latent.rows != rows_ || latent.cols != cols_) {
    throw GpError("FeatureBank::add: latent " + std::to_string(latent.rows) + "x" +
                  std::to_string(latent.cols) + " for " + image_id + " does not match bank " +
                  std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  double n2 = 0.0;
  for (double v : latent.values) n2 += v * v;
  const double inv = n2 > 0.0 ? 1.0 / std::sqrt(n2) : 0.0;
  for (double v : latent.values) unit_flat_.push_back(v * inv);
  entries_.push_back({std::move(image_id), std::move(latent)});
}

void FeatureBank::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = kBankFormat;
  j["version"] = kBankVersion;
  j["mode"] = to_string(mode_);
  j["built_at_epoch"] = built_at_epoch_;
  j["rows"] = rows_;
  j["cols"] = cols_;
  j["kernel"] = {{"kind", to_string(kernel_.kind)},
                 {"length_scale", kernel_.length_scale},
                 {"alpha", kernel_.alpha}};
  nlohmann::json entries = nlohmann::json::array();
  for (const BankEntry& e : entries_)
    entries.push_back({{"id", e.image_id}, {"values", e.latent.values}});
  j["entries"] = std::move(entries);
  std::ofstream out(path);
  if (!out) throw GpError("cannot write bank dump " + path.string());
  out << j.dump();
}

FeatureBank FeatureBank::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw GpError("cannot open bank dump " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw GpError("bank dump " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kBankFormat) throw GpError(path.string() + " is not a bank dump");
  if (j.value("version", 0) != kBankVersion) {
    throw GpError("unsupported bank dump version " + j.at("version").dump());
  }
  FeatureBank bank(gp_mode_from_string(j.at("mode").get<std::string>()),
                   j.at("built_at_epoch").get<int>());
  const auto& k = j.at("kernel");
  bank.kernel_.kind = kernel_kind_from_string(k.at("kind").get<std::string>());
  bank.kernel_.length_scale = k.at("length_scale").get<double>();
  bank.kernel_.alpha = k.at("alpha").get<double>();
  const auto rows = j.at("rows").get<std::size_t>(), cols = j.at("cols").get<std::size_t>();
  for (const auto& e : j.at("entries")) {
    const auto values = e.at("values").get<std::vector<double>>();
    LatentMatrix m{rows, cols, Buffer(values.begin(), values.end())};
    bank.add(e.at("id").get<std::string>(), std::move(m));
  }
  return bank;
}

std::vector<Neighbor> nearest(const LatentMatrix& z_u, const FeatureBank& bank, std::size_t n) {
  if (bank.empty()) throw GpError("nearest: feature bank is empty; build it before the unlabeled phase");
  if (n == 0) throw GpError("nearest: N_n must be at least 1");
  if (n > bank.size()) {
    throw GpError("nearest: N_n = " + std::to_string(n) + " exceeds bank size " +
                  std::to_string(bank.size()) +
                  "; lower N_n or raise bank_max_entries / the labeled set size");
  }
  if (z_u.rows != bank.rows() || z_u.cols != bank.cols()) {
    throw GpError("nearest: query latent " + std::to_string(z_u.rows) + "x" +
                  std::to_string(z_u.cols) + " does not match bank " + std::to_string(bank.rows()) +
                  "x" + std::to_string(bank.cols()));
  }
  double qn = 0.0;
  for (double v : z_u.values) qn += v * v;
  const double inv = qn > 0.0 ? 1.0 / std::sqrt(qn) : 0.0;

  std::vector<std::pair<double, std::size_t>> scored(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const auto u = bank.unit_flat(j);
    double dot = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += z_u.values[i] * u[i];
    scored[j] = {dot * inv, j};
  }
  auto better = [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                    better);
  std::vector<Neighbor> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k)
    out.push_back({scored[k].second, bank.entry(scored[k].second).image_id, scored[k].first});
  return out;
}

double median_pairwise_distance(const FeatureBank& bank, std::size_t max_rows, std::uint64_t seed) {
  if (bank.empty()) throw GpError("median_pairwise_distance: empty bank");
  const bool per_row = bank.mode() == GpMode::kPerFeatureMap;
  const std::size_t dim = per_row ? bank.cols() : bank.rows() * bank.cols();
  const std::size_t total = per_row ? bank.size() * bank.rows() : bank.size();
  std::vector<std::size_t> picks(total);
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  if (total > max_rows) {
    Rng rng(seed);
    rng.shuffle(picks);
    picks.resize(max_rows);
    std::sort(picks.begin(), picks.end());
  }
  auto row = [&](std::size_t r) {
    if (!per_row) return std::span<const double>(bank.entry(r).latent.values);
    return bank.entry(r / bank.rows()).latent.row(r % bank.rows());
  };
  std::vector<double> d;
  d.reserve(picks.size() * (picks.size() - 1) / 2);
  for (std::size_t a = 0; a < picks.size(); ++a) {
    const auto ra = row(picks[a]);
    for (std::size_t b = a + 1; b < picks.size(); ++b) {
      const auto rb = row(picks[b]);
      double s = 0.0;
      for (std::size_t i = 0; i < dim; ++i) s += (ra[i] - rb[i]) * (ra[i] - rb[i]);
      d.push_back(std::sqrt(s));
    }
  }
  if (d.empty()) return 1.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

// ---------------------------------------------------------------------------
// Posterior

GPPosterior posterior(const Tensor& z_u, const FeatureBank& bank,
                      const std::vector<Neighbor>& neighbors, const KernelSpec& spec,
                      double sigma_eps2, GpMode mode) {
  if (neighbors.empty()) throw GpError("posterior: neighbor set is empty");
  if (!(sigma_eps2 > 0.0)) throw GpError("posterior: sigma_eps2 must be > 0");
  if (mode == GpMode::kOff) throw GpError("posterior: gp mode is off");
  spec.validate();
  if (z_u.rank() != 2 || z_u.dim(0) != bank.rows() || z_u.dim(1) != bank.cols()) {
    throw GpError("posterior: latent " + shape_str(z_u.shape()) + " does not match bank " +
                  std::to_string(bank.rows()) + "x" + std::to_string(bank.cols()));
  }
  const std::size_t M = bank.rows(), D = bank.cols();
  const bool per_row = mode == GpMode::kPerFeatureMap;

  GPPosterior post;
  post.mode = mode;
  post.neighbors = neighbors;
  post.sigma_eps2 = sigma_eps2;
  post.latent_cols = D;

  // Conditioning rows: neighbor feature maps, or whole flattened latents.
  const std::size_t n = neighbors.size();
  if (per_row) {
    post.index_rows.resize(static_cast<Eigen::Index>(n * M), static_cast<Eigen::Index>(D));
    for (std::size_t j = 0; j < n; ++j)
      post.index_rows.middleRows(static_cast<Eigen::Index>(j * M), static_cast<Eigen::Index>(M)) =
          ConstMapRow(bank.entry(neighbors[j].index).latent.values.data(), M, D);
  } else {
    post.index_rows.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(M * D));
    for (std::size_t j = 0; j < n; ++j)
      post.index_rows.row(static_cast<Eigen::Index>(j)) =
          Eigen::Map<const Eigen::RowVectorXd>(bank.entry(neighbors[j].index).latent.values.data(),
                                               static_cast<Eigen::Index>(M * D));
  }
  const Tensor query = per_row ? z_u : z_u.reshape({1, M * D});

  const Matrix Kff = gram(spec, post.index_rows);
  double noise = sigma_eps2;
  std::vector<double> ladder;
  std::shared_ptr<Eigen::LLT<Matrix>> chol;
  for (int attempt = 0; attempt <= kJitterEscalations; ++attempt) {
    Matrix G = Kff;
    G.diagonal().array() += noise;
    chol = std::make_shared<Eigen::LLT<Matrix>>(G);
    ladder.push_back(noise);
    if (chol->info() == Eigen::Success && chol->matrixLLT().allFinite()) break;
    chol.reset();
    noise *= 10.0;
  }
  if (!chol) {
    std::ostringstream os;
    os << "posterior: Cholesky factorization failed for noise ladder [";
    for (std::size_t i = 0; i < ladder.size(); ++i) os << (i ? ", " : "") << ladder[i];
    os << "]";
    throw GpError(os.str());
  }
  post.noise_used = noise;
  post.chol = chol;

  const Tensor k_star = kernel_cross(spec, query, post.index_rows);
  const Matrix Ks = tensor_to_matrix(k_star);
  post.alpha = chol->solve(Ks.transpose()).transpose();
  post.mu = post.alpha * post.index_rows;

  const std::size_t rows = query.dim(0);
  const Tensor reduction = matmul(k_star, spd_solve(post.chol, transpose(k_star)));
  Buffer eye(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) eye[i * rows + i] = sigma_eps2;
  post.sigma = add(sub(kernel_self(spec, query), reduction), Tensor::from_buffer({rows, rows}, std::move(eye)));
  return post;
}

GPPosterior posterior(const LatentMatrix& z_u, const FeatureBank& bank,
                      const std::vector<Neighbor>& neighbors, const KernelSpec& spec,
                      double sigma_eps2, GpMode mode) {
  return posterior(Tensor::from_buffer({z_u.rows, z_u.cols}, z_u.values), bank, neighbors, spec,
                   sigma_eps2, mode);
}

FeatureBank rebuild_bank(const std::vector<BankSource>& labeled, const UDeNet& net,
                         std::size_t max_entries, std::uint64_t seed, GpMode mode, int epoch) {
  if (labeled.empty()) throw GpError("rebuild_bank: labeled set is empty");
  if (max_entries == 0) throw GpError("rebuild_bank: max_entries must be positive");
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (labeled.size() > max_entries) {
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(max_entries);
    std::sort(order.begin(), order.end());
  }
  NoGradGuard no_grad;
  FeatureBank bank(mode, epoch);
  for (std::size_t idx : order) {
    const Tensor tap = net.encode_tap(labeled[idx].image);
    bank.add(labeled[idx].image_id, LatentMatrix::from_tensor(tap));
  }
  return bank;
}

}  // namespace gpderain
