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

#include "gpderain/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace gpderain {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamLabeledOrder = 0x1A;
constexpr std::uint64_t kStreamUnlabeledOrder = 0x2B;
constexpr std::uint64_t kStreamBank = 0x3C;
constexpr std::uint64_t kStreamLengthScale = 0x4D;
constexpr std::uint64_t kStreamInit = 0x5E;
constexpr std::uint64_t kStreamCrop = 0x6F;

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

template <typename T>
T take(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("config key '" + key + "' has the wrong type: " + value.dump());
  }
}

// Mirror index into [0, n).
std::size_t reflect(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n);
  long k = i % period;
  if (k < 0) k += period;
  return static_cast<std::size_t>(k < static_cast<long>(n) ? k : period - 1 - k);
}

std::vector<std::size_t> tile_starts(std::size_t length, std::size_t crop) {
  std::vector<std::size_t> starts;
  if (length <= crop) return {0};
  const std::size_t stride = std::max<std::size_t>(1, crop / 2);
  for (std::size_t s = 0; s + crop <= length; s += stride) starts.push_back(s);
  if (starts.back() + crop < length) starts.push_back(length - crop);
  return starts;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (batch == 0) throw std::invalid_argument("train: batch must be positive");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("train: lr_decay_factor must be positive");
  if (lr_decay_every == 0) throw std::invalid_argument("train: lr_decay_every must be positive");
  if (nn == 0) throw std::invalid_argument("train: nn must be positive");
  if (!(sigma_eps2 > 0.0)) throw std::invalid_argument("train: sigma_eps2 must be positive");
  if (!(rq_alpha > 0.0)) throw std::invalid_argument("train: rq_alpha must be positive");
  if (bank_max_entries == 0) throw std::invalid_argument("train: bank_max_entries must be positive");
  if (unlabeled_ratio == 0 && gp_mode != GpMode::kOff) {
    throw std::invalid_argument("train: unlabeled_ratio must be positive when the GP phase is on");
  }
  if (eval_every == 0) throw std::invalid_argument("train: eval_every must be positive");
  weights().validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_every", c.lr_decay_every},
          {"nn", c.nn},
          {"lambda_p", c.lambda_p},
          {"lambda_unsup", c.lambda_unsup},
          {"kernel", to_string(c.kernel)},
          {"rq_alpha", c.rq_alpha},
          {"gp_mode", to_string(c.gp_mode)},
          {"sigma_eps2", c.sigma_eps2},
          {"seed", c.seed},
          {"bank_max_entries", c.bank_max_entries},
          {"unlabeled_ratio", c.unlabeled_ratio},
          {"eval_every", c.eval_every},
          {"extractor_seed", c.extractor_seed},
          {"length_scale_rows", c.length_scale_rows},
          {"write_samples", c.write_samples}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c = defaults;
  for (const auto& [key, v] : j.items()) {
    if (key == "lr") c.lr = take<double>(v, key);
    else if (key == "batch") c.batch = take<std::size_t>(v, key);
    else if (key == "epochs") c.epochs = take<std::size_t>(v, key);
    else if (key == "lr_decay_factor") c.lr_decay_factor = take<double>(v, key);
    else if (key == "lr_decay_every") c.lr_decay_every = take<std::size_t>(v, key);
    else if (key == "nn") c.nn = take<std::size_t>(v, key);
    else if (key == "lambda_p") c.lambda_p = take<double>(v, key);
    else if (key == "lambda_unsup") c.lambda_unsup = take<double>(v, key);
    else if (key == "kernel") c.kernel = kernel_kind_from_string(take<std::string>(v, key));
    else if (key == "rq_alpha") c.rq_alpha = take<double>(v, key);
    else if (key == "gp_mode") c.gp_mode = gp_mode_from_string(take<std::string>(v, key));
    else if (key == "sigma_eps2") c.sigma_eps2 = take<double>(v, key);
    else if (key == "seed") c.seed = take<std::uint64_t>(v, key);
    else if (key == "bank_max_entries") c.bank_max_entries = take<std::size_t>(v, key);
    else if (key == "unlabeled_ratio") c.unlabeled_ratio = take<std::size_t>(v, key);
    else if (key == "eval_every") c.eval_every = take<std::size_t>(v, key);
    else if (key == "extractor_seed") c.extractor_seed = take<std::uint64_t>(v, key);
    else if (key == "length_scale_rows") c.length_scale_rows = take<std::size_t>(v, key);
    else if (key == "write_samples") c.write_samples = take<bool>(v, key);
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

double scheduled_lr(double lr0, std::size_t epoch, std::size_t every, double factor) {
  return lr0 * std::pow(factor, static_cast<double>(epoch / every));
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(std::vector<Tensor>& params) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    State& s = state_[p.impl().get()];
    auto w = p.mutable_data();
    auto g = p.grad();
    if (s.m.empty()) {
      s.m.assign(w.size(), 0.0);
      s.v.assign(w.size(), 0.0);
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Data

std::vector<Sample> load_samples(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.records.size());
  for (const ManifestRecord& r : manifest.records) {
    Sample s;
    s.id = r.id;
    s.rainy = read_png(r.rainy);
    if (r.clean) s.clean = read_png(*r.clean);
    out.push_back(std::move(s));
  }
  return out;
}

Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const std::size_t W = images[0]->width, H = images[0]->height;
  std::vector<double> data;
  data.reserve(images.size() * Image::kChannels * W * H);
  for (const Image* im : images) {
    if (im->width != W || im->height != H) {
      throw std::invalid_argument("stack_images: image sizes differ within a batch");
    }
    data.insert(data.end(), im->data.begin(), im->data.end());
  }
  return Tensor::from({images.size(), Image::kChannels, H, W}, std::move(data));
}

Image derain_image(const UDeNet& net, const Image& rainy) {
  NoGradGuard no_grad;
  const std::size_t crop = net.config().crop;
  const std::size_t W = std::max(rainy.width, crop), H = std::max(rainy.height, crop);
  Image padded = rainy;
  if (W != rainy.width || H != rainy.height) {
    padded = Image(W, H);
    for (std::size_t c = 0; c < Image::kChannels; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          padded.at(c, y, x) = rainy.at(c, reflect(static_cast<long>(y), rainy.height),
                                        reflect(static_cast<long>(x), rainy.width));
  }

  Image out(W, H);
  if (W == crop && H == crop) {
    const Tensor y = clamp(net.derain(padded.to_tensor()), 0.0, 1.0);
    out = Image::from_tensor(y);
  } else {
    std::vector<double> ramp(crop);
    for (std::size_t i = 0; i < crop; ++i)
      ramp[i] = static_cast<double>(std::min(i + 1, crop - i));
    std::vector<double> residue(Image::kChannels * W * H, 0.0), weight(W * H, 0.0);
    const auto ys = tile_starts(H, crop), xs = tile_starts(W, crop);
    for (std::size_t y0 : ys) {
      for (std::size_t x0 : xs) {
        const Image tile = padded.crop(x0, y0, crop, crop);
        const Tensor x = tile.to_tensor();
        const Tensor r = sub(x, net.derain(x));
        auto rd = r.data();
        for (std::size_t yy = 0; yy < crop; ++yy)
          for (std::size_t xx = 0; xx < crop; ++xx) {
            const double w = ramp[yy] * ramp[xx];
            weight[(y0 + yy) * W + x0 + xx] += w;
            for (std::size_t c = 0; c < Image::kChannels; ++c)
              residue[(c * H + y0 + yy) * W + x0 + xx] += w * rd[(c * crop + yy) * crop + xx];
          }
      }
    }
    for (std::size_t c = 0; c < Image::kChannels; ++c)
      for (std::size_t i = 0; i < W * H; ++i)
        out.data[c * W * H + i] =
            std::clamp(padded.data[c * W * H + i] - residue[c * W * H + i] / weight[i], 0.0, 1.0);
  }
  if (W != rainy.width || H != rainy.height) out = out.crop(0, 0, rainy.width, rainy.height);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json MetricSummary::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const MetricRow& r : rows)
    rows_json.push_back({{"image_id", r.image_id}, {"psnr", r.psnr}, {"ssim", r.ssim}});
  return {{"rows", rows_json},
          {"summary", {{"count", rows.size()}, {"mean_psnr", mean_psnr}, {"mean_ssim", mean_ssim}}},
          {"skipped", skipped}};
}

MetricSummary evaluate(const UDeNet& net, const std::vector<Sample>& samples) {
  MetricSummary summary;
  for (const Sample& s : samples) {
    if (!s.clean) {
      summary.skipped.push_back(s.id);
      continue;
    }
    const Image pred = derain_image(net, s.rainy);
    const Tensor a = pred.to_tensor(), b = s.clean->to_tensor();
    summary.rows.push_back({s.id, psnr(a, b), ssim(a, b)});
  }
  double ps = 0.0, ss = 0.0;
  for (const MetricRow& r : summary.rows) {
    ps += r.psnr;
    ss += r.ssim;
  }
  if (!summary.rows.empty()) {
    summary.mean_psnr = ps / static_cast<double>(summary.rows.size());
    summary.mean_ssim = ss / static_cast<double>(summary.rows.size());
  }
  return summary;
}

MetricSummary evaluate(const UDeNet& net, const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  in >> j;
  const fs::path base = fs::absolute(manifest_path).parent_path();
  const std::string split = j.value("split", j.value("domain", std::string()));
  std::vector<Sample> samples;
  std::vector<std::string> skipped;
  for (const auto& rec : j.at("records")) {
    const fs::path rainy = base / rec.at("rainy").get<std::string>();
    const std::string id = split + "/" + rainy.stem().string();
    if (!rec.contains("clean")) {
      skipped.push_back(id);
      continue;
    }
    const fs::path clean = base / rec.at("clean").get<std::string>();
    if (!fs::exists(rainy) || !fs::exists(clean)) {
      std::cerr << "warning: skipping " << id << ": missing image file\n";
      skipped.push_back(id);
      continue;
    }
    samples.push_back({id, read_png(rainy), read_png(clean)});
  }
  MetricSummary summary = evaluate(net, samples);
  summary.skipped.insert(summary.skipped.begin(), skipped.begin(), skipped.end());
  return summary;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json ev = nlohmann::json::object();
  for (const auto& [name, m] : eval) ev[name] = {{"psnr", m.first}, {"ssim", m.second}};
  return {{"epoch", epoch},
          {"lr", lr},
          {"mean_sup", mean_sup},
          {"mean_unsup", mean_unsup},
          {"sup_losses", sup_losses},
          {"unsup_losses", unsup_losses},
          {"eval", ev},
          {"length_scale", length_scale},
          {"bank_size", bank_size},
          {"wall_time_s", wall_time_s}};
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& config, const ModelConfig& model_config,
                 std::vector<Sample> labeled, std::vector<Sample> unlabeled)
    : config_(config),
      net_(model_config, derive_seed(config.seed, kStreamInit)),
      adam_(config.lr),
      perceptual_(config.extractor_seed),
      labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)) {
  config_.validate();
  const std::size_t crop = model_config.crop;
  for (const Sample& s : labeled_) {
    if (!s.clean) throw std::invalid_argument("Trainer: labeled sample " + s.id + " has no clean image");
    if (s.rainy.width < crop || s.rainy.height < crop) {
      throw std::invalid_argument("Trainer: labeled sample " + s.id + " is smaller than the crop");
    }
    const Image centered = s.rainy.crop((s.rainy.width - crop) / 2, (s.rainy.height - crop) / 2, crop, crop);
    bank_sources_.push_back({s.id, centered.to_tensor()});
  }
  for (const Sample& s : unlabeled_) {
    if (s.rainy.width < crop || s.rainy.height < crop) {
      throw std::invalid_argument("Trainer: unlabeled sample " + s.id + " is smaller than the crop");
    }
  }
  if (config_.gp_mode != GpMode::kOff && unlabeled_.empty()) {
    throw std::invalid_argument("Trainer: gp mode " + to_string(config_.gp_mode) +
                                " needs unlabeled samples");
  }
}

double Trainer::labeled_step(const Tensor& x, const Tensor& y, const std::string& batch_id) {
  Tape::current().clear();
  net_.zero_grad();
  const Tensor y_pred = net_.derain(x);
  const Tensor loss = sup_loss(y_pred, y, config_.weights(), perceptual_);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    Tape::current().clear();
    throw TrainingError("non-finite supervised loss (" + std::to_string(value) + ") at batch " +
                        (batch_id.empty() ? std::string("<unnamed>") : batch_id));
  }
  backward(loss);
  std::vector<Tensor> params;
  for (auto& p : net_.params()) params.push_back(p.tensor);
  adam_.step(params);
  return value;
}

double Trainer::unlabeled_step(const Tensor& x_u) {
  if (config_.gp_mode == GpMode::kOff) return 0.0;
  if (bank_.empty()) throw TrainingError("unlabeled_step: feature bank has not been built");
  if (bank_.size() < config_.nn) {
    throw TrainingError("unlabeled_step: bank holds " + std::to_string(bank_.size()) +
                        " entries but N_n = " + std::to_string(config_.nn));
  }
  Tape::current().clear();
  net_.zero_grad();
  const Tensor taps = net_.encode_tap(x_u);
  const std::size_t N = taps.dim(0), M = taps.dim(1), D = taps.dim(2) * taps.dim(3);
  Tensor total;
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor z = select_batch(taps, n).reshape({M, D});
    const auto neighbors = nearest(LatentMatrix::from_tensor(z), bank_, config_.nn);
    const GPPosterior post = posterior(z, bank_, neighbors, kernel_, config_.sigma_eps2, config_.gp_mode);
    const Tensor l = unsup_loss(z, post);
    total = total.defined() ? add(total, l) : l;
  }
  const double value = total.item() / static_cast<double>(N);
  if (!std::isfinite(value)) {
    Tape::current().clear();
    throw TrainingError("non-finite unsupervised loss (" + std::to_string(value) + ")");
  }
  backward(scale(total, config_.lambda_unsup / static_cast<double>(N)));
  std::vector<Tensor> params = net_.encoder_params();
  adam_.step(params);
  net_.zero_grad();
  return value;
}

void Trainer::rebuild_bank(std::size_t epoch) {
  bank_ = gpderain::rebuild_bank(bank_sources_, net_, config_.bank_max_entries,
                                 derive_seed(config_.seed, kStreamBank + 1000 * epoch),
                                 config_.gp_mode, static_cast<int>(epoch));
  kernel_ = KernelSpec{config_.kernel, 1.0, config_.rq_alpha};
  if (config_.kernel != KernelKind::kLinear) {
    kernel_.length_scale = median_pairwise_distance(
        bank_, config_.length_scale_rows, derive_seed(config_.seed, kStreamLengthScale + 1000 * epoch));
  }
  bank_.set_kernel(kernel_);
}

Tensor Trainer::crop_batch(const std::vector<std::size_t>& idx, const std::vector<Sample>& set,
                           Rng& rng, bool clean) const {
  const std::size_t crop = net_.config().crop;
  std::vector<Image> rainy, target;
  for (std::size_t i : idx) {
    const Sample& s = set[i];
    const std::size_t x0 = rng.index(s.rainy.width - crop + 1);
    const std::size_t y0 = rng.index(s.rainy.height - crop + 1);
    rainy.push_back(clean ? s.clean->crop(x0, y0, crop, crop) : s.rainy.crop(x0, y0, crop, crop));
  }
  std::vector<const Image*> ptrs;
  for (const Image& im : rainy) ptrs.push_back(&im);
  return stack_images(ptrs);
}

EpochRecord Trainer::run_epoch(std::size_t epoch, const std::vector<EvalSet>& eval_sets) {
  const auto start = std::chrono::steady_clock::now();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.lr = scheduled_lr(config_.lr, epoch, config_.lr_decay_every, config_.lr_decay_factor);
  adam_.set_lr(rec.lr);

  const bool gp_on = config_.gp_mode != GpMode::kOff;
  if (gp_on) {
    rebuild_bank(epoch);
    rec.bank_size = bank_.size();
    rec.length_scale = kernel_.kind == KernelKind::kLinear ? 0.0 : kernel_.length_scale;
  }

  std::vector<std::size_t> order(labeled_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng(derive_seed(config_.seed, kStreamLabeledOrder + 1000 * epoch));
  order_rng.shuffle(order);
  std::vector<std::size_t> uorder(unlabeled_.size());
  std::iota(uorder.begin(), uorder.end(), std::size_t{0});
  Rng uorder_rng(derive_seed(config_.seed, kStreamUnlabeledOrder + 1000 * epoch));
  uorder_rng.shuffle(uorder);
  Rng crop_rng(derive_seed(config_.seed, kStreamCrop + 1000 * epoch));
  Rng ucrop_rng(derive_seed(config_.seed, kStreamCrop + 1000 * epoch + 500));

  std::size_t upos = 0;
  for (std::size_t start_i = 0; start_i < order.size(); start_i += config_.batch) {
    const std::size_t end_i = std::min(order.size(), start_i + config_.batch);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start_i),
                                 order.begin() + static_cast<std::ptrdiff_t>(end_i));
    // Crops for rainy and clean must coincide, so both draw from copies of one stream.
    Rng crop_copy = crop_rng;
    const Tensor x = crop_batch(idx, labeled_, crop_rng, false);
    const Tensor y = crop_batch(idx, labeled_, crop_copy, true);
    const std::string batch_id = "epoch " + std::to_string(epoch) + " batch " +
                                 std::to_string(start_i / config_.batch) + " (first sample " +
                                 labeled_[idx.front()].id + ")";
    rec.sup_losses.push_back(labeled_step(x, y, batch_id));

    if (!gp_on) continue;
    for (std::size_t r = 0; r < config_.unlabeled_ratio; ++r) {
      std::vector<std::size_t> uidx;
      for (std::size_t k = 0; k < config_.batch; ++k) {
        uidx.push_back(uorder[upos % uorder.size()]);
        ++upos;
      }
      const Tensor xu = crop_batch(uidx, unlabeled_, ucrop_rng, false);
      rec.unsup_losses.push_back(unlabeled_step(xu));
    }
  }
  rec.mean_sup = mean_of(rec.sup_losses);
  rec.mean_unsup = mean_of(rec.unsup_losses);

  const bool last = epoch + 1 == config_.epochs;
  if ((epoch + 1) % config_.eval_every == 0 || last) {
    for (const EvalSet& set : eval_sets) {
      const MetricSummary m = evaluate(net_, set.samples);
      rec.eval[set.name] = {m.mean_psnr, m.mean_ssim};
    }
  }
  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

RunLog train_in_memory(Trainer& trainer, const std::vector<EvalSet>& eval_sets,
                       const std::optional<fs::path>& out_dir, const EpochCallback& on_epoch) {
  RunLog log;
  std::ofstream runlog;
  if (out_dir) {
    fs::create_directories(*out_dir);
    runlog.open(*out_dir / "runlog.jsonl", std::ios::trunc);
    if (!runlog) throw std::runtime_error("cannot write " + (*out_dir / "runlog.jsonl").string());
  }
  const TrainConfig& config = trainer.config();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec = trainer.run_epoch(epoch, eval_sets);
    if (out_dir) {
      runlog << rec.to_json().dump() << '\n';
      runlog.flush();
      trainer.net().save(*out_dir / "checkpoint.json");
      if (config.write_samples) {
        const fs::path samples = *out_dir / "samples";
        fs::create_directories(samples);
        for (const EvalSet& set : eval_sets) {
          if (set.samples.empty() || !set.samples.front().clean) continue;
          const Sample& s = set.samples.front();
          const std::string stem = "epoch" + std::to_string(epoch) + "_" + set.name;
          write_png(samples / (stem + "_rainy.png"), s.rainy);
          write_png(samples / (stem + "_derained.png"), derain_image(trainer.net(), s.rainy));
          write_png(samples / (stem + "_clean.png"), *s.clean);
        }
      }
    }
    if (on_epoch) on_epoch(rec);
    log.epochs.push_back(std::move(rec));
  }
  if (out_dir) {
    if (config.epochs == 0) trainer.net().save(*out_dir / "checkpoint.json");
    if (config.gp_mode != GpMode::kOff) {
      trainer.rebuild_bank(config.epochs);
      trainer.bank().save(*out_dir / "bank.json");
    }
  }
  return log;
}

TrainResult train(const TrainConfig& config, const ModelConfig& model_config,
                  const fs::path& labeled_manifest, const std::optional<fs::path>& unlabeled_manifest,
                  const std::vector<std::pair<std::string, fs::path>>& eval_manifests,
                  const fs::path& out_dir, const EpochCallback& on_epoch) {
  std::vector<Sample> labeled = load_samples(DatasetManifest::load(labeled_manifest));
  std::vector<Sample> unlabeled;
  if (config.gp_mode != GpMode::kOff) {
    if (!unlabeled_manifest) throw std::invalid_argument("train: gp mode needs an unlabeled manifest");
    unlabeled = load_samples(DatasetManifest::load(*unlabeled_manifest));
  }
  std::vector<EvalSet> eval_sets;
  for (const auto& [name, path] : eval_manifests)
    eval_sets.push_back({name, load_samples(DatasetManifest::load(path))});

  Trainer trainer(config, model_config, std::move(labeled), std::move(unlabeled));
  TrainResult result;
  result.log = train_in_memory(trainer, eval_sets, out_dir, on_epoch);
  result.checkpoint = out_dir / "checkpoint.json";
  return result;
}

}  // namespace gpderain
