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

#include "gpderain/model.hpp"

#include "gpderain/random.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace gpderain {

namespace {

constexpr const char* kCheckpointFormat = "gpderain-checkpoint";
constexpr int kCheckpointVersion = 1;
// Residual exit convs and the output conv start small so the untrained
// network is close to the identity deraining map (zero residue).
constexpr double kResidualGain = 0.1;

Conv2d make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 std::vector<NamedParam>& registry) {
  Conv2d c;
  c.weight = Tensor::zeros({out, in, k, k}, true);
  c.bias = Tensor::zeros({out}, true);
  c.padding = (k - 1) / 2;
  registry.push_back({name + ".w", c.weight});
  registry.push_back({name + ".b", c.bias});
  return c;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string to_string(LatentTap tap) {
  return tap == LatentTap::kLastDownsample ? "last_downsample" : "encoder_output";
}

LatentTap latent_tap_from_string(const std::string& name) {
  if (name == "last_downsample") return LatentTap::kLastDownsample;
  if (name == "encoder_output") return LatentTap::kEncoderOutput;
  throw std::invalid_argument("unknown latent tap '" + name +
                              "' (expected last_downsample or encoder_output)");
}

void ModelConfig::validate() const {
  if (base_channels == 0) throw std::invalid_argument("model: base_channels must be positive");
  if (n_downsamples == 0) throw std::invalid_argument("model: n_downsamples must be >= 1");
  if (res2_scale < 2) throw std::invalid_argument("model: res2_scale must be >= 2");
  const std::size_t factor = std::size_t{1} << n_downsamples;
  if (crop == 0 || crop % factor != 0) {
    throw std::invalid_argument("model: crop " + std::to_string(crop) +
                                " must be divisible by 2^n_downsamples = " +
                                std::to_string(factor));
  }
  // Every Res2Block interior width is one of b, 2b, 4b.
  if (base_channels % res2_scale != 0) {
    throw std::invalid_argument("model: base_channels " + std::to_string(base_channels) +
                                " must be divisible by res2_scale " +
                                std::to_string(res2_scale));
  }
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
    throw std::invalid_argument("model: leaky_slope must lie in (0,1)");
  }
}

double init_bound(std::size_t fan_in, double slope) {
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

// ---------------------------------------------------------------------------

LatentMatrix LatentMatrix::from_tensor(const Tensor& t) {
  LatentMatrix m;
  if (t.rank() == 4 && t.dim(0) == 1) {
    m.rows = t.dim(1);
    m.cols = t.dim(2) * t.dim(3);
  } else if (t.rank() == 2) {
    m.rows = t.dim(0);
    m.cols = t.dim(1);
  } else {
    throw std::invalid_argument("LatentMatrix: expected [1,M,s,s] or [M,D], got " +
                                shape_str(t.shape()));
  }
  m.values.assign(t.data().begin(), t.data().end());
  return m;
}

Tensor LatentMatrix::to_feature_maps(std::size_t side) const {
  if (side * side != cols) {
    throw std::invalid_argument("LatentMatrix: side " + std::to_string(side) +
                                " incompatible with D = " + std::to_string(cols));
  }
  return Tensor::from_buffer({1, rows, side, side}, values);
}

// ---------------------------------------------------------------------------

Res2Block::Res2Block(std::string name, std::size_t in_channels, std::size_t out_channels,
                     std::size_t scale, std::vector<NamedParam>& registry)
    : in_(in_channels), out_(out_channels), scale_(scale) {
  if (out_ % scale_ != 0) {
    throw std::invalid_argument("Res2Block " + name + ": interior width " +
                                std::to_string(out_) + " not divisible by scale " +
                                std::to_string(scale_));
  }
  const std::size_t group = out_ / scale_;
  entry_ = make_conv(name + ".entry", in_, out_, 1, registry);
  for (std::size_t i = 1; i < scale_; ++i)
    branches_.push_back(make_conv(name + ".branch" + std::to_string(i), group, group, 3, registry));
  exit_ = make_conv(name + ".exit", out_, out_, 1, registry);
  if (in_ != out_) projection_ = make_conv(name + ".proj", in_, out_, 1, registry);
}

Tensor Res2Block::forward(const Tensor& x, double slope) const {
  const Tensor inner = leaky_relu(entry_(x), slope);
  const std::size_t group = out_ / scale_;
  std::vector<Tensor> parts;
  parts.reserve(scale_);
  parts.push_back(slice_channels(inner, 0, group));
  Tensor previous;
  for (std::size_t i = 1; i < scale_; ++i) {
    Tensor xi = slice_channels(inner, i * group, group);
    if (i > 1) xi = add(xi, previous);
    previous = leaky_relu(branches_[i - 1](xi), slope);
    parts.push_back(previous);
  }
  const Tensor mixed = exit_(concat_channels(parts));
  const Tensor skip = in_ == out_ ? x : projection_(x);
  return add(skip, mixed);
}

// ---------------------------------------------------------------------------

UDeNet::UDeNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t b = config_.base_channels, s = config_.res2_scale;
  const std::size_t n = config_.n_downsamples;

  enc_in_ = make_conv("enc.in", 3, b, 3, params_);
  enc_pre_.emplace_back("enc.b1", b, 2 * b, s, params_);
  for (std::size_t i = 1; i < n; ++i)
    enc_pre_.emplace_back("enc.b" + std::to_string(i + 1), 2 * b, 2 * b, s, params_);
  enc_post_.emplace_back("enc.b" + std::to_string(n + 1), 2 * b, 4 * b, s, params_);
  enc_post_.emplace_back("enc.b" + std::to_string(n + 2), 4 * b, 4 * b, s, params_);
  enc_post_.emplace_back("enc.b" + std::to_string(n + 3), 4 * b, 4 * b, s, params_);

  // Every encoder stage before a downsample emits 2b channels.
  const std::size_t skip = config_.skip_connections ? 2 * b : 0;
  dec_.emplace_back("dec.b1", 4 * b, 2 * b, s, params_);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t out = (i == n - 1) ? b : 2 * b;
    dec_.emplace_back("dec.b" + std::to_string(i + 1), 2 * b + skip, out, s, params_);
  }
  dec_out_ = make_conv("dec.out", dec_.back().out_channels() + skip, 3, 3, params_);

  Rng rng(seed);
  for (NamedParam& p : params_) {
    if (!ends_with(p.name, ".w")) continue;
    const Shape& shape = p.tensor.shape();
    const std::size_t fan_in = shape[1] * shape[2] * shape[3];
    double bound = init_bound(fan_in, config_.leaky_slope);
    if (ends_with(p.name, ".exit.w") || p.name == "dec.out.w") bound *= kResidualGain;
    for (double& v : p.tensor.mutable_data()) v = rng.uniform(-bound, bound);
  }
}

void UDeNet::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != config_.crop || x.dim(3) != config_.crop) {
    throw std::invalid_argument("UDeNet: expected input [N,3," + std::to_string(config_.crop) +
                                "," + std::to_string(config_.crop) + "], got " +
                                shape_str(x.shape()));
  }
}

Tensor UDeNet::encode_prefix(const Tensor& x, std::vector<Tensor>* skips) const {
  check_input(x);
  const double slope = config_.leaky_slope;
  Tensor h = leaky_relu(enc_in_(x), slope);
  for (const Res2Block& block : enc_pre_) {
    h = block.forward(h, slope);
    if (skips) skips->push_back(h);
    h = avg_pool2(h);
  }
  return h;
}

Tensor UDeNet::encode_tap(const Tensor& x) const {
  if (config_.latent_tap == LatentTap::kEncoderOutput) return encode(x).latent;
  return encode_prefix(x, nullptr);
}

UDeNet::Encoding UDeNet::encode(const Tensor& x) const {
  Encoding out;
  Tensor h = encode_prefix(x, config_.skip_connections ? &out.skips : nullptr);
  if (config_.latent_tap == LatentTap::kLastDownsample) out.tap = h;
  for (const Res2Block& block : enc_post_) h = block.forward(h, config_.leaky_slope);
  out.latent = h;
  if (config_.latent_tap == LatentTap::kEncoderOutput) out.tap = h;
  return out;
}

Tensor UDeNet::decode(const Tensor& latent) const {
  if (config_.skip_connections) {
    throw std::invalid_argument("UDeNet::decode: model uses skip connections; decode an Encoding");
  }
  Encoding enc;
  enc.latent = latent;
  return decode(enc);
}

Tensor UDeNet::decode(const Encoding& encoding) const {
  const Tensor& latent = encoding.latent;
  const std::size_t s = config_.latent_side();
  if (latent.rank() != 4 || latent.dim(1) != config_.encoder_channels() || latent.dim(2) != s ||
      latent.dim(3) != s) {
    throw std::invalid_argument("UDeNet::decode: expected latent [N," +
                                std::to_string(config_.encoder_channels()) + "," +
                                std::to_string(s) + "," + std::to_string(s) + "], got " +
                                shape_str(latent.shape()));
  }
  const std::size_t n = config_.n_downsamples;
  if (config_.skip_connections && encoding.skips.size() != n) {
    throw std::invalid_argument("UDeNet::decode: expected " + std::to_string(n) +
                                " skip tensors, got " + std::to_string(encoding.skips.size()));
  }
  // Skip k (coarsest first) joins the decoder after the k-th upsample.
  const auto join = [&](const Tensor& h, std::size_t k) {
    if (!config_.skip_connections) return h;
    const Tensor& skip = encoding.skips[n - 1 - k];
    if (skip.dim(0) != h.dim(0) || skip.dim(2) != h.dim(2)) {
      throw std::invalid_argument("UDeNet::decode: skip " + shape_str(skip.shape()) +
                                  " does not fit decoder feature " + shape_str(h.shape()));
    }
    return concat_channels({h, skip});
  };
  const double slope = config_.leaky_slope;
  Tensor h = dec_.front().forward(latent, slope);
  for (std::size_t i = 1; i < dec_.size(); ++i) {
    h = join(upsample_nearest2(h), i - 1);
    h = dec_[i].forward(h, slope);
  }
  h = join(upsample_nearest2(h), n - 1);
  return dec_out_(h);
}

Tensor UDeNet::derain(const Tensor& x) const { return sub(x, decode(encode(x))); }

std::vector<Tensor> UDeNet::encoder_params() const {
  std::vector<Tensor> out;
  for (const NamedParam& p : params_)
    if (is_encoder_param(p.name)) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> UDeNet::decoder_params() const {
  std::vector<Tensor> out;
  for (const NamedParam& p : params_)
    if (!is_encoder_param(p.name)) out.push_back(p.tensor);
  return out;
}

std::size_t UDeNet::parameter_count() const {
  std::size_t n = 0;
  for (const NamedParam& p : params_) n += p.tensor.numel();
  return n;
}

void UDeNet::zero_grad() {
  for (NamedParam& p : params_) p.tensor.zero_grad();
}

void UDeNet::zero_all() {
  for (NamedParam& p : params_)
    for (double& v : p.tensor.mutable_data()) v = 0.0;
}

void UDeNet::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["model"] = to_json(config_);
  nlohmann::json params = nlohmann::json::array();
  for (const NamedParam& p : params_) {
    params.push_back({{"name", p.name},
                      {"shape", p.tensor.shape()},
                      {"values", std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())}});
  }
  j["params"] = std::move(params);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out << j.dump();
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

UDeNet UDeNet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error(path.string() + " is not a gpderain checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + j.at("version").dump());
  }
  UDeNet net(model_config_from_json(j.at("model")), 0);
  const auto& params = j.at("params");
  if (params.size() != net.params_.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(params.size()) +
                             " parameters, model expects " + std::to_string(net.params_.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedParam& p = net.params_[i];
    const auto name = params[i].at("name").get<std::string>();
    const auto shape = params[i].at("shape").get<Shape>();
    if (name != p.name || shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint parameter " + name + " " + shape_str(shape) +
                               " does not match model parameter " + p.name + " " +
                               shape_str(p.tensor.shape()));
    }
    const auto values = params[i].at("values").get<std::vector<double>>();
    if (values.size() != p.tensor.numel()) {
      throw std::runtime_error("checkpoint parameter " + name + " has wrong value count");
    }
    std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
  }
  return net;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"base_channels", c.base_channels},
          {"crop", c.crop},
          {"res2_scale", c.res2_scale},
          {"n_downsamples", c.n_downsamples},
          {"latent_tap", to_string(c.latent_tap)},
          {"leaky_slope", c.leaky_slope},
          {"skip_connections", c.skip_connections}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  ModelConfig c = defaults;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "base_channels") c.base_channels = v.get<std::size_t>();
      else if (key == "crop") c.crop = v.get<std::size_t>();
      else if (key == "res2_scale") c.res2_scale = v.get<std::size_t>();
      else if (key == "n_downsamples") c.n_downsamples = v.get<std::size_t>();
      else if (key == "latent_tap") c.latent_tap = latent_tap_from_string(v.get<std::string>());
      else if (key == "leaky_slope") c.leaky_slope = v.get<double>();
      else if (key == "skip_connections") c.skip_connections = v.get<bool>();
      else throw std::invalid_argument("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("model config key '" + key + "' has the wrong type: " + v.dump());
    }
  }
  c.validate();
  return c;
}

}  // namespace gpderain
