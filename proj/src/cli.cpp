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

#include "gpderain/cli.hpp"

#include "gpderain/gp.hpp"
#include "gpderain/objective.hpp"

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace gpderain {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Verbosity { kQuiet, kInfo, kDebug };

Verbosity verbosity() {
  const char* env = std::getenv("GPDERAIN_LOG");
  if (!env) return Verbosity::kInfo;
  const std::string v = env;
  if (v == "quiet" || v == "0") return Verbosity::kQuiet;
  if (v == "debug" || v == "2") return Verbosity::kDebug;
  return Verbosity::kInfo;
}

template <typename T>
T take(const json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type: " + value.dump());
  }
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
}

DataConfig data_config_from_json(const json& j, DataConfig c) {
  require_object(j, "data");
  for (const auto& [key, v] : j.items()) {
    if (key == "source_train") c.source_train = take<std::size_t>(v, key);
    else if (key == "source_test") c.source_test = take<std::size_t>(v, key);
    else if (key == "target_train") c.target_train = take<std::size_t>(v, key);
    else if (key == "target_test") c.target_test = take<std::size_t>(v, key);
    else if (key == "image_size") c.image_size = take<std::size_t>(v, key);
    else if (key == "base_images") c.base_images = take<std::size_t>(v, key);
    else if (key == "base_image_size") c.base_image_size = take<std::size_t>(v, key);
    else if (key == "base_seed") c.base_seed = take<std::uint64_t>(v, key);
    else if (key == "base_dir") c.base_dir = take<std::string>(v, key);
    else if (key == "root") c.root = take<std::string>(v, key);
    else if (key == "dirs") {
      require_object(v, "data.dirs");
      for (const auto& [split, dir] : v.items()) {
        if (!c.dirs.count(split)) throw UsageError("unknown data.dirs key '" + split + "'");
        c.dirs[split] = take<std::string>(dir, "data.dirs." + split);
      }
    } else {
      throw UsageError("unknown data config key '" + key + "'");
    }
  }
  if (c.image_size == 0) throw UsageError("data.image_size must be positive");
  if (c.base_dir.empty() && c.base_images == 0) throw UsageError("data.base_images must be positive");
  if (c.base_dir.empty() && c.base_image_size < c.image_size) {
    throw UsageError("data.base_image_size must be >= data.image_size");
  }
  return c;
}

json to_json(const DataConfig& c) {
  return {{"source_train", c.source_train}, {"source_test", c.source_test},
          {"target_train", c.target_train}, {"target_test", c.target_test},
          {"image_size", c.image_size},     {"base_images", c.base_images},
          {"base_image_size", c.base_image_size}, {"base_seed", c.base_seed},
          {"base_dir", c.base_dir},         {"root", c.root},
          {"dirs", c.dirs}};
}

// Rethrows library validation failures as usage errors.
template <typename F>
auto as_usage(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(where + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path.string());
}

bool nested_or_equal(const fs::path& a, const fs::path& b) {
  auto ia = a.begin(), ib = b.begin();
  for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
    if (*ia != *ib) return false;
  }
  return true;
}

std::vector<Image> base_images(const RunSpec& spec, std::uint64_t family) {
  if (!spec.data.base_dir.empty()) {
    const fs::path dir = resolve(spec, spec.data.base_dir);
    if (!fs::is_directory(dir)) throw UsageError("data.base_dir not found: " + dir.string());
    std::vector<Image> images = load_image_dir(dir);
    if (images.empty()) throw UsageError("data.base_dir holds no PNG files: " + dir.string());
    return images;
  }
  std::vector<Image> images;
  const std::uint64_t seed = derive_seed(spec.data.base_seed, family);
  for (std::size_t i = 0; i < spec.data.base_images; ++i)
    images.push_back(procedural_texture(spec.data.base_image_size, spec.data.base_image_size,
                                        derive_seed(seed, i)));
  return images;
}

UDeNet load_checkpoint(const fs::path& path) {
  require_file(path, "checkpoint");
  return UDeNet::load(path);
}

std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << "{base_channels " << c.base_channels << ", crop " << c.crop << ", res2_scale " << c.res2_scale
     << ", n_downsamples " << c.n_downsamples << ", latent_tap " << to_string(c.latent_tap)
     << ", leaky_slope " << c.leaky_slope << ", skip_connections " << c.skip_connections << "}";
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const fs::path& config, const fs::path& out_dir, std::ostream& out) {
  const RunSpec spec = load_run_spec(config);
  const auto manifests = synthesize(spec, out_dir);
  RunSpec snapshot = spec;
  snapshot.data.root = fs::absolute(out_dir).lexically_normal().string();
  write_json(out_dir / "resolved_config.json", to_json(snapshot));
  for (const auto& [split, path] : manifests) out << split << ": " << path.string() << '\n';
  return 0;
}

int cmd_train(const fs::path& config, const fs::path& out_dir, const std::string& data_root,
              const std::string& gp_mode, const std::string& kernel, std::optional<std::size_t> nn,
              std::optional<std::uint64_t> seed, std::ostream& out) {
  RunSpec spec = load_run_spec(config);
  as_usage("flags", [&] {
    if (!gp_mode.empty()) spec.train.gp_mode = gp_mode_from_string(gp_mode);
    if (!kernel.empty()) spec.train.kernel = kernel_kind_from_string(kernel);
    if (nn) spec.train.nn = *nn;
    if (seed) spec.train.seed = *seed;
    spec.train.validate();
    return 0;
  });
  const fs::path root = data_root.empty() ? resolve(spec, spec.data.root) : fs::path(data_root);
  const auto manifests = manifest_paths(spec, root);
  require_file(manifests.at("source_train"), "manifest");
  if (spec.train.gp_mode != GpMode::kOff) require_file(manifests.at("target_train"), "manifest");
  std::vector<std::pair<std::string, fs::path>> eval_sets;
  for (const char* split : {"source_test", "target_test"}) {
    require_file(manifests.at(split), "manifest");
    eval_sets.emplace_back(split, manifests.at(split));
  }

  fs::create_directories(out_dir);
  RunSpec snapshot = spec;
  snapshot.data.root = fs::absolute(root).lexically_normal().string();
  write_json(out_dir / "resolved_config.json", to_json(snapshot));

  const Verbosity level = verbosity();
  const auto on_epoch = [&](const EpochRecord& rec) {
    if (level == Verbosity::kQuiet) return;
    std::cerr << "epoch " << rec.epoch << " lr " << rec.lr << " sup " << rec.mean_sup;
    if (spec.train.gp_mode != GpMode::kOff) std::cerr << " unsup " << rec.mean_unsup;
    for (const auto& [name, m] : rec.eval)
      std::cerr << " " << name << " " << std::fixed << std::setprecision(3) << m.first << "dB/"
                << m.second << std::defaultfloat;
    std::cerr << " (" << std::setprecision(3) << rec.wall_time_s << "s)" << std::setprecision(6)
              << '\n';
  };
  const std::optional<fs::path> unlabeled =
      spec.train.gp_mode == GpMode::kOff ? std::nullopt
                                         : std::optional<fs::path>(manifests.at("target_train"));
  const TrainResult result = train(spec.train, spec.model, manifests.at("source_train"), unlabeled,
                                   eval_sets, out_dir, on_epoch);
  out << "checkpoint: " << result.checkpoint.string() << '\n';
  if (!result.log.epochs.empty()) {
    for (const auto& [name, m] : result.log.epochs.back().eval)
      out << name << ": psnr " << m.first << " ssim " << m.second << '\n';
  }
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
             const std::string& config, bool dump, std::ostream& out) {
  require_file(manifest, "manifest");
  const UDeNet net = load_checkpoint(checkpoint);
  if (!config.empty()) {
    const RunSpec spec = load_run_spec(config);
    if (!(spec.model == net.config())) {
      throw UsageError("config model " + describe(spec.model) + " does not match checkpoint model " +
                       describe(net.config()));
    }
  }
  const MetricSummary summary = evaluate(net, manifest);
  fs::create_directories(out_dir);
  json report = summary.to_json();
  report["checkpoint"] = fs::absolute(checkpoint).lexically_normal().string();
  report["manifest"] = fs::absolute(manifest).lexically_normal().string();
  write_json(out_dir / "report.json", report);
  if (dump) {
    const DatasetManifest m = DatasetManifest::load(manifest);
    fs::create_directories(out_dir / "derained");
    for (const ManifestRecord& r : m.records)
      write_png(out_dir / "derained" / r.rainy.filename(), derain_image(net, read_png(r.rainy)));
  }
  out << std::left << std::setw(28) << "image_id" << std::right << std::setw(10) << "psnr"
      << std::setw(10) << "ssim" << '\n';
  out << std::fixed;
  for (const MetricRow& r : summary.rows)
    out << std::left << std::setw(28) << r.image_id << std::right << std::setw(10)
        << std::setprecision(3) << r.psnr << std::setw(10) << std::setprecision(4) << r.ssim << '\n';
  out << std::left << std::setw(28) << "mean" << std::right << std::setw(10) << std::setprecision(3)
      << summary.mean_psnr << std::setw(10) << std::setprecision(4) << summary.mean_ssim << '\n';
  out << std::defaultfloat;
  if (!summary.skipped.empty()) out << "skipped: " << summary.skipped.size() << '\n';
  return 0;
}

int cmd_derain(const fs::path& checkpoint, const fs::path& in, const fs::path& out_path,
               std::ostream& out) {
  require_file(in, "input image");
  const UDeNet net = load_checkpoint(checkpoint);
  const Image derained = derain_image(net, read_png(in));
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_png(out_path, derained);
  out << out_path.string() << '\n';
  return 0;
}

int cmd_gp_inspect(const fs::path& checkpoint, const fs::path& bank_path, const fs::path& in,
                   const std::string& mode_name, std::optional<std::size_t> nn, double sigma_eps2,
                   const std::string& out_path, std::ostream& out) {
  require_file(bank_path, "bank");
  require_file(in, "input image");
  const UDeNet net = load_checkpoint(checkpoint);
  const FeatureBank bank = FeatureBank::load(bank_path);
  const GpMode mode = mode_name.empty() ? bank.mode() : as_usage("--mode", [&] {
    return gp_mode_from_string(mode_name);
  });
  if (mode != bank.mode()) {
    throw UsageError("bank was built for mode " + to_string(bank.mode()) + " but " +
                     to_string(mode) + " was requested");
  }
  if (mode == GpMode::kOff) throw UsageError("gp-inspect needs a syn2real or syn2real++ bank");
  if (bank.rows() != net.config().latent_rows() || bank.cols() != net.config().latent_cols()) {
    throw UsageError("bank latent " + std::to_string(bank.rows()) + "x" + std::to_string(bank.cols()) +
                     " does not match checkpoint latent " + std::to_string(net.config().latent_rows()) +
                     "x" + std::to_string(net.config().latent_cols()));
  }
  const std::size_t n = nn.value_or(std::min<std::size_t>(32, bank.size()));
  if (n == 0 || n > bank.size()) {
    throw UsageError("--nn " + std::to_string(n) + " must be in [1, " + std::to_string(bank.size()) + "]");
  }

  const Image image = read_png(in);
  const std::size_t crop = net.config().crop;
  if (image.width < crop || image.height < crop) {
    throw UsageError("input image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " is smaller than the crop " + std::to_string(crop));
  }
  const Image centered = image.crop((image.width - crop) / 2, (image.height - crop) / 2, crop, crop);

  NoGradGuard no_grad;
  const Tensor tap = net.encode_tap(centered.to_tensor());
  const LatentMatrix z = LatentMatrix::from_tensor(tap);
  const auto neighbors = nearest(z, bank, n);
  const GPPosterior post = posterior(z, bank, neighbors, bank.kernel(), sigma_eps2, mode);
  const Tensor z_t = Tensor::from_buffer({z.rows, z.cols}, z.values);
  const double loss = unsup_loss(z_t, post).item();

  const Matrix S = post.sigma_matrix();
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly);

  json report;
  report["mode"] = to_string(mode);
  report["kernel"] = {{"kind", to_string(bank.kernel().kind)},
                      {"length_scale", bank.kernel().length_scale},
                      {"alpha", bank.kernel().alpha}};
  report["sigma_eps2"] = sigma_eps2;
  report["noise_used"] = post.noise_used;
  json nbs = json::array();
  for (std::size_t k = 0; k < neighbors.size(); ++k)
    nbs.push_back({{"rank", k + 1}, {"image_id", neighbors[k].image_id}, {"score", neighbors[k].score}});
  report["neighbors"] = nbs;
  if (mode == GpMode::kWholeLatent) {
    std::vector<double> alpha(post.alpha.data(), post.alpha.data() + post.alpha.size());
    report["alpha"] = alpha;
    const Matrix recon = post.alpha * post.index_rows;
    report["alpha_reconstruction_max_abs"] = (recon - post.mu).cwiseAbs().maxCoeff();
  }
  report["sigma_eigen_min"] = eig.eigenvalues().minCoeff();
  report["sigma_eigen_max"] = eig.eigenvalues().maxCoeff();
  report["unsup_loss"] = loss;
  if (!out_path.empty()) write_json(out_path, report);
  out << report.dump(2) << '\n';
  return 0;
}

int cmd_init_identity(const std::string& config, const fs::path& out_path, std::ostream& out) {
  const ModelConfig model = config.empty() ? ModelConfig{} : load_run_spec(config).model;
  UDeNet net(model, 0);
  net.zero_all();
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  net.save(out_path);
  out << out_path.string() << '\n';
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunSpec

RunSpec default_run_spec() {
  RunSpec spec;
  spec.source.orientation_deg = 70.0;
  spec.source.density = 8.0;
  spec.source.seed = 101;
  spec.target.orientation_deg = 110.0;
  spec.target.density = 16.0;
  spec.target.seed = 202;
  return spec;
}

RunSpec run_spec_from_json(const json& j, const fs::path& base_path) {
  require_object(j, "config");
  RunSpec spec = default_run_spec();
  spec.base_path = base_path;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      spec.model = as_usage("model", [&] { return model_config_from_json(v, spec.model); });
    } else if (key == "train") {
      spec.train = as_usage("train", [&] { return train_config_from_json(v, spec.train); });
    } else if (key == "rain") {
      require_object(v, "rain");
      for (const auto& [domain, params] : v.items()) {
        if (domain == "source") {
          spec.source = as_usage("rain.source", [&] { return rain_params_from_json(params, spec.source); });
        } else if (domain == "target") {
          spec.target = as_usage("rain.target", [&] { return rain_params_from_json(params, spec.target); });
        } else {
          throw UsageError("unknown rain domain '" + domain + "' (expected source or target)");
        }
      }
    } else if (key == "data") {
      spec.data = data_config_from_json(v, spec.data);
    } else {
      throw UsageError("unknown config key '" + key + "'");
    }
  }
  if (spec.data.image_size < spec.model.crop) {
    throw UsageError("data.image_size " + std::to_string(spec.data.image_size) +
                     " is smaller than model.crop " + std::to_string(spec.model.crop));
  }
  return spec;
}

RunSpec load_run_spec(const fs::path& path) {
  require_file(path, "config");
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_spec_from_json(j, fs::absolute(path).parent_path());
}

json to_json(const RunSpec& spec) {
  return {{"model", to_json(spec.model)},
          {"train", to_json(spec.train)},
          {"rain", {{"source", to_json(spec.source)}, {"target", to_json(spec.target)}}},
          {"data", to_json(spec.data)}};
}

fs::path resolve(const RunSpec& spec, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? p : (spec.base_path / p).lexically_normal();
}

std::map<std::string, fs::path> manifest_paths(const RunSpec& spec, const fs::path& root) {
  std::map<std::string, fs::path> out;
  for (const auto& [split, dir] : spec.data.dirs) out[split] = root / dir / "manifest.json";
  return out;
}

std::map<std::string, fs::path> synthesize(const RunSpec& spec, const fs::path& out) {
  std::vector<std::pair<std::string, fs::path>> dirs;
  for (const auto& [split, dir] : spec.data.dirs)
    dirs.emplace_back(split, (fs::absolute(out) / dir).lexically_normal());
  for (std::size_t a = 0; a < dirs.size(); ++a)
    for (std::size_t b = a + 1; b < dirs.size(); ++b)
      if (nested_or_equal(dirs[a].second, dirs[b].second) ||
          nested_or_equal(dirs[b].second, dirs[a].second)) {
        throw UsageError("output directories overlap: " + dirs[a].first + " -> " +
                         dirs[a].second.string() + ", " + dirs[b].first + " -> " +
                         dirs[b].second.string());
      }

  const std::vector<Image> train_base = base_images(spec, 0);
  const std::vector<Image> test_base = base_images(spec, 1);
  struct Job {
    const char* split;
    const char* domain;
    const RainParams* params;
    std::size_t count;
    bool labeled;
    std::uint64_t stream;
  };
  const Job jobs[] = {{"source_train", "source", &spec.source, spec.data.source_train, true, 0},
                      {"source_test", "source", &spec.source, spec.data.source_test, true, 1},
                      {"target_train", "target", &spec.target, spec.data.target_train, false, 0},
                      {"target_test", "target", &spec.target, spec.data.target_test, true, 1}};
  std::map<std::string, fs::path> manifests;
  for (const Job& job : jobs) {
    DomainSpec d;
    d.domain = job.domain;
    d.split = job.split;
    d.params = *job.params;
    d.params.seed = derive_seed(job.params->seed, job.stream);
    d.count = job.count;
    d.image_size = spec.data.image_size;
    d.labeled = job.labeled;
    const fs::path dir = out / spec.data.dirs.at(job.split);
    make_domain(job.stream == 0 ? train_base : test_base, d, dir);
    manifests[job.split] = dir / "manifest.json";
  }
  return manifests;
}

// ---------------------------------------------------------------------------
// Entry point

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semi-supervised single-image deraining with a Gaussian-process latent prior"};
  app.require_subcommand(1);

  std::string config, out_dir, data_root, gp_mode, kernel, checkpoint, manifest, in, bank, mode,
      report_out;
  std::optional<std::size_t> nn;
  std::optional<std::uint64_t> seed;
  double sigma_eps2 = 1.0;
  bool dump = false;

  auto* synth = app.add_subcommand("synth", "Render the source and target rain domains");
  synth->add_option("--config", config, "Run config (JSON)")->required();
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model on synthesized domains");
  train_cmd->add_option("--config", config, "Run config (JSON)")->required();
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_option("--data", data_root, "Synthesized data directory (overrides data.root)");
  train_cmd->add_option("--gp-mode", gp_mode, "off | syn2real | syn2real++");
  train_cmd->add_option("--kernel", kernel, "lin | se | rq");
  train_cmd->add_option("--nn", nn, "Nearest neighbors per unlabeled image");
  train_cmd->add_option("--seed", seed, "Run seed");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a labeled manifest");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", manifest, "Labeled manifest")->required();
  eval_cmd->add_option("--out", out_dir, "Report directory")->required();
  eval_cmd->add_option("--config", config, "Run config to check against the checkpoint");
  eval_cmd->add_flag("--dump", dump, "Also write derained PNGs");

  auto* derain_cmd = app.add_subcommand("derain", "Derain a single PNG");
  derain_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  derain_cmd->add_option("--in", in, "Input PNG")->required();
  derain_cmd->add_option("--out", out_dir, "Output PNG")->required();

  auto* inspect = app.add_subcommand("gp-inspect", "Show the GP pseudo-label for one image");
  inspect->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  inspect->add_option("--bank", bank, "Bank file written by train")->required();
  inspect->add_option("--in", in, "Input PNG")->required();
  inspect->add_option("--mode", mode, "syn2real | syn2real++ (must match the bank)");
  inspect->add_option("--nn", nn, "Nearest neighbors");
  inspect->add_option("--sigma-eps2", sigma_eps2, "Observation noise");
  inspect->add_option("--report", report_out, "Also write the report to this file");

  auto* identity = app.add_subcommand("init-identity", "Write a zero-residue checkpoint");
  identity->add_option("--config", config, "Run config supplying the model block");
  identity->add_option("--out", out_dir, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return cmd_synth(config, out_dir, out);
    if (*train_cmd) return cmd_train(config, out_dir, data_root, gp_mode, kernel, nn, seed, out);
    if (*eval_cmd) return cmd_eval(checkpoint, manifest, out_dir, config, dump, out);
    if (*derain_cmd) return cmd_derain(checkpoint, in, out_dir, out);
    if (*inspect) return cmd_gp_inspect(checkpoint, bank, in, mode, nn, sigma_eps2, report_out, out);
    if (*identity) return cmd_init_identity(config, out_dir, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace gpderain
