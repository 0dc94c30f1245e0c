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

#include "support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace gpderain;
using gpderain::testing::scratch_dir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "gpderain");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json small_config() {
  return {{"model", {{"base_channels", 8}, {"crop", 32}}},
          {"train",
           {{"epochs", 1}, {"batch", 2}, {"nn", 2}, {"bank_max_entries", 6}, {"gp_mode", "off"},
            {"length_scale_rows", 64}, {"write_samples", false}}},
          {"data",
           {{"source_train", 6}, {"source_test", 2}, {"target_train", 4}, {"target_test", 2},
            {"image_size", 32}, {"base_images", 4}, {"base_image_size", 40}}}};
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  fs::create_directories(dir);
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

std::vector<json> read_runlog(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

// One synthesized dataset shared by the cases below.
const fs::path& dataset() {
  static const fs::path root = [] {
    const fs::path dir = scratch_dir("cli_data");
    const auto cfg = write_config(dir, small_config());
    const Result r = cli({"synth", "--config", cfg.string(), "--out", (dir / "data").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return dir;
  }();
  return root;
}

}  // namespace

TEST_CASE("synth writes four manifests deterministically") {
  const fs::path dir = dataset();
  for (const char* split : {"source_train", "source_test", "target_train", "target_test"})
    CHECK(fs::exists(dir / "data" / split / "manifest.json"));
  const auto unl = DatasetManifest::load(dir / "data" / "target_train" / "manifest.json");
  CHECK_FALSE(unl.labeled);
  CHECK(unl.records.size() == 4);
  CHECK(unl.params.orientation_deg == 110.0);
  CHECK(unl.params.density == 16.0);
  const auto src = DatasetManifest::load(dir / "data" / "source_train" / "manifest.json");
  CHECK(src.params.orientation_deg == 70.0);
  CHECK(src.records.size() == 6);

  const auto cfg = dir / "config.json";
  const Result again = cli({"synth", "--config", cfg.string(), "--out", (dir / "again").string()});
  REQUIRE(again.code == 0);
  for (const char* f : {"source_train/rainy_0003.png", "source_train/clean_0005.png",
                        "target_test/rainy_0001.png", "target_train/manifest.json"})
    CHECK(slurp(dir / "data" / f) == slurp(dir / "again" / f));
  const auto test_src = DatasetManifest::load(dir / "data" / "source_test" / "manifest.json");
  CHECK(slurp(src.records[0].clean.value()) != slurp(test_src.records[0].clean.value()));
}

TEST_CASE("configuration and usage errors") {
  const fs::path dir = scratch_dir("cli_errors");
  SUBCASE("overlapping output directories") {
    json j = small_config();
    j["data"]["dirs"] = {{"source_test", "source_train/nested"}};
    const Result r = cli({"synth", "--config", write_config(dir, j).string(), "--out", (dir / "d").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("overlap") != std::string::npos);
  }
  SUBCASE("unknown key") {
    json j = small_config();
    j["train"]["learning_rate"] = 0.1;
    const Result r = cli({"synth", "--config", write_config(dir, j).string(), "--out", (dir / "d").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("learning_rate") != std::string::npos);
    j = small_config();
    j["extra"] = 1;
    CHECK(cli({"synth", "--config", write_config(dir, j).string(), "--out", (dir / "d").string()}).code == 2);
  }
  SUBCASE("missing manifest names the path") {
    const Result r = cli({"train", "--config", write_config(dir, small_config()).string(), "--out",
                          (dir / "run").string(), "--data", (dir / "nowhere").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find((dir / "nowhere" / "source_train" / "manifest.json").string()) != std::string::npos);
  }
  SUBCASE("bad flags") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"synth"}).code == 2);
    CHECK(cli({"train", "--config", write_config(dir, small_config()).string(), "--out",
               (dir / "run").string(), "--gp-mode", "fancy"})
              .code == 2);
    CHECK(cli({"synth", "--config", (dir / "missing.json").string(), "--out", "x"}).code == 2);
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK(cli({"synth", "--config", (dir / "broken.json").string(), "--out", "x"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
  }
}

TEST_CASE("eval and derain with an identity checkpoint") {
  const fs::path data = dataset();
  const fs::path dir = scratch_dir("cli_eval");
  const auto cfg = write_config(dir, small_config());
  const auto ckpt = dir / "identity.json";
  REQUIRE(cli({"init-identity", "--config", cfg.string(), "--out", ckpt.string()}).code == 0);
  const auto manifest = data / "data" / "target_test" / "manifest.json";

  const Result r = cli({"eval", "--checkpoint", ckpt.string(), "--manifest", manifest.string(), "--out",
                        (dir / "r1").string(), "--config", cfg.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("mean") != std::string::npos);
  const json report = json::parse(slurp(dir / "r1" / "report.json"));
  const auto m = DatasetManifest::load(manifest);
  REQUIRE(report["rows"].size() == m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const double expect = psnr(read_png(m.records[i].rainy).to_tensor(), read_png(*m.records[i].clean).to_tensor());
    CHECK(report["rows"][i]["psnr"].get<double>() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(report["rows"][i]["image_id"] == m.records[i].id);
  }
  CHECK(report["summary"]["count"] == m.records.size());

  REQUIRE(cli({"eval", "--checkpoint", ckpt.string(), "--manifest", manifest.string(), "--out",
               (dir / "r2").string()})
              .code == 0);
  CHECK(json::parse(slurp(dir / "r2" / "report.json"))["rows"] == report["rows"]);

  json other = small_config();
  other["model"]["crop"] = 16;
  other["data"]["image_size"] = 16;
  const Result mismatch = cli({"eval", "--checkpoint", ckpt.string(), "--manifest", manifest.string(),
                               "--out", (dir / "r3").string(), "--config",
                               write_config(dir, other, "other.json").string()});
  CHECK(mismatch.code == 2);
  CHECK(mismatch.err.find("crop 16") != std::string::npos);
  CHECK(mismatch.err.find("crop 32") != std::string::npos);

  const auto in = m.records[0].rainy;
  const Result d = cli({"derain", "--checkpoint", ckpt.string(), "--in", in.string(), "--out",
                        (dir / "out.png").string()});
  REQUIRE(d.code == 0);
  CHECK(read_png(dir / "out.png") == read_png(in));

  const Image wide = quantize8(procedural_texture(50, 37, 3));
  write_png(dir / "wide.png", wide);
  REQUIRE(cli({"derain", "--checkpoint", ckpt.string(), "--in", (dir / "wide.png").string(), "--out",
               (dir / "wide_out.png").string()})
              .code == 0);
  CHECK(read_png(dir / "wide_out.png") == wide);
  CHECK(cli({"derain", "--checkpoint", (dir / "none.json").string(), "--in", in.string(), "--out", "x.png"}).code == 2);
}

TEST_CASE("train, inspect and divergence of gp modes") {
  const fs::path data = dataset();
  const fs::path dir = scratch_dir("cli_train");
  setenv("GPDERAIN_LOG", "quiet", 1);
  const auto cfg = write_config(dir, small_config());
  auto train = [&](const std::string& name, const std::string& mode) {
    const Result r = cli({"train", "--config", cfg.string(), "--out", (dir / name).string(), "--data",
                          (data / "data").string(), "--gp-mode", mode, "--seed", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return read_runlog(dir / name / "runlog.jsonl");
  };
  const auto off = train("off", "off");
  const auto pp = train("pp", "syn2real++");
  const auto w = train("w", "syn2real");
  REQUIRE(off.size() == 1);
  CHECK(off[0]["eval"].contains("target_test"));
  CHECK(off[0]["eval"].contains("source_test"));
  CHECK(fs::exists(dir / "off" / "resolved_config.json"));
  CHECK(json::parse(slurp(dir / "pp" / "resolved_config.json"))["train"]["gp_mode"] == "syn2real++");
  CHECK_FALSE(fs::exists(dir / "off" / "bank.json"));

  const auto s_off = off[0]["sup_losses"].get<std::vector<double>>();
  const auto s_pp = pp[0]["sup_losses"].get<std::vector<double>>();
  REQUIRE(s_off.size() == 3);
  CHECK(s_off[0] == s_pp[0]);
  CHECK(s_off[1] != s_pp[1]);
  CHECK(pp[0]["unsup_losses"].size() == 3);

  const auto in = DatasetManifest::load(data / "data" / "target_train" / "manifest.json").records[0].rainy;
  const auto src = DatasetManifest::load(data / "data" / "source_train" / "manifest.json");
  SUBCASE("per-feature-map bank") {
    const Result r = cli({"gp-inspect", "--checkpoint", (dir / "pp" / "checkpoint.json").string(), "--bank",
                          (dir / "pp" / "bank.json").string(), "--in", src.records[2].rainy.string(),
                          "--nn", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json j = json::parse(r.out);
    CHECK(j["neighbors"][0]["image_id"] == src.records[2].id);
    CHECK(j["neighbors"][0]["score"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(j["neighbors"].size() == 3);
    CHECK(j["sigma_eigen_min"].get<double>() >= 1.0 - 1e-6);
    CHECK(std::isfinite(j["unsup_loss"].get<double>()));
    CHECK(cli({"gp-inspect", "--checkpoint", (dir / "pp" / "checkpoint.json").string(), "--bank",
               (dir / "pp" / "bank.json").string(), "--in", in.string(), "--mode", "syn2real"})
              .code == 2);
  }
  SUBCASE("whole-latent bank") {
    const Result r = cli({"gp-inspect", "--checkpoint", (dir / "w" / "checkpoint.json").string(), "--bank",
                          (dir / "w" / "bank.json").string(), "--in", in.string(), "--report",
                          (dir / "w" / "inspect.json").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json j = json::parse(slurp(dir / "w" / "inspect.json"));
    CHECK(j["alpha"].size() == 6);  // defaults to the whole bank when smaller than 32
    CHECK(j["alpha_reconstruction_max_abs"].get<double>() <= 1e-8);
    CHECK(j["sigma_eigen_min"].get<double>() >= 1.0 - 1e-6);
  }
}
