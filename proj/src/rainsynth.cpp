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

#include "gpderain/rainsynth.hpp"

#include "gpderain/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

namespace gpderain {

namespace fs = std::filesystem;

void RainParams::validate() const {
  if (!(density >= 0.0)) throw std::invalid_argument("rain: density must be >= 0");
  if (!(intensity > 0.0 && intensity <= 1.0)) {
    throw std::invalid_argument("rain: intensity mean must lie in (0,1]");
  }
  if (orientation_spread_deg < 0.0 || length_spread_px < 0.0 || intensity_spread < 0.0) {
    throw std::invalid_argument("rain: spreads must be >= 0");
  }
  if (!(length_px > 0.0)) throw std::invalid_argument("rain: length_px must be > 0");
  if (length_spread_px >= length_px) {
    throw std::invalid_argument("rain: length_spread_px must be smaller than length_px");
  }
  if (!(width_px >= 1.0 && width_px <= 3.0)) throw std::invalid_argument("rain: width_px must lie in [1,3]");
  if (blur_sigma < 0.0) throw std::invalid_argument("rain: blur_sigma must be >= 0");
}

nlohmann::json to_json(const RainParams& p) {
  return {{"orientation_deg", p.orientation_deg},
          {"orientation_spread_deg", p.orientation_spread_deg},
          {"density", p.density},
          {"length_px", p.length_px},
          {"length_spread_px", p.length_spread_px},
          {"width_px", p.width_px},
          {"intensity", p.intensity},
          {"intensity_spread", p.intensity_spread},
          {"blur_sigma", p.blur_sigma},
          {"seed", p.seed}};
}

RainParams rain_params_from_json(const nlohmann::json& j, const RainParams& defaults) {
  if (!j.is_object()) throw std::invalid_argument("rain params must be a JSON object");
  RainParams p = defaults;
  for (const auto& [key, value] : j.items()) {
    if (key == "orientation_deg") p.orientation_deg = value.get<double>();
    else if (key == "orientation_spread_deg") p.orientation_spread_deg = value.get<double>();
    else if (key == "density") p.density = value.get<double>();
    else if (key == "length_px") p.length_px = value.get<double>();
    else if (key == "length_spread_px") p.length_spread_px = value.get<double>();
    else if (key == "width_px") p.width_px = value.get<double>();
    else if (key == "intensity") p.intensity = value.get<double>();
    else if (key == "intensity_spread") p.intensity_spread = value.get<double>();
    else if (key == "blur_sigma") p.blur_sigma = value.get<double>();
    else if (key == "seed") p.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("unknown rain parameter '" + key + "'");
  }
  p.validate();
  return p;
}

double expected_residue_mean(const RainParams& p) {
  return p.density / 1000.0 * p.length_px * p.width_px * p.intensity;
}

RainSample render_rain(const Image& clean, const RainParams& params) {
  params.validate();
  const std::size_t W = clean.width, H = clean.height;
  RainSample out{clean, Image(W, H, 0.0)};
  if (params.density == 0.0 || W == 0 || H == 0) return out;

  // Cross-profile exp(-d^2 / 2s^2) with s chosen so its integral equals width_px.
  const double s = params.width_px / std::sqrt(2.0 * std::numbers::pi);
  const double blur = params.blur_sigma;
  const double max_len = params.length_px + params.length_spread_px;
  const double margin = 0.5 * max_len + 4.0 * std::max(s, blur) + 2.0;
  const double ext_w = static_cast<double>(W) + 2.0 * margin;
  const double ext_h = static_cast<double>(H) + 2.0 * margin;

  Rng rng(params.seed);
  const std::size_t count = rng.poisson(params.density / 1000.0 * ext_w * ext_h);
  std::vector<double> gray(W * H, 0.0);
  for (std::size_t k = 0; k < count; ++k) {
    const double cx = rng.uniform(-margin, static_cast<double>(W) + margin);
    const double cy = rng.uniform(-margin, static_cast<double>(H) + margin);
    const double theta_deg = params.orientation_deg +
                             rng.uniform(-params.orientation_spread_deg, params.orientation_spread_deg);
    const double len = params.length_px + rng.uniform(-params.length_spread_px, params.length_spread_px);
    const double amp = std::clamp(
        params.intensity + rng.uniform(-params.intensity_spread, params.intensity_spread), 0.0, 1.0);
    if (amp <= 0.0) continue;

    const double theta = theta_deg * std::numbers::pi / 180.0;
    // Image rows grow downward, so the direction's y component is negated.
    const double ux = std::cos(theta), uy = -std::sin(theta);
    const double nx = -uy, ny = ux;
    const double half = 0.5 * len;
    const double reach_t = half + (blur > 0.0 ? 4.0 * blur : 0.5) + 1.0;
    const double reach_d = 4.0 * s + 1.0;
    const double ex = std::abs(ux) * reach_t + std::abs(nx) * reach_d;
    const double ey = std::abs(uy) * reach_t + std::abs(ny) * reach_d;
    const auto x0 = static_cast<long>(std::floor(cx - ex)), x1 = static_cast<long>(std::ceil(cx + ex));
    const auto y0 = static_cast<long>(std::floor(cy - ey)), y1 = static_cast<long>(std::ceil(cy + ey));
    for (long y = std::max(0L, y0); y <= std::min(static_cast<long>(H) - 1, y1); ++y) {
      for (long x = std::max(0L, x0); x <= std::min(static_cast<long>(W) - 1, x1); ++x) {
        const double px = static_cast<double>(x) + 0.5 - cx;
        const double py = static_cast<double>(y) + 0.5 - cy;
        const double t = px * ux + py * uy;
        const double d = px * nx + py * ny;
        if (std::abs(t) > reach_t || std::abs(d) > reach_d) continue;
        double along;
        if (blur > 0.0) {
          const double r = 1.0 / (std::sqrt(2.0) * blur);
          along = 0.5 * (std::erf((t + half) * r) - std::erf((t - half) * r));
        } else {
          along = std::clamp(half + 0.5 - std::abs(t), 0.0, 1.0);
        }
        gray[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] +=
            amp * along * std::exp(-d * d / (2.0 * s * s));
      }
    }
  }
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    for (std::size_t i = 0; i < W * H; ++i) {
      const std::size_t idx = c * W * H + i;
      out.residue.data[idx] = gray[i];
      out.rainy.data[idx] = std::clamp(clean.data[idx] + gray[i], 0.0, 1.0);
    }
  }
  return out;
}

Image procedural_texture(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  Image img(width, height);
  const double w = static_cast<double>(width), h = static_cast<double>(height);

  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.7);
    c1[c] = rng.uniform(0.05, 0.7);
  }
  const double gdir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(gdir), gy = std::sin(gdir);
  const double fx = rng.uniform(0.05, 0.35), fy = rng.uniform(0.05, 0.35);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tex_amp = rng.uniform(0.02, 0.08);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double u = ((static_cast<double>(x) / w - 0.5) * gx + (static_cast<double>(y) / h - 0.5) * gy) + 0.5;
      const double tex = tex_amp * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = (1.0 - u) * c0[c] + u * c1[c] + tex;
    }
  }

  const std::size_t shapes = 3 + rng.index(5);
  for (std::size_t k = 0; k < shapes; ++k) {
    double col[3];
    for (double& v : col) v = rng.uniform(0.0, 0.75);
    const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
    const double rx = rng.uniform(0.08, 0.3) * w, ry = rng.uniform(0.08, 0.3) * h;
    const bool ellipse = rng.uniform() < 0.5;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const bool inside = ellipse ? (dx * dx + dy * dy <= 1.0) : (std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0);
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = 0.5 * img.at(c, y, x) + 0.5 * col[c];
      }
    }
  }
  for (double& v : img.data) v = std::clamp(v + 0.01 * rng.normal(), 0.0, 1.0);
  return img;
}

std::vector<Image> load_image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("image directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no PNG images in " + dir.string());
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(read_png(f));
  return out;
}

// ---------------------------------------------------------------------------

void DatasetManifest::save(const fs::path& path) const {
  const fs::path base = path.parent_path();
  nlohmann::json records_json = nlohmann::json::array();
  for (const ManifestRecord& r : records) {
    nlohmann::json rec;
    if (r.clean) rec["clean"] = fs::relative(*r.clean, base).generic_string();
    rec["rainy"] = fs::relative(r.rainy, base).generic_string();
    rec["seed"] = r.seed;
    records_json.push_back(std::move(rec));
  }
  nlohmann::json j{{"version", kVersion}, {"domain", domain},      {"split", split},
                   {"labeled", labeled},  {"params", to_json(params)}, {"records", records_json}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("version", 0) != kVersion) {
    throw std::runtime_error("manifest " + path.string() + ": unsupported version");
  }
  DatasetManifest m;
  m.domain = j.at("domain").get<std::string>();
  m.split = j.value("split", std::string());
  m.labeled = j.value("labeled", true);
  m.params = rain_params_from_json(j.at("params"));
  const fs::path base = fs::absolute(path).parent_path();
  for (const auto& rec : j.at("records")) {
    ManifestRecord r;
    r.rainy = base / rec.at("rainy").get<std::string>();
    if (rec.contains("clean")) r.clean = base / rec.at("clean").get<std::string>();
    r.seed = rec.value("seed", std::uint64_t{0});
    if (m.labeled && !r.clean) {
      throw std::runtime_error("manifest " + path.string() + ": labeled record " + r.rainy.string() +
                               " has no clean image");
    }
    if (!fs::exists(r.rainy)) throw std::runtime_error("manifest " + path.string() + ": missing " + r.rainy.string());
    if (r.clean && !fs::exists(*r.clean)) {
      throw std::runtime_error("manifest " + path.string() + ": missing " + r.clean->string());
    }
    r.id = (m.split.empty() ? m.domain : m.split) + "/" + r.rainy.stem().string();
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest make_domain(const std::vector<Image>& base_images, const DomainSpec& spec,
                            const fs::path& out_dir) {
  if (base_images.empty()) throw std::invalid_argument("make_domain: no base images");
  spec.params.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw std::runtime_error("make_domain: cannot create output directory " + out_dir.string());
  }
  const fs::path abs_dir = fs::absolute(out_dir);
  {
    const fs::path probe = abs_dir / ".write_probe";
    std::ofstream test(probe);
    if (!test) throw std::runtime_error("make_domain: output directory " + out_dir.string() + " is not writable");
    test.close();
    fs::remove(probe, ec);
  }

  DatasetManifest m;
  m.domain = spec.domain;
  m.split = spec.split;
  m.labeled = spec.labeled;
  m.params = spec.params;
  const std::size_t size = spec.image_size;
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::uint64_t seed = derive_seed(spec.params.seed, i);
    const Image& base = base_images[i % base_images.size()];
    if (base.width < size || base.height < size) {
      throw std::invalid_argument("make_domain: base image smaller than image_size " + std::to_string(size));
    }
    Rng rng(derive_seed(seed, 0xC409));
    const std::size_t x0 = rng.index(base.width - size + 1);
    const std::size_t y0 = rng.index(base.height - size + 1);
    const Image clean = base.crop(x0, y0, size, size);
    RainParams params = spec.params;
    params.seed = seed;
    const RainSample sample = render_rain(clean, params);

    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    ManifestRecord rec;
    rec.seed = seed;
    rec.rainy = abs_dir / (std::string("rainy_") + stem + ".png");
    write_png(rec.rainy, sample.rainy);
    if (spec.labeled) {
      rec.clean = abs_dir / (std::string("clean_") + stem + ".png");
      write_png(*rec.clean, clean);
    }
    rec.id = (spec.split.empty() ? spec.domain : spec.split) + "/rainy_" + stem;
    m.records.push_back(std::move(rec));
  }
  m.save(abs_dir / "manifest.json");
  return m;
}

}  // namespace gpderain
