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

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace gpderain;
using gpderain::testing::grad_check;
using gpderain::testing::random_tensor;
using gpderain::testing::scratch_dir;

namespace {

ModelConfig small_config(std::size_t crop = 16) {
  ModelConfig c;
  c.base_channels = 8;
  c.crop = crop;
  return c;
}

Tensor param(UDeNet& net, const std::string& name) {
  for (auto& p : net.params())
    if (p.name == name) return p.tensor;
  FAIL("no parameter " << name);
  return {};
}

}  // namespace

TEST_CASE("latent shapes at desk and paper scale") {
  ModelConfig desk;
  CHECK(desk.latent_side() == 8);
  CHECK(desk.latent_rows() == 32);
  CHECK(desk.latent_cols() == 64);

  UDeNet net(desk, 1);
  Rng rng(2);
  const Tensor x = random_tensor({2, 3, 64, 64}, rng, 0, 1);
  NoGradGuard guard;
  const auto enc = net.encode(x);
  CHECK(enc.latent.shape() == Shape{2, 64, 8, 8});
  CHECK(enc.tap.shape() == Shape{2, 32, 8, 8});
  CHECK(net.decode(enc).shape() == Shape{2, 3, 64, 64});

  ModelConfig paper;
  paper.crop = 256;
  CHECK(paper.latent_rows() == 32);
  CHECK(paper.latent_cols() == 1024);
  UDeNet big(paper, 1);
  CHECK(big.encode_tap(random_tensor({1, 3, 256, 256}, rng, 0, 1)).shape() == Shape{1, 32, 32, 32});

  ModelConfig out_tap = desk;
  out_tap.latent_tap = LatentTap::kEncoderOutput;
  CHECK(out_tap.latent_rows() == 64);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.crop = 60;
  CHECK_THROWS_AS(UDeNet(c, 0), std::invalid_argument);
  c = ModelConfig{};
  c.base_channels = 6;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.leaky_slope = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json({{"crop", 64}, {"cropp", 1}}), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json({{"crop", "64"}}), std::invalid_argument);
  CHECK(model_config_from_json(to_json(small_config())) == small_config());
}

TEST_CASE("input and latent shape errors") {
  UDeNet net(small_config(), 0);
  CHECK_THROWS_AS(net.encode(Tensor::zeros({1, 3, 32, 32})), std::invalid_argument);
  CHECK_THROWS_AS(net.encode(Tensor::zeros({1, 1, 16, 16})), std::invalid_argument);
  auto enc = net.encode(Tensor::zeros({1, 3, 16, 16}));
  enc.latent = Tensor::zeros({1, 32, 4, 4});
  CHECK_THROWS_AS(net.decode(enc), std::invalid_argument);
  CHECK_THROWS_AS(net.decode(Tensor::zeros({1, 32, 2, 2})), std::invalid_argument);

  ModelConfig plain = small_config();
  plain.skip_connections = false;
  UDeNet plain_net(plain, 0);
  CHECK(plain_net.decode(Tensor::zeros({1, 32, 2, 2})).shape() == Shape{1, 3, 16, 16});
  CHECK_THROWS_AS(plain_net.decode(Tensor::zeros({1, 32, 4, 4})), std::invalid_argument);
}

TEST_CASE("affine behaviour at zero weights") {
  UDeNet net(small_config(), 3);
  net.zero_all();
  NoGradGuard guard;

  const auto enc = net.encode(Tensor::zeros({1, 3, 16, 16}));
  for (double v : enc.latent.data()) CHECK(v == 0.0);

  auto bias = param(net, "dec.out.b").mutable_data();
  bias[0] = 0.1;
  bias[1] = -0.2;
  bias[2] = 0.3;
  Rng rng(4);
  const Tensor x = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  const Tensor r = net.decode(net.encode(x));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 256; ++i) CHECK(r.at(c * 256 + i) == bias[c]);
}

TEST_CASE("derain is input minus residue") {
  UDeNet net(small_config(), 5);
  Rng rng(6);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  NoGradGuard guard;
  const Tensor y = net.derain(x);
  const Tensor r = net.decode(net.encode(x));
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.at(i) - y.at(i) == x.at(i) - (x.at(i) - r.at(i)));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i) - r.at(i));

  net.zero_all();
  const Tensor same = net.derain(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.at(i) == x.at(i));
}

TEST_CASE("initialization") {
  UDeNet a(small_config(), 9), b(small_config(), 9), c(small_config(), 10);
  bool differs = false;
  for (std::size_t k = 0; k < a.params().size(); ++k) {
    const auto pa = a.params()[k].tensor.data(), pb = b.params()[k].tensor.data();
    const auto pc = c.params()[k].tensor.data();
    CHECK(std::equal(pa.begin(), pa.end(), pb.begin()));
    differs = differs || !std::equal(pa.begin(), pa.end(), pc.begin());
  }
  CHECK(differs);

  // U(-s, s) has E|w| = s/2.
  UDeNet desk(ModelConfig{}, 11);
  std::size_t layers = 0;
  for (const auto& p : desk.params()) {
    if (p.name.size() < 2 || p.name.substr(p.name.size() - 2) != ".w") continue;
    if (p.name.find(".exit.") != std::string::npos || p.name == "dec.out.w") continue;
    if (p.tensor.numel() < 1000) continue;
    const Shape& s = p.tensor.shape();
    const double scale = init_bound(s[1] * s[2] * s[3], 0.2) / 2.0;
    double mean_abs = 0.0;
    for (double v : p.tensor.data()) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(p.tensor.numel());
    CHECK_MESSAGE(std::abs(mean_abs - scale) <= 0.5 * scale, p.name);
    ++layers;
  }
  CHECK(layers > 0);
  for (const auto& p : desk.params())
    if (p.name.substr(p.name.size() - 2) == ".b")
      for (double v : p.tensor.data()) CHECK(v == 0.0);
}

TEST_CASE("res2block residual identity") {
  std::vector<NamedParam> registry;
  Res2Block block("blk", 8, 8, 4, registry);
  CHECK_FALSE(block.has_projection());
  for (auto& p : registry)
    for (double& v : p.tensor.mutable_data()) v = 0.0;
  Rng rng(12);
  const Tensor x = random_tensor({1, 8, 6, 6}, rng);
  const Tensor y = block.forward(x, 0.2);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  std::vector<NamedParam> other;
  CHECK_THROWS_AS(Res2Block("bad", 8, 10, 4, other), std::invalid_argument);
  Res2Block widen("wide", 4, 8, 4, other);
  CHECK(widen.has_projection());
  CHECK(widen.forward(random_tensor({1, 4, 5, 5}, rng), 0.2).shape() == Shape{1, 8, 5, 5});
}

TEST_CASE("latent matrix round trip") {
  Rng rng(13);
  const Tensor maps = random_tensor({1, 32, 8, 8}, rng);
  const LatentMatrix z = LatentMatrix::from_tensor(maps);
  CHECK(z.rows == 32);
  CHECK(z.cols == 64);
  CHECK(z.row(3)[5] == maps.at(3 * 64 + 5));
  const Tensor back = z.to_feature_maps(8);
  CHECK(back.shape() == Shape{1, 32, 8, 8});
  for (std::size_t i = 0; i < maps.numel(); ++i) CHECK(back.at(i) == maps.at(i));
  CHECK(LatentMatrix::from_tensor(maps.reshape({32, 64})) == z);
  CHECK_THROWS(LatentMatrix::from_tensor(Tensor::zeros({2, 32, 8, 8})));
}

TEST_CASE("full model gradient check at crop 16") {
  UDeNet net(small_config(), 17);
  Rng rng(18);
  // Spread parameters so interior activations are not near zero.
  for (auto& p : net.params())
    for (double& v : p.tensor.mutable_data()) v += rng.uniform(-0.05, 0.05);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const Tensor probe = random_tensor({2, 3, 16, 16}, rng);
  std::vector<Tensor> params;
  for (auto& p : net.params()) params.push_back(p.tensor);
  const auto result = grad_check([&] { return sum(mul(net.derain(x), probe)); }, params, 100, rng);
  CHECK(result.checked == 100);
  CHECK_MESSAGE(result.max_rel <= 1e-3, result.worst);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = scratch_dir("model_ckpt");
  UDeNet net(small_config(), 21);
  net.save(dir / "ckpt.json");
  const UDeNet loaded = UDeNet::load(dir / "ckpt.json");
  CHECK(loaded.config() == net.config());
  REQUIRE(loaded.params().size() == net.params().size());
  for (std::size_t k = 0; k < net.params().size(); ++k) {
    const auto a = net.params()[k].tensor.data(), b = loaded.params()[k].tensor.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  std::ofstream(dir / "bad.json") << "{\"format\": \"something-else\"}";
  CHECK_THROWS(UDeNet::load(dir / "bad.json"));
  CHECK_THROWS(UDeNet::load(dir / "missing.json"));

  auto j = nlohmann::json::parse(std::ifstream(dir / "ckpt.json"));
  j["params"][0]["shape"] = {1, 1, 1, 1};
  std::ofstream(dir / "shape.json") << j.dump();
  CHECK_THROWS_WITH(UDeNet::load(dir / "shape.json"), doctest::Contains("[1,1,1,1]"));
}

TEST_CASE("parameter partition") {
  UDeNet net(small_config(), 0);
  CHECK(net.encoder_params().size() + net.decoder_params().size() == net.params().size());
  CHECK(UDeNet::is_encoder_param("enc.b1.entry.w"));
  CHECK_FALSE(UDeNet::is_encoder_param("dec.out.w"));
}
