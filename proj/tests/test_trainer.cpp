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

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace gpderain;
using gpderain::testing::max_abs_diff;
using gpderain::testing::scratch_dir;

namespace {

ModelConfig tiny_model(std::size_t crop = 16) {
  ModelConfig c;
  c.base_channels = 8;
  c.crop = crop;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch = 2;
  c.epochs = 1;
  c.nn = 2;
  c.lambda_unsup = 0.1;
  c.bank_max_entries = 8;
  c.length_scale_rows = 64;
  c.gp_mode = GpMode::kOff;
  c.write_samples = false;
  return c;
}

std::vector<Sample> make_samples(std::size_t n, std::size_t size, std::uint64_t seed, bool labeled) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Image clean = procedural_texture(size, size, seed + i);
    RainParams p;
    p.seed = seed + 100 + i;
    Sample s{"img" + std::to_string(seed + i), render_rain(clean, p).rainy, std::nullopt};
    if (labeled) s.clean = clean;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  for (const Tensor& t : ts) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

std::size_t count_changed(const std::vector<Tensor>& ts, const std::vector<std::vector<double>>& before) {
  std::size_t changed = 0;
  for (std::size_t k = 0; k < ts.size(); ++k)
    if (!std::equal(before[k].begin(), before[k].end(), ts[k].data().begin())) ++changed;
  return changed;
}

Tensor batch_of(const std::vector<Sample>& set, bool clean, std::size_t crop) {
  std::vector<Image> crops;
  for (const Sample& s : set) crops.push_back((clean ? *s.clean : s.rainy).crop(0, 0, crop, crop));
  std::vector<const Image*> ptrs;
  for (const Image& im : crops) ptrs.push_back(&im);
  return stack_images(ptrs);
}

}  // namespace

TEST_CASE("adam matches a hand trace") {
  Tensor p = Tensor::from({1}, {1.0}, true);
  Tensor untouched = Tensor::from({1}, {5.0}, true);
  Adam adam(0.1);
  const double grads[] = {2.0, -1.0, 0.5};
  double m = 0, v = 0, expect = 1.0;
  for (int t = 1; t <= 3; ++t) {
    p.mutable_grad()[0] = grads[t - 1];
    std::vector<Tensor> params = {p, untouched};
    adam.step(params);
    const double g = grads[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
    expect -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.at(0) == doctest::Approx(expect).epsilon(1e-14));
  }
  // First step magnitude is lr regardless of gradient scale.
  CHECK(1.0 - 0.1 == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)));
  CHECK(untouched.at(0) == 5.0);
}

TEST_CASE("learning rate schedule") {
  CHECK(scheduled_lr(2e-4, 0, 30, 0.5) == 2e-4);
  CHECK(scheduled_lr(2e-4, 29, 30, 0.5) == 2e-4);
  CHECK(scheduled_lr(2e-4, 30, 30, 0.5) == doctest::Approx(1e-4));
  CHECK(scheduled_lr(2e-4, 65, 30, 0.5) == doctest::Approx(5e-5));
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.kernel = KernelKind::kRationalQuadratic;
  c.gp_mode = GpMode::kWholeLatent;
  c.seed = 9;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(back.kernel == c.kernel);
  CHECK(back.gp_mode == c.gp_mode);
  CHECK(back.seed == 9);
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_WITH(train_config_from_json({{"learning_rate", 1.0}}), doctest::Contains("learning_rate"));
  CHECK_THROWS(train_config_from_json({{"batch", "four"}}));
  CHECK_THROWS(train_config_from_json({{"batch", 0}}));
  c = TrainConfig{};
  c.sigma_eps2 = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("stacking and trainer construction errors") {
  CHECK_THROWS(stack_images({}));
  const Image a(8, 8), b(8, 9);
  CHECK_THROWS(stack_images({&a, &b}));
  CHECK(stack_images({&a, &a}).shape() == Shape{2, 3, 8, 8});

  auto unl = make_samples(2, 16, 50, false);
  CHECK_THROWS_AS(Trainer(tiny_train(), tiny_model(), unl, {}), std::invalid_argument);
  auto small = make_samples(2, 8, 1, true);
  CHECK_THROWS_AS(Trainer(tiny_train(), tiny_model(), small, {}), std::invalid_argument);
  TrainConfig gp = tiny_train();
  gp.gp_mode = GpMode::kPerFeatureMap;
  CHECK_THROWS_AS(Trainer(gp, tiny_model(), make_samples(2, 16, 1, true), {}), std::invalid_argument);
}

TEST_CASE("overfits a single batch") {
  TrainConfig c = tiny_train();
  c.gp_mode = GpMode::kOff;
  Trainer trainer(c, tiny_model(), make_samples(2, 16, 3, true), {});
  const auto set = make_samples(2, 16, 3, true);
  const Tensor x = batch_of(set, false, 16), y = batch_of(set, true, 16);
  const double first = trainer.labeled_step(x, y);
  double last = first;
  for (int i = 1; i < 200; ++i) last = trainer.labeled_step(x, y);
  CHECK(last < 0.25 * first);
}

TEST_CASE("labeled step updates exactly the parameters with gradient") {
  TrainConfig c = tiny_train();
  Trainer trainer(c, tiny_model(), make_samples(2, 16, 3, true), {});
  std::vector<Tensor> all;
  for (auto& p : trainer.net().params()) all.push_back(p.tensor);
  const auto before = snapshot(all);
  const auto set = make_samples(2, 16, 3, true);
  trainer.labeled_step(batch_of(set, false, 16), batch_of(set, true, 16));
  CHECK(count_changed(all, before) == all.size());

  SUBCASE("zero gradient leaves parameters in place") {
    Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
    p.mutable_grad()[0] = 0.0;
    p.mutable_grad()[1] = 0.0;
    Adam adam(0.1);
    std::vector<Tensor> ps = {p};
    adam.step(ps);
    CHECK(p.at(0) == 1.0);
    CHECK(p.at(1) == 2.0);
  }
}

TEST_CASE("non-finite loss aborts with the batch id") {
  Trainer trainer(tiny_train(), tiny_model(), make_samples(2, 16, 3, true), {});
  trainer.net().params().back().tensor.mutable_data()[0] = std::nan("");
  const auto set = make_samples(2, 16, 3, true);
  CHECK_THROWS_WITH_AS(trainer.labeled_step(batch_of(set, false, 16), batch_of(set, true, 16), "epoch0/batch3"),
                       doctest::Contains("epoch0/batch3"), TrainingError);
}

TEST_CASE("unlabeled step") {
  const auto labeled = make_samples(4, 16, 10, true);
  const auto unlabeled = make_samples(4, 16, 20, false);
  const Tensor xu = batch_of(unlabeled, false, 16);

  SUBCASE("no-op when the gp is off") {
    Trainer trainer(tiny_train(), tiny_model(), labeled, unlabeled);
    std::vector<Tensor> all;
    for (auto& p : trainer.net().params()) all.push_back(p.tensor);
    const auto before = snapshot(all);
    CHECK(trainer.unlabeled_step(xu) == 0.0);
    CHECK(count_changed(all, before) == 0);
  }

  for (GpMode mode : {GpMode::kPerFeatureMap, GpMode::kWholeLatent}) {
    for (KernelKind kernel : {KernelKind::kLinear, KernelKind::kSquaredExponential}) {
      CAPTURE(to_string(mode));
      CAPTURE(to_string(kernel));
      TrainConfig c = tiny_train();
      c.gp_mode = mode;
      c.kernel = kernel;
      Trainer trainer(c, tiny_model(), labeled, unlabeled);
      CHECK_THROWS_AS(trainer.unlabeled_step(xu), TrainingError);
      trainer.rebuild_bank(0);
      CHECK(trainer.bank().size() == 4);

      double manual = 0.0;
      {
        NoGradGuard guard;
        const Tensor taps = trainer.net().encode_tap(xu);
        const std::size_t M = taps.dim(1), D = taps.dim(2) * taps.dim(3);
        for (std::size_t n = 0; n < 4; ++n) {
          const Tensor z = select_batch(taps, n).reshape({M, D});
          const auto nbs = nearest(LatentMatrix::from_tensor(z), trainer.bank(), c.nn);
          const auto post = posterior(z, trainer.bank(), nbs, trainer.kernel(), c.sigma_eps2, mode);
          manual += unsup_loss(z, post).item() / 4.0;
        }
      }
      const auto enc = trainer.net().encoder_params(), dec = trainer.net().decoder_params();
      const auto enc0 = snapshot(enc), dec0 = snapshot(dec);
      const double loss = trainer.unlabeled_step(xu);
      CHECK(loss == doctest::Approx(manual).epsilon(1e-12));
      CHECK(count_changed(dec, dec0) == 0);
      CHECK(count_changed(enc, enc0) > 0);
    }
  }

  SUBCASE("bank smaller than the neighbor count") {
    TrainConfig c = tiny_train();
    c.gp_mode = GpMode::kPerFeatureMap;
    c.nn = 5;
    Trainer trainer(c, tiny_model(), labeled, unlabeled);
    trainer.rebuild_bank(0);
    CHECK_THROWS_WITH_AS(trainer.unlabeled_step(xu), doctest::Contains("4 entries"), TrainingError);
  }
}

TEST_CASE("self neighbor gives an interpolating posterior") {
  const auto labeled = make_samples(3, 32, 30, true);
  TrainConfig c = tiny_train();
  c.gp_mode = GpMode::kWholeLatent;
  c.nn = 1;
  c.sigma_eps2 = 1e-6;
  Trainer trainer(c, tiny_model(32), labeled, make_samples(1, 32, 40, false));
  trainer.rebuild_bank(0);
  NoGradGuard guard;
  const Image center = labeled[1].rainy;
  const Tensor taps = trainer.net().encode_tap(center.to_tensor());
  const LatentMatrix z = LatentMatrix::from_tensor(taps);
  const auto nbs = nearest(z, trainer.bank(), 1);
  REQUIRE(nbs.size() == 1);
  CHECK(nbs[0].image_id == labeled[1].id);
  CHECK(nbs[0].score == doctest::Approx(1.0).epsilon(1e-12));
  const auto post = posterior(z, trainer.bank(), nbs, trainer.kernel(), c.sigma_eps2, c.gp_mode);
  double scale = 0.0, err = 0.0;
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    scale = std::max(scale, std::abs(z.values[i]));
    err = std::max(err, std::abs(post.mu(0, i) - z.values[i]));
  }
  CHECK(err <= 1e-5 * scale);
  CHECK(post.alpha(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("training is deterministic") {
  TrainConfig c = tiny_train();
  c.gp_mode = GpMode::kWholeLatent;
  c.kernel = KernelKind::kRationalQuadratic;
  c.epochs = 2;
  const auto labeled = make_samples(4, 20, 60, true);
  const auto unlabeled = make_samples(4, 20, 70, false);
  const std::vector<EvalSet> evals = {{"target", make_samples(2, 24, 80, true)}};
  auto run = [&] {
    Trainer t(c, tiny_model(), labeled, unlabeled);
    RunLog log = train_in_memory(t, evals);
    std::vector<Tensor> ps;
    for (auto& p : t.net().params()) ps.push_back(p.tensor);
    return std::make_pair(log, snapshot(ps));
  };
  const auto [log_a, params_a] = run();
  const auto [log_b, params_b] = run();
  REQUIRE(log_a.epochs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    const EpochRecord &a = log_a.epochs[e], &b = log_b.epochs[e];
    CAPTURE(e);
    CHECK(a.sup_losses == b.sup_losses);
    if (a.sup_losses != b.sup_losses) MESSAGE(a.to_json().dump() << "\n" << b.to_json().dump());
    CHECK(a.unsup_losses == b.unsup_losses);
    CHECK(a.eval == b.eval);
    CHECK(a.length_scale == b.length_scale);
    CHECK(a.unsup_losses.size() == 2);
  }
  CHECK(params_a == params_b);

  c.seed = 1;
  Trainer other(c, tiny_model(), labeled, unlabeled);
  CHECK(train_in_memory(other, evals).epochs[0].sup_losses != log_a.epochs[0].sup_losses);
}

TEST_CASE("derain_image and evaluation") {
  UDeNet net(tiny_model(), 5);
  const auto samples = make_samples(3, 24, 90, true);

  SUBCASE("identity model reports the input metrics") {
    net.zero_all();
    const MetricSummary m = evaluate(net, samples);
    REQUIRE(m.rows.size() == 3);
    double mean = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double expect = psnr(samples[i].rainy.to_tensor(), samples[i].clean->to_tensor());
      CHECK(m.rows[i].psnr == doctest::Approx(expect).epsilon(1e-12));
      CHECK(m.rows[i].image_id == samples[i].id);
      mean += expect / 3.0;
    }
    CHECK(m.mean_psnr == doctest::Approx(mean).epsilon(1e-12));

    std::vector<Sample> oracle = samples;
    for (Sample& s : oracle) s.rainy = *s.clean;
    const MetricSummary perfect = evaluate(net, oracle);
    CHECK(perfect.mean_psnr == kPsnrCap);
    CHECK(perfect.mean_ssim == doctest::Approx(1.0));
  }
  SUBCASE("single pass at crop size") {
    const Image img = samples[0].rainy.crop(2, 3, 16, 16);
    const Image out = derain_image(net, img);
    const Tensor direct = clamp(net.derain(img.to_tensor()), 0.0, 1.0);
    CHECK(max_abs_diff(out.to_tensor().data(), direct.data()) <= 1e-12);
  }
  SUBCASE("tiling keeps size and is exact for a constant residue") {
    net.zero_all();
    // Bias-only output layer: every tile predicts the same residue.
    for (auto& p : net.params())
      if (p.name == "dec.out.b") std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.05);
    const Image big = samples[0].rainy;
    const Image out = derain_image(net, big);
    CHECK(out.width == 24);
    CHECK(out.height == 24);
    for (std::size_t i = 0; i < big.data.size(); ++i)
      CHECK(out.data[i] == doctest::Approx(std::clamp(big.data[i] - 0.05, 0.0, 1.0)).epsilon(1e-12));
    const Image small = big.crop(0, 0, 10, 13);
    const Image out_small = derain_image(net, small);
    CHECK(out_small.width == 10);
    CHECK(out_small.height == 13);
  }
  SUBCASE("unlabeled samples are skipped") {
    auto mixed = samples;
    mixed[1].clean.reset();
    const MetricSummary m = evaluate(net, mixed);
    CHECK(m.rows.size() == 2);
    CHECK(m.skipped == std::vector<std::string>{samples[1].id});
  }
  SUBCASE("checkpoint round trip gives identical metrics") {
    const auto dir = scratch_dir("trainer_ckpt");
    net.save(dir / "c.json");
    const UDeNet back = UDeNet::load(dir / "c.json");
    const MetricSummary a = evaluate(net, samples), b = evaluate(back, samples);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.rows[i].psnr == b.rows[i].psnr);
      CHECK(a.rows[i].ssim == b.rows[i].ssim);
    }
    CHECK(a.to_json() == b.to_json());
  }
}

TEST_CASE("training writes run artifacts") {
  const auto dir = scratch_dir("trainer_run");
  TrainConfig c = tiny_train();
  c.gp_mode = GpMode::kPerFeatureMap;
  c.epochs = 2;
  c.write_samples = true;
  Trainer t(c, tiny_model(), make_samples(4, 16, 1, true), make_samples(2, 16, 2, false));
  std::size_t seen = 0;
  train_in_memory(t, {{"source", make_samples(2, 16, 3, true)}}, dir,
                  [&](const EpochRecord& r) { CHECK(r.epoch == seen++); });
  CHECK(seen == 2);
  std::ifstream log(dir / "runlog.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("eval"));
    ++lines;
  }
  CHECK(lines == 2);
  CHECK(std::filesystem::exists(dir / "checkpoint.json"));
  CHECK(std::filesystem::exists(dir / "samples" / "epoch1_source_derained.png"));
  const FeatureBank bank = FeatureBank::load(dir / "bank.json");
  CHECK(bank.size() == 4);
  CHECK(bank.built_at_epoch() == 2);
}
