// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "sicsf/errors.hpp"
#include "sicsf/training.hpp"
#include "support/test_util.hpp"

using namespace sicsf;
using sicsf::testing::random_tensor;
using sicsf::testing::to_vector;

namespace {

Vocab small_vocab() {
  std::vector<std::string> corpus = {
      "{'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time', 'filler': 'seven am'}]}",
      "{'scenario': 'music', 'action': 'play', 'entities': []}"};
  return Vocab::train(corpus, 50);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.conv_kernel = 3;
  cfg.feature_dim = 4;
  cfg.rel_pos_clip = 4;
  cfg.dropout = 0.1;
  return cfg;
}

std::vector<Example> tiny_data(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  const char* sems[] = {
      "{'scenario': 'alarm', 'action': 'set', 'entities': []}",
      "{'scenario': 'music', 'action': 'play', 'entities': []}"};
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureMatrix f{8, 4, 8, std::vector<float>(32)};
    const float sign = (i % 2 == 0) ? 1.0f : -1.0f;
    for (auto& v : f.values) v = sign + 0.1f * dist(rng);
    out.push_back({"ex" + std::to_string(i), f, "", sems[i % 2]});
  }
  return out;
}

}  // namespace

TEST_CASE("teacher-forced NLL matches a direct log-softmax oracle") {
  std::mt19937_64 rng(1);
  const auto logits = random_tensor<double>({4, 6}, rng);
  const std::vector<int> targets = {kBosId, 4, 5, kPadId, kEosId};
  double oracle = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const int t = targets[i + 1];
    if (t == kPadId) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < 6; ++c) z += std::exp(logits.at(i, c));
    oracle += -(logits.at(i, std::size_t(t)) - std::log(z));
    ++count;
  }
  const auto loss = nll_teacher_forcing_loss(logits, targets);
  CHECK(loss.tokens == 3);
  CHECK(loss.value.item() == doctest::Approx(oracle / 3.0).epsilon(1e-12));
  CHECK(nll_sum(logits, targets).item() == doctest::Approx(oracle).epsilon(1e-12));
  const std::vector<int> wrong = {kBosId, 4};
  CHECK_THROWS_AS(nll_sum(logits, wrong), ShapeError);
}

TEST_CASE("uniform logits give loss log V") {
  const auto logits = Tensor<double>::zeros({3, 10});
  const std::vector<int> targets = {kBosId, 5, 6, kEosId};
  CHECK(nll_teacher_forcing_loss(logits, targets).value.item() == doctest::Approx(std::log(10.0)));
}

TEST_CASE("Adam matches a hand-computed two-step trajectory") {
  ParameterStore<double> store(1);
  auto p = store.constant("w", {2}, 0.0);
  auto frozen = store.constant("f", {1}, 3.0);
  frozen.set_requires_grad(false);
  OptimState state;
  const double lr = 0.1, b1 = 0.9, b2 = 0.98, eps = 1e-8;
  const std::vector<std::vector<double>> grads = {{1.0, -2.0}, {0.5, 0.0}};
  std::vector<double> m(2, 0.0), v(2, 0.0), w(2, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.zero_grad();
    auto g = p.mutable_grad();
    for (std::size_t k = 0; k < 2; ++k) g[k] = grads[t - 1][k];
    adam_step(store, state, [&](const std::string&) { return lr; });
    for (std::size_t k = 0; k < 2; ++k) {
      const double gk = grads[t - 1][k];
      m[k] = b1 * m[k] + (1 - b1) * gk;
      v[k] = b2 * v[k] + (1 - b2) * gk * gk;
      w[k] -= lr * (m[k] / (1 - std::pow(b1, t))) / (std::sqrt(v[k] / (1 - std::pow(b2, t))) + eps);
    }
    CHECK(p.data()[0] == doctest::Approx(w[0]).epsilon(1e-14));
    CHECK(p.data()[1] == doctest::Approx(w[1]).epsilon(1e-14));
  }
  CHECK(state.step == 2);
  CHECK(frozen.data()[0] == 3.0);
  // First step moves every coordinate by about lr against its gradient sign.
  CHECK(-0.1 == doctest::Approx(-lr * (1.0 / (1.0 + eps))));
}

TEST_CASE("Adam with zero gradients leaves parameters unchanged") {
  ParameterStore<double> store(1);
  auto p = store.constant("w", {3}, 1.5);
  p.zero_grad();
  (void)p.mutable_grad();
  OptimState state;
  adam_step(store, state, [](const std::string&) { return 1.0; });
  CHECK(to_vector(p) == std::vector<double>{1.5, 1.5, 1.5});
  CHECK(state.step == 1);
}

TEST_CASE("Adam refuses non-finite gradients and names the parameter") {
  ParameterStore<double> store(1);
  auto p = store.constant("decoder.output.bias", {2}, 0.0);
  p.zero_grad();
  p.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  OptimState state;
  try {
    adam_step(store, state, [](const std::string&) { return 1.0; });
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("decoder.output.bias") != std::string::npos);
  }
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
  ParameterStore<double> store(1);
  auto a = store.constant("a", {1}, 0.0);
  auto b = store.constant("b", {1}, 0.0);
  a.zero_grad();
  b.zero_grad();
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(store, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("learning-rate schedule: linear warmup then cosine") {
  ScheduleConfig sc{2e-4, 3e-4, 100, 1100, 1e-5};
  CHECK(lr_at(0, sc).encoder == 0.0);
  CHECK(lr_at(50, sc).decoder == doctest::Approx(1.5e-4));
  CHECK(lr_at(100, sc).encoder == doctest::Approx(2e-4));
  CHECK(lr_at(100, sc).decoder == doctest::Approx(3e-4));
  const double mid = 1e-5 + (3e-4 - 1e-5) * 0.5 * (1 + std::cos(std::numbers::pi * 0.5));
  CHECK(lr_at(600, sc).decoder == doctest::Approx(mid));
  CHECK(lr_at(1100, sc).decoder == doctest::Approx(1e-5));
  CHECK(lr_at(5000, sc).encoder == doctest::Approx(1e-5));
  for (std::size_t s = 100; s < 1100; ++s) CHECK(lr_at(s + 1, sc).decoder <= lr_at(s, sc).decoder);
  const auto r = lr_at(400, sc);
  CHECK(r.decoder / r.encoder == doctest::Approx(1.5).epsilon(0.01));
  CHECK(effective_warmup(2000, 1280) == 200);
  CHECK(effective_warmup(2000, 50000) == 2000);
  CHECK(effective_warmup(100, 1280) == 100);
}

TEST_CASE("parameter groups split encoder from decoder and adapters") {
  CHECK(in_encoder_group("encoder.layers.0.mhsa.query.weight"));
  CHECK_FALSE(in_encoder_group("encoder.layers.0.adapter_mhsa.down.weight"));
  CHECK_FALSE(in_encoder_group("decoder.output.weight"));
}

TEST_CASE("training is deterministic and reduces the loss") {
  const auto data = tiny_data(8, 3);
  auto run = [&]() {
    auto m = ModelBundle<double>::build(tiny_config(), small_vocab(), std::nullopt, 5);
    const auto examples = make_train_examples(m, data);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 4;
    cfg.lr_enc = cfg.lr_dec = 1e-2;
    cfg.warmup_steps = 2;
    const auto result = train(m, examples, cfg);
    return std::make_pair(result, to_vector(m.params().find("decoder.output.weight")->tensor));
  };
  const auto [r1, w1] = run();
  const auto [r2, w2] = run();
  CHECK(w1 == w2);
  REQUIRE(r1.epochs.size() == 30);
  CHECK(r1.steps == 60);
  CHECK(r1.epochs.back().train_loss < 0.5 * r1.epochs.front().train_loss);
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) CHECK(r1.epochs[i].train_loss == r2.epochs[i].train_loss);
}

TEST_CASE("frozen parameters are untouched and the hook can stop training") {
  const auto data = tiny_data(4, 4);
  ModelConfig cfg_m = tiny_config();
  cfg_m.adapters = true;
  cfg_m.adapter_bottleneck = 4;
  auto m = ModelBundle<double>::build(cfg_m, small_vocab(), std::nullopt, 6);
  m.freeze_encoder(true);
  const auto enc_before = to_vector(m.params().find("encoder.layers.0.mhsa.query.weight")->tensor);
  const auto adapter_before = to_vector(m.params().find("encoder.layers.0.adapter_mhsa.up.weight")->tensor);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 2;
  cfg.lr_enc = cfg.lr_dec = 1e-2;
  std::vector<std::size_t> seen;
  const auto result = train(m, make_train_examples(m, data), cfg,
                            EpochHook<double>([&](const ModelBundle<double>&, EpochLog& log) {
                              log.dev_f1 = 0.5;
                              seen.push_back(log.epoch);
                              return log.epoch == 3;
                            }));
  CHECK(result.epochs.size() == 3);
  CHECK(seen == std::vector<std::size_t>{1, 2, 3});
  CHECK(result.epochs.back().dev_f1 == 0.5);
  CHECK(to_vector(m.params().find("encoder.layers.0.mhsa.query.weight")->tensor) == enc_before);
  CHECK(to_vector(m.params().find("encoder.layers.0.adapter_mhsa.up.weight")->tensor) != adapter_before);
}

TEST_CASE("epoch log CSV") {
  EpochLog log{2, 64, 1e-4, 1.5e-4, 0.25, 0.9, std::nullopt};
  CHECK(epoch_log_header() == "epoch,step,lr_enc,lr_dec,train_loss,dev_intent_acc,dev_f1");
  CHECK(epoch_log_csv(log) == "2,64,0.0001,0.00015,0.25,0.9,");
}

TEST_CASE("over-long targets and empty data are rejected") {
  ModelConfig cfg_m = tiny_config();
  cfg_m.max_target_len = 5;
  auto m = ModelBundle<double>::build(cfg_m, small_vocab(), std::nullopt, 1);
  CHECK_THROWS_AS(make_train_examples(m, tiny_data(2, 1)), DataError);
  CHECK_THROWS_AS(train(m, {}, TrainConfig{}), DataError);
}
