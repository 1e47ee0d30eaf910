// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "sicsf/decoding.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace sicsf;

using sicsf::testing::TableScorer;
using sicsf::testing::exhaustive_search;

TEST_CASE("log_softmax normalises and applies temperature") {
  const std::vector<double> x = {1.0, 2.0, 3.0};
  const auto lp = log_softmax(x, 2.0);
  double z = 0.0;
  for (double v : lp) z += std::exp(v);
  CHECK(z == doctest::Approx(1.0));
  CHECK(lp[2] - lp[1] == doctest::Approx(0.5));
}

TEST_CASE("beam search with exhaustive width equals brute-force argmax") {
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t vocab = 3 + std::size_t(trial % 2);
    const std::size_t max_len = 1 + std::size_t(trial % 4);
    const double temperature = (trial % 3 == 0) ? 1.0 : 1.25;
    const TableScorer s(vocab, 1000 + std::uint64_t(trial));
    BeamConfig cfg;
    cfg.width = std::size_t(std::pow(double(vocab), double(max_len)));
    cfg.temperature = temperature;
    cfg.max_len = max_len;
    const auto got = beam_search(s, cfg);
    const auto want = exhaustive_search(s, max_len, temperature);
    if (got.tokens == want.tokens && std::abs(got.log_prob - want.log_prob) < 1e-12) ++agree;
  }
  CHECK(agree == 100);
}

TEST_CASE("width 1 at temperature 1 equals greedy token for token") {
  for (int trial = 0; trial < 50; ++trial) {
    const TableScorer s(6 + std::size_t(trial % 5), 77 + std::uint64_t(trial));
    BeamConfig cfg;
    cfg.width = 1;
    cfg.temperature = 1.0;
    cfg.max_len = 12;
    const auto beam = beam_search(s, cfg);
    const auto greedy = greedy_search(s, 12);
    CHECK(beam.tokens == greedy.tokens);
    CHECK(beam.finished == greedy.finished);
    CHECK(beam.log_prob == doctest::Approx(greedy.log_prob).epsilon(1e-12));
  }
}

TEST_CASE("scores never increase along a hypothesis") {
  const TableScorer s(8, 5);
  BeamConfig cfg;
  cfg.width = 4;
  cfg.max_len = 6;
  const auto h = beam_search(s, cfg);
  double score = 0.0;
  std::vector<int> prefix = {kBosId};
  for (std::size_t i = 1; i < h.tokens.size(); ++i) {
    const double next = score + log_softmax(s.logits(prefix), cfg.temperature)[std::size_t(h.tokens[i])];
    CHECK(next <= score);
    score = next;
    prefix.push_back(h.tokens[i]);
  }
  CHECK(score == doctest::Approx(h.log_prob).epsilon(1e-12));
  CHECK(h.log_prob <= 0.0);
}

TEST_CASE("a very high temperature keeps every first token in the beam") {
  // With width V and max_len 1 every first token is a final hypothesis; at
  // huge temperature they are all within a hair of -log V.
  const TableScorer s(5, 9);
  const auto lp = log_softmax(s.logits({kBosId}), 1e9);
  for (double v : lp) CHECK(v == doctest::Approx(-std::log(5.0)).epsilon(1e-6));
  // The per-step argmax does not depend on the temperature.
  const auto a = log_softmax(s.logits({kBosId}), 0.5);
  const auto b = log_softmax(s.logits({kBosId}), 3.0);
  CHECK(std::max_element(a.begin(), a.end()) - a.begin() == std::max_element(b.begin(), b.end()) - b.begin());
}

TEST_CASE("EOS first gives an empty finished hypothesis") {
  class EosScorer final : public StepScorer {
   public:
    std::size_t vocab_size() const override { return 5; }
    Step extend(const ScorerStatePtr&, int) const override { return {nullptr, {0, 0, 50, 0, 0}}; }
  } s;
  const auto g = greedy_search(s, 10);
  CHECK(g.tokens == std::vector<int>{kBosId, kEosId});
  CHECK(g.finished);
  const auto b = beam_search(s, BeamConfig{});
  CHECK(b.tokens == std::vector<int>{kBosId, kEosId});
}

TEST_CASE("ties break toward the lower token id") {
  class FlatScorer final : public StepScorer {
   public:
    std::size_t vocab_size() const override { return 6; }
    Step extend(const ScorerStatePtr&, int) const override { return {nullptr, std::vector<double>(6, 0.0)}; }
  } s;
  CHECK(greedy_search(s, 3).tokens == std::vector<int>{kBosId, 0, 0, 0});
  BeamConfig cfg;
  cfg.width = 1;
  cfg.max_len = 3;
  CHECK(beam_search(s, cfg).tokens == std::vector<int>{kBosId, 0, 0, 0});
  // Wider beams see the tied EOS, and stopping there scores best.
  cfg.width = 3;
  CHECK(beam_search(s, cfg).tokens == std::vector<int>{kBosId, kEosId});
}

TEST_CASE("truncation at max_len and argument checks") {
  const TableScorer s(30, 3, 0.01);
  const auto g = greedy_search(s, 4);
  CHECK(g.generated() <= 4);
  BeamConfig cfg;
  cfg.max_len = 4;
  CHECK(beam_search(s, cfg).generated() <= 4);
  cfg.width = 0;
  CHECK_THROWS(beam_search(s, cfg));
  cfg.width = 2;
  cfg.temperature = 0.0;
  CHECK_THROWS(beam_search(s, cfg));
  CHECK_THROWS(greedy_search(s, 0));
}

TEST_CASE("beam search never calls the scorer past max_len") {
  const TableScorer s(10, 4);
  BeamConfig cfg;
  cfg.width = 3;
  cfg.max_len = 2;
  beam_search(s, cfg);
  CHECK(s.calls <= 1 + cfg.width);
}

TEST_CASE("model decoding: greedy equals width-1 beam and is deterministic") {
  std::vector<std::string> corpus = {"{'scenario': 'alarm', 'action': 'set', 'entities': []}"};
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.conv_kernel = 3;
  cfg.feature_dim = 4;
  cfg.rel_pos_clip = 4;
  cfg.max_target_len = 20;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> dist;
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = ModelBundle<double>::build(cfg, Vocab::train(corpus, 40), std::nullopt, 100 + trial);
    Example ex{"x", FeatureMatrix{8, 4, 8, std::vector<float>(32)}, "", ""};
    for (auto& v : ex.features.values) v = dist(rng);
    BeamConfig beam1{1, 1.0, 20, 0.0};
    const auto g = greedy_decode(m, ex, 20);
    CHECK(g == beam_decode(m, ex, beam1));
    CHECK(g == greedy_decode(m, ex, 20));
    const auto b = beam_decode(m, ex, BeamConfig{4, 1.25, 20, 0.0});
    CHECK(b == beam_decode(m, ex, BeamConfig{4, 1.25, 20, 0.0}));
  }
}
