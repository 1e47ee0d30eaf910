// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "sicsf/data.hpp"
#include "sicsf/errors.hpp"
#include "sicsf/semantics.hpp"
#include "support/test_util.hpp"

using namespace sicsf;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

SynthConfig small_config() {
  SynthConfig c;
  c.train_samples = 20;
  c.dev_samples = 5;
  c.test_samples = 5;
  c.asr_samples = 0;
  return c;
}

}  // namespace

TEST_CASE("feature files round trip bit-exactly") {
  auto dir = sicsf::testing::temp_dir("fea");
  FeatureMatrix f{3, 2, 2, {1.5f, -0.0f, 3.25e-7f, 1e30f, -2.0f, 0.1f}};
  write_features(dir / "a.fea", f);
  CHECK(read_features(dir / "a.fea") == f);
  FeatureMatrix one{1, 1, 1, {42.0f}};
  write_features(dir / "b.fea", one);
  CHECK(read_features(dir / "b.fea") == one);
  auto bytes = slurp(dir / "a.fea");
  CHECK(bytes.substr(0, 4) == "FEA1");
  CHECK(bytes.size() == 16 + 4 * 6);
}

TEST_CASE("feature file errors") {
  auto dir = sicsf::testing::temp_dir("fea_bad");
  CHECK_THROWS_AS(write_features(dir / "e.fea", FeatureMatrix{0, 2, 0, {}}), DataError);
  {
    std::ofstream out(dir / "zero.fea", std::ios::binary);
    out.write("FEA1\0\0\0\0\2\0\0\0\0\0\0\0", 16);
  }
  CHECK_THROWS_AS(read_features(dir / "zero.fea"), DataError);
  {
    std::ofstream out(dir / "magic.fea", std::ios::binary);
    out << "FEA2xxxxxxxxxxxx";
  }
  CHECK_THROWS_AS(read_features(dir / "magic.fea"), DataError);
  FeatureMatrix f{2, 2, 2, {1, 2, 3, 4}};
  write_features(dir / "t.fea", f);
  auto bytes = slurp(dir / "t.fea");
  {
    std::ofstream out(dir / "trunc.fea", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 1);
  }
  CHECK_THROWS_AS(read_features(dir / "trunc.fea"), DataError);
}

TEST_CASE("synthetic generation is deterministic and loads") {
  auto a = sicsf::testing::temp_dir("synth_a");
  auto b = sicsf::testing::temp_dir("synth_b");
  synth_generate(small_config(), a);
  synth_generate(small_config(), b);
  for (const char* split : {"train", "dev", "test"}) {
    CHECK(slurp(split_path(a, split)) == slurp(split_path(b, split)));
  }
  CHECK(slurp(a / "features/train_00003.fea") == slurp(b / "features/train_00003.fea"));
  auto train = load_manifest(split_path(a, "train"));
  CHECK(train.size() == 20);
  CHECK(load_manifest(split_path(a, "dev")).size() == 5);
  for (const auto& ex : train) {
    CHECK(canonicalize(ex.semantics) == ex.semantics);
    CHECK(ex.features.frames == split_words(ex.transcript).size() * 4);
  }
  CHECK_FALSE(fs::exists(split_path(a, "asr")));
}

TEST_CASE("noiseless features repeat the codebook vector") {
  auto cfg = small_config();
  cfg.noise_sigma = 0.0;
  auto lex = make_lexicon(cfg);
  std::mt19937_64 rng(5);
  auto u = synth_utterance(cfg, lex, rng);
  auto words = split_words(u.transcript);
  for (std::size_t w = 0; w < words.size(); ++w) {
    auto code = word_codebook(cfg, words[w]);
    for (std::size_t k = 0; k < cfg.frames_per_token; ++k) {
      for (std::size_t d = 0; d < cfg.feature_dim; ++d) {
        CHECK(u.features.values[(w * cfg.frames_per_token + k) * cfg.feature_dim + d] == code[d]);
      }
    }
  }
}

TEST_CASE("nearest-codebook decoding recovers the transcript words") {
  SynthConfig cfg;  // default sizes and noise
  cfg.asr_samples = 0;
  auto lex = make_lexicon(cfg);
  auto vocab = lex.all_words();
  std::map<std::string, std::vector<float>> codes;
  for (const auto& w : vocab) codes[w] = word_codebook(cfg, w);
  auto dir = sicsf::testing::temp_dir("synth_nn");
  synth_generate(cfg, dir);
  const auto train = load_manifest(split_path(dir, "train"));
  REQUIRE(train.size() == 500);
  std::size_t right = 0, total = 0;
  for (const auto& u : train) {
    auto words = split_words(u.transcript);
    for (std::size_t w = 0; w < words.size(); ++w) {
      std::vector<double> mean(cfg.feature_dim, 0.0);
      for (std::size_t k = 0; k < cfg.frames_per_token; ++k)
        for (std::size_t d = 0; d < cfg.feature_dim; ++d)
          mean[d] += u.features.values[(w * cfg.frames_per_token + k) * cfg.feature_dim + d];
      std::string best;
      double best_dist = 1e300;
      for (const auto& [word, code] : codes) {
        double dist = 0;
        for (std::size_t d = 0; d < cfg.feature_dim; ++d) {
          const double diff = mean[d] / double(cfg.frames_per_token) - code[d];
          dist += diff * diff;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best = word;
        }
      }
      right += best == words[w];
      ++total;
    }
  }
  CHECK(double(right) / double(total) >= 0.99);
}

TEST_CASE("synthetic config validation") {
  SynthConfig c;
  c.n_scenarios = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SynthConfig{};
  c.word_vocab = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SynthConfig{};
  c.noise_sigma = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("manifest diagnostics carry line numbers") {
  auto dir = sicsf::testing::temp_dir("manifest");
  const std::string good =
      R"({"id": "a", "features": "", "transcript": "x", "semantics": "{'scenario': 'a', 'action': 'b', 'entities': []}", "duration_frames": 0})";
  {
    std::ofstream(dir / "ok.jsonl") << good << "\n";
  }
  CHECK(read_manifest(dir / "ok.jsonl").size() == 1);
  {
    std::ofstream(dir / "broken.jsonl") << good << "\n{not json\n";
  }
  try {
    read_manifest(dir / "broken.jsonl");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  {
    std::ofstream(dir / "noncanon.jsonl")
        << R"({"id": "a", "semantics": "{'scenario':'a','action':'b','entities':[]}"})" << "\n";
  }
  CHECK_THROWS_AS(read_manifest(dir / "noncanon.jsonl"), DataError);
}

TEST_CASE("WER channel") {
  std::vector<std::string> vocab{"a", "b", "c", "d", "e"};
  std::mt19937_64 rng(1);
  CHECK(wer_channel("a b c", 0.0, rng, vocab) == "a b c");
  EditWeights only_delete{0.0, 1.0, 0.0};
  CHECK(wer_channel("a", 1.0, rng, vocab, only_delete).empty());
  EditWeights only_insert{0.0, 0.0, 1.0};
  CHECK(split_words(wer_channel("", 1.0, rng, vocab, only_insert)).size() == 1);
  CHECK_THROWS_AS(wer_channel("a", 1.5, rng, vocab), ConfigError);
  EditWeights only_sub{1.0, 0.0, 0.0};
  auto s = split_words(wer_channel("a b c", 1.0, rng, vocab, only_sub));
  REQUIRE(s.size() == 3);
  CHECK(s[0] != "a");
  CHECK(s[1] != "b");
  CHECK(s[2] != "c");
}

TEST_CASE("WER channel converges to its target rate") {
  std::vector<std::string> vocab;
  for (int i = 0; i < 200; ++i) vocab.push_back("w" + std::to_string(i));
  std::mt19937_64 rng(2);
  std::vector<std::string> refs, hyps;
  std::size_t words = 0;
  std::uniform_int_distribution<int> pick(0, 199), len(5, 15);
  while (words < 10000) {
    std::string ref;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) ref += (i ? " " : "") + vocab[pick(rng)];
    words += n;
    refs.push_back(ref);
    hyps.push_back(wer_channel(ref, 0.235, rng, vocab));
  }
  CHECK(std::abs(corpus_wer(refs, hyps) - 0.235) <= 0.02);
}

TEST_CASE("word edit distance") {
  CHECK(word_edit_distance(split_words("a b c"), split_words("a c")) == 1);
  CHECK(word_edit_distance(split_words("a b c"), split_words("x b c d")) == 2);
  CHECK(word_edit_distance({}, split_words("a b")) == 2);
}
