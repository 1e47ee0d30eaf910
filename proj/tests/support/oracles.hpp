// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations and fixtures shared by the unit tests
// and the acceptance runner.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sicsf/decoding.hpp"
#include "sicsf/metrics.hpp"
#include "sicsf/semantics.hpp"
#include "sicsf/tokenizer.hpp"

namespace sicsf::testing {

// ---- semantics ---------------------------------------------------------------

inline std::string random_identifier(std::mt19937_64& rng) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789_";
  std::uniform_int_distribution<std::size_t> len(1, 10), pick(0, alphabet.size() - 1);
  std::string s(len(rng), 'a');
  for (auto& c : s) c = alphabet[pick(rng)];
  return s;
}

// Fillers drawn from an alphabet rich in quoting and structural characters.
inline std::string random_filler(std::mt19937_64& rng) {
  static const std::string alphabet = "abc xyz'\\\"{}[],: \t0123";
  std::uniform_int_distribution<std::size_t> len(0, 12), pick(0, alphabet.size() - 1);
  std::string s(len(rng), 'a');
  for (auto& c : s) c = alphabet[pick(rng)];
  return s;
}

inline SemanticsRecord random_semantics(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n(0, 4);
  std::vector<Entity> ents;
  for (int i = n(rng); i > 0; --i) ents.push_back({random_identifier(rng), random_filler(rng)});
  return SemanticsRecord::make(random_identifier(rng), random_identifier(rng), std::move(ents));
}

struct RecoveryCase {
  std::string text;
  SemanticsRecord want;
};

// Syntax errors give the empty record; missing or ill-typed fields give "none".
inline std::vector<RecoveryCase> recovery_fixture() {
  using R = SemanticsRecord;
  const R empty;
  return {
      {"", empty},
      {"   ", empty},
      {"{", empty},
      {"}", empty},
      {"[1, 2]", empty},
      {"'alarm'", empty},
      {"{'scenario': 'alarm', 'entities': [", empty},
      {"{'scenario': 'alarm' 'action': 'set'}", empty},
      {"{'scenario': 'alarm', 'action': 'set', 'entities': []", empty},
      {"{'scenario': 'alarm', 'action': 'set', 'entities': []} trailing", empty},
      {"{'scenario': 'alarm', 'action': 'set', 'entities': []}", R::make("alarm", "set")},
      {"{'action': 'set', 'entities': []}", R::make("none", "set")},
      {"{'scenario': 'alarm', 'entities': []}", R::make("alarm", "none")},
      {"{'scenario': 'alarm', 'action': 'set'}", R::make("alarm", "set")},
      {"{}", R::make("none", "none")},
      {"{'scenario': 5, 'action': 'x'}", R::make("none", "x")},
      {"{'scenario': 'a', 'action': ['b'], 'entities': []}", R::make("a", "none")},
      {"{'scenario': 'a', 'action': 'b', 'entities': 'oops'}", R::make("a", "b")},
      {"{'scenario': 'a', 'action': 'b', 'entities': [{'type': 'time'}]}", R::make("a", "b")},
      {"{'scenario': 'a', 'action': 'b', 'entities': [{'type': 'time', 'filler': 'x'}]}",
       R::make("a", "b", {{"time", "x"}})},
  };
}

// ---- decoding ----------------------------------------------------------------

// Logits are a fixed random function of the whole prefix.
class TableScorer final : public StepScorer {
 public:
  TableScorer(std::size_t vocab, std::uint64_t seed, double scale = 2.0)
      : vocab_(vocab), seed_(seed), scale_(scale) {}

  struct Prefix final : ScorerState {
    std::vector<int> ids;
  };

  std::size_t vocab_size() const override { return vocab_; }

  Step extend(const ScorerStatePtr& state, int token) const override {
    auto next = std::make_shared<Prefix>();
    if (state) next->ids = static_cast<const Prefix&>(*state).ids;
    next->ids.push_back(token);
    ++calls;
    return {next, logits(next->ids)};
  }

  std::vector<double> logits(const std::vector<int>& prefix) const {
    std::uint64_t h = seed_;
    for (int t : prefix) h = h * 1000003ULL + std::uint64_t(t) + 1;
    std::mt19937_64 rng(h);
    std::normal_distribution<double> dist(0.0, scale_);
    std::vector<double> out(vocab_);
    for (auto& v : out) v = dist(rng);
    return out;
  }

  mutable std::size_t calls = 0;

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double scale_;
};

// Scores every EOS-terminated sequence of at most max_len tokens and every
// unterminated one of exactly max_len tokens.
inline BeamHypothesis exhaustive_search(const TableScorer& s, std::size_t max_len,
                                        double temperature) {
  BeamHypothesis best;
  best.log_prob = -INFINITY;
  std::function<void(std::vector<int>&, double)> walk = [&](std::vector<int>& prefix, double score) {
    const auto lp = log_softmax(s.logits(prefix), temperature);
    for (std::size_t v = 0; v < lp.size(); ++v) {
      prefix.push_back(int(v));
      const double sc = score + lp[v];
      const bool done = int(v) == kEosId;
      if (done || prefix.size() - 1 == max_len) {
        if (sc > best.log_prob) best = {prefix, sc, done};
      } else {
        walk(prefix, sc);
      }
      prefix.pop_back();
    }
  };
  std::vector<int> prefix = {kBosId};
  walk(prefix, 0.0);
  return best;
}

// ---- metrics -----------------------------------------------------------------

inline SemanticsRecord small_random_record(std::mt19937_64& rng) {
  const char* scen[] = {"alarm", "music", "iot"};
  const char* types[] = {"time", "date", "place"};
  const char* fillers[] = {"five am", "today", "kitchen", "Five  am", "hall"};
  std::uniform_int_distribution<int> pick3(0, 2), pick5(0, 4), count(0, 4);
  std::vector<Entity> es;
  for (int i = count(rng); i > 0; --i) es.push_back({types[pick3(rng)], fillers[pick5(rng)]});
  return SemanticsRecord::make(scen[pick3(rng)], scen[pick3(rng)], es);
}

// Pairs identical (type, normalised filler) items one at a time.
inline std::size_t brute_force_tp(const SemanticsRecord& p, const SemanticsRecord& g) {
  std::vector<bool> used(g.entities.size(), false);
  std::size_t tp = 0;
  for (const auto& e : p.entities) {
    for (std::size_t j = 0; j < g.entities.size(); ++j) {
      if (used[j] || g.entities[j].type != e.type) continue;
      if (normalize_filler(g.entities[j].filler) != normalize_filler(e.filler)) continue;
      used[j] = true;
      ++tp;
      break;
    }
  }
  return tp;
}

// Hand-scored: intent 3/5, TP 4, FP 2, FN 2, F1 2/3.
inline std::vector<SemanticsRecord> fixture_gold() {
  using R = SemanticsRecord;
  return {R::make("alarm", "set", {{"time", "five am"}}),
          R::make("music", "play", {{"artist", "adele"}, {"genre", "pop"}}),
          R::make("weather", "query", {{"date", "today"}}),
          R::make("email", "send"),
          R::make("iot", "on", {{"device", "lamp"}, {"place", "kitchen"}})};
}

inline std::vector<std::string> fixture_pred_lines() {
  using R = SemanticsRecord;
  return {flatten(R::make("alarm", "set", {{"time", "five am"}})),
          flatten(R::make("music", "play", {{"artist", "adele"}})),
          flatten(R::make("weather", "set", {{"date", "tomorrow"}})),
          "{'scenario': 'email', 'action':",
          "{'scenario': 'iot', 'action': 'on', 'entities': [{'type': 'device', 'filler': 'Lamp '}, "
          "{'type': 'place', 'filler': 'kitchen'}, {'type': 'place', 'filler': 'hall'}]}"};
}

}  // namespace sicsf::testing
