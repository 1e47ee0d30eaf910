// SPDX-License-Identifier: Apache-2.0
//
// Greedy and beam-search decoding over any next-token scorer, plus adapters
// that decode a ModelBundle into semantics strings.

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sicsf/model.hpp"

namespace sicsf {

// Opaque per-prefix state owned by a scorer.
struct ScorerState {
  virtual ~ScorerState() = default;
};
using ScorerStatePtr = std::shared_ptr<const ScorerState>;

class StepScorer {
 public:
  struct Step {
    ScorerStatePtr state;
    std::vector<double> logits;  // next-token logits, vocab_size() entries
  };

  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Appends `token` to the prefix held by `state` (nullptr: the empty prefix)
  // and scores the following token. Must not modify `state`.
  virtual Step extend(const ScorerStatePtr& state, int token) const = 0;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // BOS first; ends with EOS iff finished
  double log_prob = 0.0;    // cumulative, after temperature
  bool finished = false;

  std::size_t generated() const { return tokens.empty() ? 0 : tokens.size() - 1; }
};

struct BeamConfig {
  std::size_t width = 32;
  double temperature = 1.25;
  std::size_t max_len = 192;    // generated tokens, EOS included
  double len_norm_alpha = 0.0;  // final ranking by log_prob / generated^alpha
};

// Highest-logit token per step (lower id on ties) until EOS or max_len.
// log_prob is accumulated at temperature 1.
BeamHypothesis greedy_search(const StepScorer& scorer, std::size_t max_len);

// Each step expands every live hypothesis over log_softmax(logits /
// temperature) and keeps the `width` best expansions (ties: earlier parent,
// then lower token id). EOS expansions retire into the finished pool. Stops
// when nothing is live, max_len is reached, or (without length
// normalisation) no live hypothesis can still beat the best finished one.
// Returns the best finished or live hypothesis.
BeamHypothesis beam_search(const StepScorer& scorer, const BeamConfig& cfg);

// log_softmax(logits / temperature), computed in double.
std::vector<double> log_softmax(std::span<const double> logits, double temperature = 1.0);

// Scores with a model's decoder over one encoded input, using the KV cache.
template <typename T>
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const ModelBundle<T>& model, EncoderStates<T> enc);
  std::size_t vocab_size() const override;
  Step extend(const ScorerStatePtr& state, int token) const override;

 private:
  const ModelBundle<T>& model_;
  EncoderStates<T> enc_;
};

// Decodes one example (features for E2E, transcript for NLU) to the
// detokenised string, without gradient tracking.
template <typename T>
std::string greedy_decode(const ModelBundle<T>& model, const Example& ex, std::size_t max_len = 192);

template <typename T>
std::string beam_decode(const ModelBundle<T>& model, const Example& ex, const BeamConfig& cfg = {});

}  // namespace sicsf
