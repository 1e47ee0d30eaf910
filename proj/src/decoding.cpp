// SPDX-License-Identifier: Apache-2.0

#include "sicsf/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "sicsf/tokenizer.hpp"

namespace sicsf {

std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] / temperature;
    peak = std::max(peak, out[i]);
  }
  double z = 0.0;
  for (double v : out) z += std::exp(v - peak);
  const double lse = peak + std::log(z);
  for (auto& v : out) v -= lse;
  return out;
}

BeamHypothesis greedy_search(const StepScorer& scorer, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  BeamHypothesis h{{kBosId}, 0.0, false};
  StepScorer::Step step = scorer.extend(nullptr, kBosId);
  while (h.generated() < max_len) {
    const auto best = std::max_element(step.logits.begin(), step.logits.end());
    const int token = static_cast<int>(best - step.logits.begin());
    h.log_prob += log_softmax(step.logits)[std::size_t(token)];
    h.tokens.push_back(token);
    if (token == kEosId) {
      h.finished = true;
      break;
    }
    if (h.generated() < max_len) step = scorer.extend(step.state, token);
  }
  return h;
}

namespace {

struct Live {
  BeamHypothesis hyp;
  StepScorer::Step step;
};

struct Candidate {
  double score;
  std::size_t parent;
  int token;
};

double ranking_score(const BeamHypothesis& h, double alpha) {
  if (alpha == 0.0 || h.generated() == 0) return h.log_prob;
  return h.log_prob / std::pow(double(h.generated()), alpha);
}

}  // namespace

BeamHypothesis beam_search(const StepScorer& scorer, const BeamConfig& cfg) {
  if (cfg.width < 1) throw std::invalid_argument("beam width must be >= 1");
  if (!(cfg.temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (cfg.max_len < 1) throw std::invalid_argument("max_len must be >= 1");

  std::vector<Live> live;
  live.push_back({{{kBosId}, 0.0, false}, scorer.extend(nullptr, kBosId)});
  std::vector<BeamHypothesis> finished;
  std::size_t generated = 0;

  while (!live.empty() && generated < cfg.max_len) {
    std::vector<Candidate> cands;
    cands.reserve(live.size() * scorer.vocab_size());
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto lp = log_softmax(live[p].step.logits, cfg.temperature);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        cands.push_back({live[p].hyp.log_prob + lp[v], p, static_cast<int>(v)});
      }
    }
    const std::size_t keep = std::min(cfg.width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    ++generated;
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = cands[i];
      BeamHypothesis h = live[c.parent].hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      if (c.token == kEosId) {
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      StepScorer::Step step;
      if (generated < cfg.max_len) step = scorer.extend(live[c.parent].step.state, c.token);
      next.push_back({std::move(h), std::move(step)});
    }
    live = std::move(next);
    // Scores never increase, so a live hypothesis below the best finished
    // one can only lose.
    if (cfg.len_norm_alpha == 0.0 && !finished.empty() && !live.empty()) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.log_prob);
      if (best_finished >= live.front().hyp.log_prob) break;
    }
  }

  const BeamHypothesis* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  auto consider = [&](const BeamHypothesis& h) {
    const double s = ranking_score(h, cfg.len_norm_alpha);
    if (best == nullptr || s > best_score) {
      best = &h;
      best_score = s;
    }
  };
  for (const auto& f : finished) consider(f);
  for (const auto& l : live) consider(l.hyp);
  return *best;
}

// ---- model adapter ---------------------------------------------------------

namespace {

template <typename T>
struct CacheState final : ScorerState {
  DecodeCache<T> cache;
};

}  // namespace

template <typename T>
ModelScorer<T>::ModelScorer(const ModelBundle<T>& model, EncoderStates<T> enc)
    : model_(model), enc_(std::move(enc)) {}

template <typename T>
std::size_t ModelScorer<T>::vocab_size() const {
  return model_.output_vocab().size();
}

template <typename T>
StepScorer::Step ModelScorer<T>::extend(const ScorerStatePtr& state, int token) const {
  NoGradGuard no_grad;
  auto next = std::make_shared<CacheState<T>>();
  if (state) next->cache = static_cast<const CacheState<T>&>(*state).cache;
  const int ids[] = {token};
  const Tensor<T> logits = model_.decode_step(ids, enc_, next->cache);
  const auto row = logits.data();
  return {std::move(next), std::vector<double>(row.begin(), row.end())};
}

template <typename T>
std::string greedy_decode(const ModelBundle<T>& model, const Example& ex, std::size_t max_len) {
  NoGradGuard no_grad;
  const ModelScorer<T> scorer(model, model.encode_example(ex));
  return model.output_vocab().decode(greedy_search(scorer, max_len).tokens);
}

template <typename T>
std::string beam_decode(const ModelBundle<T>& model, const Example& ex, const BeamConfig& cfg) {
  NoGradGuard no_grad;
  const ModelScorer<T> scorer(model, model.encode_example(ex));
  return model.output_vocab().decode(beam_search(scorer, cfg).tokens);
}

#define SICSF_INSTANTIATE(T)                                                             \
  template class ModelScorer<T>;                                                         \
  template std::string greedy_decode(const ModelBundle<T>&, const Example&, std::size_t); \
  template std::string beam_decode(const ModelBundle<T>&, const Example&, const BeamConfig&);

SICSF_INSTANTIATE(float)
SICSF_INSTANTIATE(double)

}  // namespace sicsf
