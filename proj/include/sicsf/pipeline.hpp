// SPDX-License-Identifier: Apache-2.0
//
// Glue shared by the command-line tool and the experiment harness: dataset
// loading, vocabulary construction, model evaluation and training with
// per-epoch dev scoring.

#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sicsf/config.hpp"
#include "sicsf/decoding.hpp"
#include "sicsf/metrics.hpp"
#include "sicsf/training.hpp"

namespace sicsf {

// Inference and training run in single precision.
using Model = ModelBundle<float>;

struct Dataset {
  std::vector<Example> train, dev, test;
};

// DIR/{train,dev,test}.jsonl with their features.
Dataset load_dataset(const std::filesystem::path& dir, bool with_features = true);

// BPE over the training split's semantics strings or transcripts.
Vocab semantics_vocab(const std::vector<Example>& train, std::size_t vocab_size);
Vocab transcript_vocab(const std::vector<Example>& train, std::size_t vocab_size);

struct DecodeOptions {
  bool greedy = false;
  BeamConfig beam;
};

// Decodes every example and scores the canonicalised predictions against the
// gold semantics. Predictions (canonical strings) are returned via `out`.
EvalReport evaluate_model(const Model& model, const std::vector<Example>& examples,
                          const DecodeOptions& decode, std::vector<std::string>* out = nullptr);

// Greedy transcripts from an ASR-proxy model and their word error rate.
double transcript_wer(const Model& model, const std::vector<Example>& examples,
                      std::size_t max_len = 192);

// Same examples with each transcript passed through the WER channel.
std::vector<Example> corrupt_transcripts(const std::vector<Example>& examples, double wer,
                                         std::uint64_t seed);

struct TrainingRun {
  TrainResult result;
  std::optional<std::size_t> epochs_to_target;  // first epoch meeting DevTarget
};

struct DevTarget {
  double intent_accuracy = 0.95;
  double f1 = 0.90;
  bool stop_when_reached = false;
};

// Trains on `train`; with dev examples, greedy-decodes and scores them after
// every epoch and fills the log's dev columns. Writes CSV lines to `log`.
// `target_of` selects the training target (semantics by default).
TrainingRun train_with_dev(Model& model, const std::vector<Example>& train,
                           const std::vector<Example>* dev, const TrainConfig& cfg,
                           std::ostream* log = nullptr, const DevTarget& target = {},
                           std::string (*target_of)(const Example&) = nullptr,
                           std::size_t dev_max_len = 192);

std::string transcript_target(const Example& ex);

// Training set of the ASR proxy: the train split plus DIR/asr.jsonl if present.
std::vector<Example> asr_training_set(const std::filesystem::path& dir, const Dataset& ds);

// Text NLU model trained for cfg.train.epochs on train transcripts passed
// through the WER channel at `wer`, then decoded on test transcripts corrupted
// the same way.
EvalReport cascade_eval(const RunConfig& cfg, const Dataset& ds, double wer);

}  // namespace sicsf
