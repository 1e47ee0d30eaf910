// SPDX-License-Identifier: Apache-2.0

#include "sicsf/pipeline.hpp"

#include <algorithm>
#include <ostream>
#include <random>

#include "sicsf/seed.hpp"

namespace sicsf {

Dataset load_dataset(const std::filesystem::path& dir, bool with_features) {
  return {load_manifest(split_path(dir, "train"), with_features),
          load_manifest(split_path(dir, "dev"), with_features),
          load_manifest(split_path(dir, "test"), with_features)};
}

Vocab semantics_vocab(const std::vector<Example>& train, std::size_t vocab_size) {
  std::vector<std::string> corpus;
  corpus.reserve(train.size());
  for (const auto& ex : train) corpus.push_back(ex.semantics);
  return Vocab::train(corpus, vocab_size);
}

Vocab transcript_vocab(const std::vector<Example>& train, std::size_t vocab_size) {
  std::vector<std::string> corpus;
  corpus.reserve(train.size());
  for (const auto& ex : train) corpus.push_back(ex.transcript);
  return Vocab::train(corpus, vocab_size);
}

std::string transcript_target(const Example& ex) { return ex.transcript; }

EvalReport evaluate_model(const Model& model, const std::vector<Example>& examples,
                          const DecodeOptions& decode, std::vector<std::string>* out) {
  std::vector<SemanticsRecord> preds, golds;
  preds.reserve(examples.size());
  golds.reserve(examples.size());
  if (out != nullptr) out->clear();
  for (const auto& ex : examples) {
    const std::string text = decode.greedy ? greedy_decode(model, ex, decode.beam.max_len)
                                           : beam_decode(model, ex, decode.beam);
    preds.push_back(parse_semantics(text));
    golds.push_back(parse_semantics(ex.semantics));
    if (out != nullptr) out->push_back(flatten(preds.back()));
  }
  return evaluate(preds, golds);
}

double transcript_wer(const Model& model, const std::vector<Example>& examples, std::size_t max_len) {
  std::vector<std::string> refs, hyps;
  for (const auto& ex : examples) {
    refs.push_back(ex.transcript);
    hyps.push_back(greedy_decode(model, ex, max_len));
  }
  return corpus_wer(refs, hyps);
}

std::vector<Example> corrupt_transcripts(const std::vector<Example>& examples, double wer,
                                         std::uint64_t seed) {
  std::vector<std::string> vocabulary;
  for (const auto& ex : examples) {
    for (auto& w : split_words(ex.transcript)) vocabulary.push_back(std::move(w));
  }
  std::sort(vocabulary.begin(), vocabulary.end());
  vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
  std::mt19937_64 rng(derive_seed(seed, "wer_channel"));
  std::vector<Example> out = examples;
  for (auto& ex : out) ex.transcript = wer_channel(ex.transcript, wer, rng, vocabulary);
  return out;
}

TrainingRun train_with_dev(Model& model, const std::vector<Example>& train,
                           const std::vector<Example>* dev, const TrainConfig& cfg, std::ostream* log,
                           const DevTarget& target, std::string (*target_of)(const Example&),
                           std::size_t dev_max_len) {
  TrainingRun run;
  if (log != nullptr) *log << epoch_log_header() << "\n";
  const EpochHook<float> hook = [&](const Model& m, EpochLog& entry) {
    bool stop = false;
    if (dev != nullptr && target_of == nullptr) {
      DecodeOptions greedy{true, {}};
      greedy.beam.max_len = dev_max_len;
      const EvalReport r = evaluate_model(m, *dev, greedy);
      entry.dev_intent_acc = r.intent_accuracy;
      entry.dev_f1 = r.exact.f1();
      if (!run.epochs_to_target && r.intent_accuracy >= target.intent_accuracy && r.exact.f1() >= target.f1) {
        run.epochs_to_target = entry.epoch;
        stop = target.stop_when_reached;
      }
    }
    if (log != nullptr) *log << epoch_log_csv(entry) << std::endl;
    return stop;
  };
  run.result = sicsf::train(model, make_train_examples(model, train, target_of), cfg, hook);
  return run;
}

std::vector<Example> asr_training_set(const std::filesystem::path& dir, const Dataset& ds) {
  std::vector<Example> out = ds.train;
  if (std::filesystem::exists(split_path(dir, "asr"))) {
    auto extra = load_manifest(split_path(dir, "asr"));
    out.insert(out.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
  }
  return out;
}

EvalReport cascade_eval(const RunConfig& cfg, const Dataset& ds, double wer) {
  const auto train = corrupt_transcripts(ds.train, wer, derive_seed(cfg.train.seed, "cascade:train"));
  const auto test = corrupt_transcripts(ds.test, wer, derive_seed(cfg.train.seed, "cascade:test"));
  Model model = Model::build(cfg.nlu_model(), semantics_vocab(ds.train, cfg.nlu_output_vocab_size),
                             transcript_vocab(train, cfg.nlu_input_vocab_size), cfg.train.seed);
  train_with_dev(model, train, nullptr, cfg.train);
  return evaluate_model(model, test, DecodeOptions{cfg.greedy, cfg.decode});
}

}  // namespace sicsf
