// SPDX-License-Identifier: Apache-2.0
//
// Feature files, JSON-lines manifests, the synthetic utterance generator and
// the word-level noise channel used to emulate ASR errors.
//
// FEA1 layout (little endian): "FEA1", u32 frames, u32 dim, u32 valid_len,
// then frames*dim float32 values, row-major.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sicsf/tensor.hpp"

namespace sicsf {

struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::size_t valid_len = 0;
  std::vector<float> values;  // frames × dim

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>::from({frames, dim}, std::vector<T>(values.begin(), values.end()));
  }
  bool operator==(const FeatureMatrix&) const = default;
};

void write_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_features(const std::filesystem::path& path);

struct ManifestRow {
  std::string id;
  std::string features;  // relative to the manifest's directory
  std::string transcript;
  std::string semantics;  // canonical string
  std::size_t duration_frames = 0;
};

struct Example {
  std::string id;
  FeatureMatrix features;
  std::string transcript;
  std::string semantics;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
// Throws DataError naming the line for malformed JSON, missing fields or
// non-canonical semantics.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
// Reads the manifest and, if requested, every feature file, checking its frame
// count against duration_frames.
std::vector<Example> load_manifest(const std::filesystem::path& path, bool with_features = true);

// Manifest for `split` inside a dataset directory: DIR/<split>.jsonl.
std::filesystem::path split_path(const std::filesystem::path& dir, std::string_view split);

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_scenarios = 6;
  std::size_t n_actions = 5;
  std::size_t n_slot_types = 6;
  std::size_t word_vocab = 30;  // filler words, shared out over slot types
  std::size_t train_samples = 500;
  std::size_t dev_samples = 100;
  std::size_t test_samples = 100;
  std::size_t asr_samples = 2000;  // extra transcript-only pretraining split; 0 disables
  std::size_t feature_dim = 16;
  std::size_t frames_per_token = 4;
  double noise_sigma = 0.1;

  void validate() const;
};

// The word inventory of a synthetic task, fixed by (config, seed).
struct SynthLexicon {
  std::vector<std::string> scenarios, actions, slot_types;
  std::vector<std::vector<std::string>> scenario_words;  // per scenario, synonyms
  std::vector<std::vector<std::string>> action_words;    // per action, synonyms
  std::vector<std::string> cue_words;                    // per slot type
  std::vector<std::vector<std::string>> filler_words;    // per slot type
  std::vector<std::string> function_words;

  std::vector<std::string> all_words() const;
};

SynthLexicon make_lexicon(const SynthConfig& cfg);

// Codebook vector of a word: seeded N(0,1)^dim, identical across splits.
std::vector<float> word_codebook(const SynthConfig& cfg, std::string_view word);

struct SynthUtterance {
  std::string transcript;
  std::string semantics;
  FeatureMatrix features;
};

// One deterministic utterance for (split salt, index).
SynthUtterance synth_utterance(const SynthConfig& cfg, const SynthLexicon& lex, std::mt19937_64& rng);

// Writes DIR/{train,dev,test[,asr]}.jsonl and DIR/features/*.fea.
void synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

struct EditWeights {
  double substitute = 1.0;
  double remove = 1.0;
  double insert = 1.0;
};

// Each word independently, with probability `wer`, receives one edit drawn by
// `weights`: replaced by a different vocabulary word, deleted, or followed by an
// inserted vocabulary word. An empty transcript gets one insertion trial.
std::string wer_channel(std::string_view transcript, double wer, std::mt19937_64& rng,
                        const std::vector<std::string>& vocabulary,
                        const EditWeights& weights = {});

std::vector<std::string> split_words(std::string_view text);
std::size_t word_edit_distance(const std::vector<std::string>& ref,
                               const std::vector<std::string>& hyp);
// Σ edit distance / Σ reference words.
double corpus_wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

}  // namespace sicsf
