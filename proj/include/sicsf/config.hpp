// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: an INI file with [model], [train], [decode] and [data]
// sections whose keys mirror the typed configs of the library. Unknown
// sections or keys are errors.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sicsf/data.hpp"
#include "sicsf/decoding.hpp"
#include "sicsf/model.hpp"
#include "sicsf/training.hpp"

namespace sicsf {

// Desk-scale training: the reference learning rates scaled by ten, keeping
// their 2:3 encoder/decoder ratio.
inline TrainConfig desk_train_config() {
  TrainConfig t;
  t.lr_enc = 2e-3;
  t.lr_dec = 3e-3;
  return t;
}

struct RunConfig {
  ModelConfig model;
  std::size_t vocab_size = 58;              // semantics output vocabulary
  std::size_t asr_vocab_size = 58;          // transcript vocabulary of the ASR proxy
  std::size_t nlu_enc_layers = 3;           // cascade text encoder depth
  std::size_t nlu_input_vocab_size = 256;   // cascade transcript vocabulary
  std::size_t nlu_output_vocab_size = 58;   // cascade semantics vocabulary

  TrainConfig train = desk_train_config();
  std::size_t asr_epochs = 20;

  BeamConfig decode;
  bool greedy = false;

  SynthConfig data;

  // Throws ConfigError listing every problem.
  void validate() const;

  // The NLU model's configuration derived from `model`.
  ModelConfig nlu_model() const;
};

// Defaults overridden by the file's keys. Throws ConfigError (with the key)
// on unknown keys or unparsable values.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(std::string_view ini_text);

// Applies "section.key=value".
void apply_override(RunConfig& cfg, std::string_view assignment);

// Every key with its effective value; parse_run_config(dump) reproduces cfg.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace sicsf
