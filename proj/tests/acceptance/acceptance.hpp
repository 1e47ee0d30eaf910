// SPDX-License-Identifier: Apache-2.0
//
// Acceptance criteria runner. Each criterion returns a verdict with the
// measured quantities next to the pinned thresholds.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sicsf/config.hpp"

namespace sicsf::acceptance {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Options {
  RunConfig config;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path work_dir;
};

Verdict gradient_correctness(const Options& opts);
Verdict loss_oracle(const Options& opts);
Verdict semantics_codec(const Options& opts);
Verdict beam_oracle(const Options& opts);
Verdict metrics_oracle(const Options& opts);
Verdict determinism_and_formats(const Options& opts);

// Criteria 6 to 9 share their training runs.
struct TrainingVerdicts {
  Verdict learnability, pretraining, adapters, cascade;
};
TrainingVerdicts training_criteria(const Options& opts, const std::vector<int>& wanted);

// "x.xxxx" with a fixed number of decimals.
std::string fmt(double v, int decimals = 4);

}  // namespace sicsf::acceptance
