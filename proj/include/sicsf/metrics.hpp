// SPDX-License-Identifier: Apache-2.0
//
// Intent accuracy and entity precision/recall/F1 over semantics records.
// Exact mode matches (type, filler) multisets; distance mode gives partial
// credit by the token-level F1 of same-type fillers under an optimal
// one-to-one matching.

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sicsf/semantics.hpp"

namespace sicsf {

enum class MatchMode { kExact, kWord, kChar };

MatchMode parse_match_mode(std::string_view name);  // "exact" | "word" | "char"
std::string_view match_mode_name(MatchMode mode);

// Micro-averaged counts; tp may be fractional in distance modes. Undefined
// precision or recall is reported as 0.
struct PRF {
  double tp = 0.0, fp = 0.0, fn = 0.0;
  double precision() const;
  double recall() const;
  double f1() const;
  PRF& operator+=(const PRF& other);
};

// Lowercases and collapses runs of whitespace to one space, trimmed.
std::string normalize_filler(std::string_view filler);

// F1 of the multiset overlap of two fillers' words (kWord) or non-space
// characters (kChar), after normalisation. Two empty fillers score 1.
double filler_similarity(std::string_view a, std::string_view b, MatchMode level);

// Maximum total weight of a one-to-one matching between rows and columns of
// weights (rows × cols, row-major, non-negative). Optimal up to 20 per side,
// greedy beyond.
double max_weight_matching(const std::vector<double>& weights, std::size_t rows, std::size_t cols);

// Throw std::invalid_argument when the lengths differ.
double intent_accuracy(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds);
PRF entity_prf_exact(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds);
PRF entity_prf_distance(std::span<const SemanticsRecord> preds,
                        std::span<const SemanticsRecord> golds, MatchMode level);
PRF entity_prf(const SemanticsRecord& pred, const SemanticsRecord& gold, MatchMode mode);

struct ScenarioRow {
  std::size_t count = 0;
  std::size_t intent_correct = 0;
  PRF exact;
};

struct EvalReport {
  std::size_t count = 0;
  double intent_accuracy = 0.0;
  PRF exact, word, chars;
  std::map<std::string, ScenarioRow> per_scenario;  // keyed by gold scenario
  MatchMode headline = MatchMode::kExact;

  const PRF& entities(MatchMode mode) const;
};

EvalReport evaluate(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds,
                    MatchMode headline = MatchMode::kExact);

std::string format_report_table(const EvalReport& report);
std::string report_json(const EvalReport& report);

// Non-empty lines of a prediction file, in order; blank lines count as rows.
std::vector<std::string> read_prediction_lines(const std::filesystem::path& path);

// `gold` is either a manifest (.jsonl, semantics field) or a file of one
// semantics string per line. Both sides go through parse_semantics. Throws
// DataError on unreadable files or a row-count mismatch.
EvalReport score_files(const std::filesystem::path& pred, const std::filesystem::path& gold,
                       MatchMode mode = MatchMode::kExact);

}  // namespace sicsf
