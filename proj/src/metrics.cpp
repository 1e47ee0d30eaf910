// SPDX-License-Identifier: Apache-2.0

#include "sicsf/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "sicsf/data.hpp"
#include "sicsf/errors.hpp"

namespace sicsf {

MatchMode parse_match_mode(std::string_view name) {
  if (name == "exact") return MatchMode::kExact;
  if (name == "word") return MatchMode::kWord;
  if (name == "char") return MatchMode::kChar;
  throw std::invalid_argument("unknown match mode '" + std::string(name) + "' (exact|word|char)");
}

std::string_view match_mode_name(MatchMode mode) {
  switch (mode) {
    case MatchMode::kExact: return "exact";
    case MatchMode::kWord: return "word";
    case MatchMode::kChar: return "char";
  }
  return "exact";
}

double PRF::precision() const { return tp + fp > 0 ? tp / (tp + fp) : 0.0; }
double PRF::recall() const { return tp + fn > 0 ? tp / (tp + fn) : 0.0; }
double PRF::f1() const {
  const double p = precision(), r = recall();
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}
PRF& PRF::operator+=(const PRF& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

std::string normalize_filler(std::string_view filler) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : filler) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

namespace {

std::vector<std::string> filler_units(std::string_view filler, MatchMode level) {
  const std::string norm = normalize_filler(filler);
  std::vector<std::string> units;
  if (level == MatchMode::kChar) {
    for (char c : norm) {
      if (c != ' ') units.emplace_back(1, c);
    }
  } else {
    std::istringstream in(norm);
    for (std::string w; in >> w;) units.push_back(w);
  }
  std::sort(units.begin(), units.end());
  return units;
}

}  // namespace

double filler_similarity(std::string_view a, std::string_view b, MatchMode level) {
  if (level == MatchMode::kExact) return normalize_filler(a) == normalize_filler(b) ? 1.0 : 0.0;
  const auto ua = filler_units(a, level), ub = filler_units(b, level);
  if (ua.empty() && ub.empty()) return 1.0;
  if (ua.empty() || ub.empty()) return 0.0;
  std::vector<std::string> common;
  std::set_intersection(ua.begin(), ua.end(), ub.begin(), ub.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double p = double(common.size()) / double(ua.size());
  const double r = double(common.size()) / double(ub.size());
  return 2 * p * r / (p + r);
}

namespace {

// Minimum-cost assignment on an n×n matrix (Hungarian method with
// potentials). Returns col_of_row.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

constexpr std::size_t kOptimalMatchingLimit = 20;

}  // namespace

double max_weight_matching(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) return 0.0;
  if (w.size() != rows * cols) throw std::invalid_argument("matching: weight matrix size mismatch");
  if (rows <= kOptimalMatchingLimit && cols <= kOptimalMatchingLimit) {
    const std::size_t n = std::max(rows, cols);
    std::vector<double> cost(n * n, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) cost[r * n + c] = -w[r * cols + c];
    }
    const auto assign = hungarian(cost, n);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (assign[r] < cols) total += w[r * cols + assign[r]];
    }
    return total;
  }
  // Greedy: repeatedly take the heaviest remaining pair (first in row-major
  // order on ties).
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  std::vector<bool> row_used(rows, false), col_used(cols, false);
  double total = 0.0;
  for (std::size_t k : order) {
    const std::size_t r = k / cols, c = k % cols;
    if (row_used[r] || col_used[c] || w[k] <= 0.0) continue;
    row_used[r] = col_used[c] = true;
    total += w[k];
  }
  return total;
}

PRF entity_prf(const SemanticsRecord& pred, const SemanticsRecord& gold, MatchMode mode) {
  PRF out;
  const double n_pred = double(pred.entities.size());
  const double n_gold = double(gold.entities.size());
  if (mode == MatchMode::kExact) {
    std::vector<std::pair<std::string, std::string>> a, b;
    for (const auto& e : pred.entities) a.emplace_back(e.type, normalize_filler(e.filler));
    for (const auto& e : gold.entities) b.emplace_back(e.type, normalize_filler(e.filler));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::pair<std::string, std::string>> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    out.tp = double(common.size());
  } else {
    std::map<std::string, std::pair<std::vector<const Entity*>, std::vector<const Entity*>>> by_type;
    for (const auto& e : pred.entities) by_type[e.type].first.push_back(&e);
    for (const auto& e : gold.entities) by_type[e.type].second.push_back(&e);
    for (const auto& [type, group] : by_type) {
      const auto& [ps, gs] = group;
      if (ps.empty() || gs.empty()) continue;
      std::vector<double> w(ps.size() * gs.size());
      for (std::size_t i = 0; i < ps.size(); ++i) {
        for (std::size_t j = 0; j < gs.size(); ++j) {
          w[i * gs.size() + j] = filler_similarity(ps[i]->filler, gs[j]->filler, mode);
        }
      }
      out.tp += max_weight_matching(w, ps.size(), gs.size());
    }
  }
  out.fp = n_pred - out.tp;
  out.fn = n_gold - out.tp;
  return out;
}

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) {
    throw std::invalid_argument("prediction/gold length mismatch: " + std::to_string(a) + " vs " +
                                std::to_string(b));
  }
}

bool intent_correct(const SemanticsRecord& p, const SemanticsRecord& g) {
  return normalize_identifier(p.scenario) == normalize_identifier(g.scenario) &&
         normalize_identifier(p.action) == normalize_identifier(g.action);
}

}  // namespace

double intent_accuracy(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds) {
  check_lengths(preds.size(), golds.size());
  if (golds.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) correct += intent_correct(preds[i], golds[i]);
  return double(correct) / double(golds.size());
}

PRF entity_prf_exact(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds) {
  check_lengths(preds.size(), golds.size());
  PRF total;
  for (std::size_t i = 0; i < golds.size(); ++i) total += entity_prf(preds[i], golds[i], MatchMode::kExact);
  return total;
}

PRF entity_prf_distance(std::span<const SemanticsRecord> preds,
                        std::span<const SemanticsRecord> golds, MatchMode level) {
  check_lengths(preds.size(), golds.size());
  if (level == MatchMode::kExact) throw std::invalid_argument("distance mode needs word or char level");
  PRF total;
  for (std::size_t i = 0; i < golds.size(); ++i) total += entity_prf(preds[i], golds[i], level);
  return total;
}

const PRF& EvalReport::entities(MatchMode mode) const {
  switch (mode) {
    case MatchMode::kWord: return word;
    case MatchMode::kChar: return chars;
    default: return exact;
  }
}

EvalReport evaluate(std::span<const SemanticsRecord> preds, std::span<const SemanticsRecord> golds,
                    MatchMode headline) {
  check_lengths(preds.size(), golds.size());
  EvalReport r;
  r.count = golds.size();
  r.headline = headline;
  r.intent_accuracy = intent_accuracy(preds, golds);
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const PRF exact = entity_prf(preds[i], golds[i], MatchMode::kExact);
    r.exact += exact;
    r.word += entity_prf(preds[i], golds[i], MatchMode::kWord);
    r.chars += entity_prf(preds[i], golds[i], MatchMode::kChar);
    auto& row = r.per_scenario[golds[i].scenario];
    ++row.count;
    row.intent_correct += intent_correct(preds[i], golds[i]);
    row.exact += exact;
  }
  return r;
}

namespace {

nlohmann::json prf_json(const PRF& p) {
  return {{"precision", p.precision()}, {"recall", p.recall()}, {"f1", p.f1()},
          {"tp", p.tp}, {"fp", p.fp}, {"fn", p.fn}};
}

}  // namespace

std::string format_report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "utterances        " << r.count << "\n";
  os << "intent accuracy   " << 100.0 * r.intent_accuracy << "\n";
  os << "entities (" << match_mode_name(r.headline) << ")\n";
  os << "  mode    precision  recall      f1        tp        fp        fn\n";
  for (MatchMode m : {MatchMode::kExact, MatchMode::kWord, MatchMode::kChar}) {
    const PRF& p = r.entities(m);
    os << "  " << std::left << std::setw(6) << match_mode_name(m) << std::right << std::setw(11)
       << 100.0 * p.precision() << std::setw(8) << 100.0 * p.recall() << std::setw(8) << 100.0 * p.f1()
       << std::setw(10) << p.tp << std::setw(10) << p.fp << std::setw(10) << p.fn << "\n";
  }
  os << "per scenario (exact)\n";
  os << "  scenario              n   intent      f1\n";
  for (const auto& [name, row] : r.per_scenario) {
    os << "  " << std::left << std::setw(18) << name << std::right << std::setw(5) << row.count
       << std::setw(9) << 100.0 * double(row.intent_correct) / double(row.count) << std::setw(8)
       << 100.0 * row.exact.f1() << "\n";
  }
  return os.str();
}

std::string report_json(const EvalReport& r) {
  nlohmann::json j;
  j["count"] = r.count;
  j["intent_accuracy"] = r.intent_accuracy;
  j["headline_mode"] = match_mode_name(r.headline);
  j["f1"] = r.entities(r.headline).f1();
  j["exact"] = prf_json(r.exact);
  j["word"] = prf_json(r.word);
  j["char"] = prf_json(r.chars);
  nlohmann::json scen = nlohmann::json::object();
  for (const auto& [name, row] : r.per_scenario) {
    scen[name] = {{"count", row.count},
                  {"intent_accuracy", double(row.intent_correct) / double(row.count)},
                  {"exact", prf_json(row.exact)}};
  }
  j["per_scenario"] = scen;
  return j.dump(2);
}

std::vector<std::string> read_prediction_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

EvalReport score_files(const std::filesystem::path& pred, const std::filesystem::path& gold,
                       MatchMode mode) {
  std::vector<SemanticsRecord> golds;
  if (gold.extension() == ".jsonl") {
    for (const auto& row : read_manifest(gold)) golds.push_back(parse_semantics(row.semantics));
  } else {
    for (const auto& line : read_prediction_lines(gold)) golds.push_back(parse_semantics(line));
  }
  std::vector<SemanticsRecord> preds;
  for (const auto& line : read_prediction_lines(pred)) preds.push_back(parse_semantics(line));
  if (preds.size() != golds.size()) {
    throw DataError("row count mismatch: " + std::to_string(preds.size()) + " predictions in " +
                    pred.string() + ", " + std::to_string(golds.size()) + " gold rows in " +
                    gold.string());
  }
  return evaluate(preds, golds, mode);
}

}  // namespace sicsf
