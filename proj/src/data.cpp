// SPDX-License-Identifier: Apache-2.0

#include "sicsf/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sicsf/errors.hpp"
#include "sicsf/seed.hpp"
#include "sicsf/semantics.hpp"

namespace sicsf {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- FEA1 ------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kFeaMagic{'F', 'E', 'A', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

}  // namespace

void write_features(const fs::path& path, const FeatureMatrix& f) {
  if (f.frames == 0 || f.dim == 0) throw DataError("refusing to write empty features: " + path.string());
  if (f.values.size() != f.frames * f.dim || f.valid_len > f.frames) {
    throw DataError("inconsistent feature matrix for " + path.string());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kFeaMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(f.frames));
  put_u32(out, static_cast<std::uint32_t>(f.dim));
  put_u32(out, static_cast<std::uint32_t>(f.valid_len));
  for (float v : f.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw DataError("write failed: " + path.string());
}

FeatureMatrix read_features(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kFeaMagic.data(), 4) != 0) {
    throw DataError(path.string() + ": bad magic, expected FEA1");
  }
  FeatureMatrix f;
  f.frames = get_u32(&bytes[4]);
  f.dim = get_u32(&bytes[8]);
  f.valid_len = get_u32(&bytes[12]);
  if (f.frames == 0 || f.dim == 0) throw DataError(path.string() + ": empty feature matrix");
  if (f.valid_len > f.frames) throw DataError(path.string() + ": valid_len exceeds frame count");
  const std::size_t n = f.frames * f.dim;
  if (bytes.size() != 16 + 4 * n) {
    throw DataError(path.string() + ": payload has " + std::to_string(bytes.size() - 16) +
                    " bytes, expected " + std::to_string(4 * n));
  }
  f.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) f.values[i] = std::bit_cast<float>(get_u32(&bytes[16 + 4 * i]));
  return f;
}

// ---- manifests -------------------------------------------------------------

fs::path split_path(const fs::path& dir, std::string_view split) {
  return dir / (std::string(split) + ".jsonl");
}

void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& r : rows) {
    json j = {{"id", r.id},
              {"features", r.features},
              {"transcript", r.transcript},
              {"semantics", r.semantics},
              {"duration_frames", r.duration_frames}};
    out << j.dump() << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + "invalid JSON (" + e.what() + ")");
    }
    ManifestRow r;
    try {
      r.id = j.at("id").get<std::string>();
      r.features = j.value("features", std::string());
      r.transcript = j.value("transcript", std::string());
      r.semantics = j.at("semantics").get<std::string>();
      r.duration_frames = j.value("duration_frames", std::size_t{0});
    } catch (const json::exception& e) {
      throw DataError(where + "bad or missing field (" + e.what() + ")");
    }
    if (canonicalize(r.semantics) != r.semantics) {
      throw DataError(where + "semantics is not in canonical form: " + r.semantics);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<Example> load_manifest(const fs::path& path, bool with_features) {
  const auto rows = read_manifest(path);
  std::vector<Example> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    Example ex{r.id, {}, r.transcript, r.semantics};
    if (with_features) {
      if (r.features.empty()) throw DataError(path.string() + ": row " + r.id + " has no features");
      ex.features = read_features(path.parent_path() / r.features);
      if (ex.features.frames != r.duration_frames) {
        throw DataError(path.string() + ": row " + r.id + " declares " +
                        std::to_string(r.duration_frames) + " frames, file has " +
                        std::to_string(ex.features.frames));
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- synthetic task --------------------------------------------------------

namespace {

const std::vector<std::string> kScenarioPool{
    "alarm", "weather", "music",   "calendar", "email",     "iot",    "lists",   "news", "transport",
    "cooking", "general", "social", "takeaway", "qa",      "datetime", "audio", "play", "recommendation"};
const std::vector<std::string> kActionPool{"set",    "query", "remove", "create", "play",
                                           "send",   "cancel", "check", "add",    "stop",
                                           "search", "turn_on", "turn_off", "update", "open"};
const std::vector<std::string> kSlotPool{"time",        "date",        "place_name",
                                         "person",      "device_type", "song_name",
                                         "event_name",  "food_type",   "transport_type",
                                         "weather_descriptor", "relation", "media_type"};

constexpr std::size_t kSynonyms = 2;

// Pronounceable consonant-vowel words, unique within one lexicon.
class WordMaker {
 public:
  explicit WordMaker(std::uint64_t seed) : rng_(seed) {}

  std::string next() {
    static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
    static constexpr std::string_view kVowels = "aeiou";
    std::uniform_int_distribution<int> syllables(2, 3);
    for (;;) {
      std::string w;
      for (int s = syllables(rng_); s > 0; --s) {
        w.push_back(kOnsets[pick(kOnsets.size())]);
        w.push_back(kVowels[pick(kVowels.size())]);
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

  std::mt19937_64 rng_;
  std::set<std::string> used_;
};

template <typename T>
const T& choose(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(n_scenarios >= 1 && n_actions >= 1 && n_slot_types >= 1 && word_vocab >= 1,
       "synthetic counts must all be >= 1");
  need(n_scenarios <= kScenarioPool.size(),
       "n_scenarios " + std::to_string(n_scenarios) + " exceeds the " +
           std::to_string(kScenarioPool.size()) + " available scenario names");
  need(n_actions <= kActionPool.size(), "n_actions " + std::to_string(n_actions) +
                                            " exceeds the " + std::to_string(kActionPool.size()) +
                                            " available action names");
  need(n_slot_types <= kSlotPool.size(), "n_slot_types " + std::to_string(n_slot_types) +
                                             " exceeds the " + std::to_string(kSlotPool.size()) +
                                             " available slot types");
  need(word_vocab >= n_slot_types, "word_vocab " + std::to_string(word_vocab) +
                                       " is too small: need at least one filler word per slot type (" +
                                       std::to_string(n_slot_types) + ")");
  need(train_samples >= 1 && dev_samples >= 1 && test_samples >= 1, "split sizes must be >= 1");
  need(feature_dim >= 1 && frames_per_token >= 1, "feature_dim and frames_per_token must be >= 1");
  need(noise_sigma >= 0.0, "noise_sigma must be >= 0");
}

std::vector<std::string> SynthLexicon::all_words() const {
  std::vector<std::string> out;
  auto add = [&](const std::vector<std::string>& v) { out.insert(out.end(), v.begin(), v.end()); };
  for (const auto& v : scenario_words) add(v);
  for (const auto& v : action_words) add(v);
  add(cue_words);
  for (const auto& v : filler_words) add(v);
  add(function_words);
  return out;
}

SynthLexicon make_lexicon(const SynthConfig& cfg) {
  cfg.validate();
  WordMaker maker(derive_seed(cfg.seed, "lexicon"));
  SynthLexicon lex;
  lex.scenarios.assign(kScenarioPool.begin(), kScenarioPool.begin() + cfg.n_scenarios);
  lex.actions.assign(kActionPool.begin(), kActionPool.begin() + cfg.n_actions);
  lex.slot_types.assign(kSlotPool.begin(), kSlotPool.begin() + cfg.n_slot_types);
  auto synonyms = [&] {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < kSynonyms; ++i) v.push_back(maker.next());
    return v;
  };
  for (std::size_t i = 0; i < cfg.n_scenarios; ++i) lex.scenario_words.push_back(synonyms());
  for (std::size_t i = 0; i < cfg.n_actions; ++i) lex.action_words.push_back(synonyms());
  lex.filler_words.resize(cfg.n_slot_types);
  for (std::size_t t = 0; t < cfg.n_slot_types; ++t) lex.cue_words.push_back(maker.next());
  for (std::size_t w = 0; w < cfg.word_vocab; ++w) {
    lex.filler_words[w % cfg.n_slot_types].push_back(maker.next());
  }
  for (int i = 0; i < 3; ++i) lex.function_words.push_back(maker.next());
  return lex;
}

std::vector<float> word_codebook(const SynthConfig& cfg, std::string_view word) {
  std::mt19937_64 rng(derive_seed(cfg.seed, std::string("codebook:") + std::string(word)));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(cfg.feature_dim);
  for (auto& x : v) x = dist(rng);
  return v;
}

SynthUtterance synth_utterance(const SynthConfig& cfg, const SynthLexicon& lex,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t scenario = std::uniform_int_distribution<std::size_t>(0, lex.scenarios.size() - 1)(rng);
  const std::size_t action = std::uniform_int_distribution<std::size_t>(0, lex.actions.size() - 1)(rng);

  std::vector<std::string> words;
  if (coin(rng) < 0.3) words.push_back(lex.function_words[0]);
  words.push_back(choose(lex.action_words[action], rng));
  if (coin(rng) < 0.5) words.push_back(lex.function_words[1]);
  words.push_back(choose(lex.scenario_words[scenario], rng));

  const double r = coin(rng);
  std::size_t n_entities = r < 0.3 ? 0 : (r < 0.75 ? 1 : 2);
  n_entities = std::min(n_entities, lex.slot_types.size());
  std::vector<std::size_t> types(lex.slot_types.size());
  for (std::size_t i = 0; i < types.size(); ++i) types[i] = i;
  std::shuffle(types.begin(), types.end(), rng);

  std::vector<Entity> entities;
  for (std::size_t e = 0; e < n_entities; ++e) {
    const std::size_t type = types[e];
    if (e > 0 && coin(rng) < 0.5) words.push_back(lex.function_words[2]);
    words.push_back(lex.cue_words[type]);
    std::vector<std::string> filler{choose(lex.filler_words[type], rng)};
    if (coin(rng) < 0.4) filler.push_back(choose(lex.filler_words[type], rng));
    words.insert(words.end(), filler.begin(), filler.end());
    entities.push_back({lex.slot_types[type], join_words(filler)});
  }

  SynthUtterance u;
  u.transcript = join_words(words);
  u.semantics = flatten(SemanticsRecord::make(lex.scenarios[scenario], lex.actions[action],
                                              std::move(entities)));
  auto& f = u.features;
  f.dim = cfg.feature_dim;
  f.frames = words.size() * cfg.frames_per_token;
  f.valid_len = f.frames;
  f.values.reserve(f.frames * f.dim);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  const float sigma = static_cast<float>(cfg.noise_sigma);
  for (const auto& w : words) {
    const auto code = word_codebook(cfg, w);
    for (std::size_t k = 0; k < cfg.frames_per_token; ++k) {
      for (float c : code) f.values.push_back(sigma > 0.0f ? c + sigma * noise(rng) : c);
    }
  }
  return u;
}

void synth_generate(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const SynthLexicon lex = make_lexicon(cfg);
  fs::create_directories(out_dir / "features");
  const std::pair<const char*, std::size_t> splits[] = {{"train", cfg.train_samples},
                                                        {"dev", cfg.dev_samples},
                                                        {"test", cfg.test_samples},
                                                        {"asr", cfg.asr_samples}};
  for (const auto& [split, count] : splits) {
    if (count == 0) continue;
    std::mt19937_64 rng(derive_seed(cfg.seed, std::string("split:") + split));
    std::vector<ManifestRow> rows;
    for (std::size_t i = 0; i < count; ++i) {
      SynthUtterance u = synth_utterance(cfg, lex, rng);
      std::ostringstream id;
      id << split << '_' << std::setw(5) << std::setfill('0') << i;
      const std::string rel = "features/" + id.str() + ".fea";
      write_features(out_dir / rel, u.features);
      rows.push_back({id.str(), rel, u.transcript, u.semantics, u.features.frames});
    }
    write_manifest(split_path(out_dir, split), rows);
  }
}

// ---- noise channel and WER -------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string wer_channel(std::string_view transcript, double wer, std::mt19937_64& rng,
                        const std::vector<std::string>& vocabulary, const EditWeights& weights) {
  if (!(wer >= 0.0 && wer <= 1.0)) throw ConfigError("target WER must be in [0, 1]");
  const auto words = split_words(transcript);
  if (wer == 0.0) return join_words(words);
  if (vocabulary.empty()) throw ConfigError("noise channel needs a non-empty vocabulary");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::discrete_distribution<int> kind({weights.substitute, weights.remove, weights.insert});
  auto random_word = [&] { return choose(vocabulary, rng); };
  auto different_word = [&](const std::string& w) {
    if (vocabulary.size() == 1 && vocabulary[0] == w) return w;
    for (;;) {
      auto c = random_word();
      if (c != w) return c;
    }
  };

  std::vector<std::string> out;
  if (words.empty()) {
    if (coin(rng) < wer) out.push_back(random_word());
    return join_words(out);
  }
  for (const auto& w : words) {
    if (coin(rng) >= wer) {
      out.push_back(w);
      continue;
    }
    switch (kind(rng)) {
      case 0: out.push_back(different_word(w)); break;
      case 1: break;
      default:
        out.push_back(w);
        out.push_back(random_word());
    }
  }
  return join_words(out);
}

std::size_t word_edit_distance(const std::vector<std::string>& ref,
                               const std::vector<std::string>& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double corpus_wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) throw ShapeError("corpus_wer: reference/hypothesis count mismatch");
  std::size_t errors = 0, total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = split_words(refs[i]);
    errors += word_edit_distance(r, split_words(hyps[i]));
    total += r.size();
  }
  return total == 0 ? 0.0 : double(errors) / double(total);
}

}  // namespace sicsf
