// SPDX-License-Identifier: Apache-2.0

#include "sicsf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "sicsf/errors.hpp"

namespace sicsf {

namespace {

void parse_value(std::string_view text, std::size_t& out) {
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw std::invalid_argument("expected a non-negative integer");
  }
}

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds parse as std::size_t");

void parse_value(std::string_view text, double& out) {
  std::size_t used = 0;
  const std::string s(text);
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected a number");
  }
  if (used != s.size()) throw std::invalid_argument("expected a number");
}

void parse_value(std::string_view text, bool& out) {
  if (text == "true" || text == "1" || text == "yes") {
    out = true;
  } else if (text == "false" || text == "0" || text == "no") {
    out = false;
  } else {
    throw std::invalid_argument("expected true or false");
  }
}

std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename V>
Field field(std::string section, std::string key, V RunConfig::*member) {
  return {std::move(section), std::move(key),
          [member](RunConfig& c, std::string_view t) { parse_value(t, c.*member); },
          [member](const RunConfig& c) { return format_value(c.*member); }};
}

template <typename S, typename V>
Field field(std::string section, std::string key, S RunConfig::*sub, V S::*member) {
  return {std::move(section), std::move(key),
          [sub, member](RunConfig& c, std::string_view t) { parse_value(t, (c.*sub).*member); },
          [sub, member](const RunConfig& c) { return format_value((c.*sub).*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using R = RunConfig;
    std::vector<Field> f;
    f.push_back(field("model", "d_model", &R::model, &ModelConfig::d_model));
    f.push_back(field("model", "heads", &R::model, &ModelConfig::heads));
    f.push_back(field("model", "ffn_mult", &R::model, &ModelConfig::ffn_mult));
    f.push_back(field("model", "enc_layers", &R::model, &ModelConfig::n_enc_layers));
    f.push_back(field("model", "dec_layers", &R::model, &ModelConfig::n_dec_layers));
    f.push_back(field("model", "conv_kernel", &R::model, &ModelConfig::conv_kernel));
    f.push_back(field("model", "subsample_factor", &R::model, &ModelConfig::subsample_factor));
    f.push_back(field("model", "feature_dim", &R::model, &ModelConfig::feature_dim));
    f.push_back(field("model", "rel_pos_clip", &R::model, &ModelConfig::rel_pos_clip));
    f.push_back(field("model", "adapters", &R::model, &ModelConfig::adapters));
    f.push_back(field("model", "adapter_bottleneck", &R::model, &ModelConfig::adapter_bottleneck));
    f.push_back(field("model", "max_target_len", &R::model, &ModelConfig::max_target_len));
    f.push_back(field("model", "dropout", &R::model, &ModelConfig::dropout));
    f.push_back(field("model", "vocab_size", &R::vocab_size));
    f.push_back(field("model", "asr_vocab_size", &R::asr_vocab_size));
    f.push_back(field("model", "nlu_enc_layers", &R::nlu_enc_layers));
    f.push_back(field("model", "nlu_input_vocab_size", &R::nlu_input_vocab_size));
    f.push_back(field("model", "nlu_output_vocab_size", &R::nlu_output_vocab_size));

    f.push_back(field("train", "epochs", &R::train, &TrainConfig::epochs));
    f.push_back(field("train", "batch_size", &R::train, &TrainConfig::batch_size));
    f.push_back(field("train", "lr_enc", &R::train, &TrainConfig::lr_enc));
    f.push_back(field("train", "lr_dec", &R::train, &TrainConfig::lr_dec));
    f.push_back(field("train", "warmup_steps", &R::train, &TrainConfig::warmup_steps));
    f.push_back(field("train", "min_lr", &R::train, &TrainConfig::min_lr));
    f.push_back(field("train", "clip_norm", &R::train, &TrainConfig::clip_norm));
    f.push_back(field("train", "seed", &R::train, &TrainConfig::seed));
    f.push_back(Field{"train", "adam_beta1",
                      [](R& c, std::string_view t) { parse_value(t, c.train.adam.beta1); },
                      [](const R& c) { return format_value(c.train.adam.beta1); }});
    f.push_back(Field{"train", "adam_beta2",
                      [](R& c, std::string_view t) { parse_value(t, c.train.adam.beta2); },
                      [](const R& c) { return format_value(c.train.adam.beta2); }});
    f.push_back(Field{"train", "adam_eps",
                      [](R& c, std::string_view t) { parse_value(t, c.train.adam.eps); },
                      [](const R& c) { return format_value(c.train.adam.eps); }});
    f.push_back(field("train", "asr_epochs", &R::asr_epochs));

    f.push_back(field("decode", "beam", &R::decode, &BeamConfig::width));
    f.push_back(field("decode", "temperature", &R::decode, &BeamConfig::temperature));
    f.push_back(field("decode", "max_len", &R::decode, &BeamConfig::max_len));
    f.push_back(field("decode", "len_norm_alpha", &R::decode, &BeamConfig::len_norm_alpha));
    f.push_back(field("decode", "greedy", &R::greedy));

    f.push_back(field("data", "seed", &R::data, &SynthConfig::seed));
    f.push_back(field("data", "n_scenarios", &R::data, &SynthConfig::n_scenarios));
    f.push_back(field("data", "n_actions", &R::data, &SynthConfig::n_actions));
    f.push_back(field("data", "n_slot_types", &R::data, &SynthConfig::n_slot_types));
    f.push_back(field("data", "word_vocab", &R::data, &SynthConfig::word_vocab));
    f.push_back(field("data", "train", &R::data, &SynthConfig::train_samples));
    f.push_back(field("data", "dev", &R::data, &SynthConfig::dev_samples));
    f.push_back(field("data", "test", &R::data, &SynthConfig::test_samples));
    f.push_back(field("data", "asr_samples", &R::data, &SynthConfig::asr_samples));
    f.push_back(field("data", "feature_dim", &R::data, &SynthConfig::feature_dim));
    f.push_back(field("data", "frames_per_token", &R::data, &SynthConfig::frames_per_token));
    f.push_back(field("data", "noise_sigma", &R::data, &SynthConfig::noise_sigma));
    return f;
  }();
  return table;
}

void set_key(RunConfig& cfg, std::string_view section, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.section != section || f.key != key) continue;
    try {
      f.set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(section) + "." + std::string(key) + " = '" + std::string(value) +
                        "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key " + std::string(section) + "." + std::string(key));
}

}  // namespace

void RunConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  try {
    model.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }
  try {
    data.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }
  check(model.feature_dim == data.feature_dim, "model.feature_dim must equal data.feature_dim");
  check(vocab_size >= 1 && asr_vocab_size >= 1 && nlu_input_vocab_size >= 1 && nlu_output_vocab_size >= 1,
        "vocabulary sizes must be >= 1");
  check(nlu_enc_layers >= 1, "model.nlu_enc_layers must be >= 1");
  check(train.epochs >= 1, "train.epochs must be >= 1");
  check(train.batch_size >= 1, "train.batch_size must be >= 1");
  check(train.lr_enc > 0 && train.lr_dec > 0, "learning rates must be > 0");
  check(train.min_lr >= 0, "train.min_lr must be >= 0");
  check(train.clip_norm >= 0, "train.clip_norm must be >= 0");
  check(train.adam.beta1 >= 0 && train.adam.beta1 < 1 && train.adam.beta2 >= 0 && train.adam.beta2 < 1,
        "Adam betas must be in [0, 1)");
  check(train.adam.eps > 0, "train.adam_eps must be > 0");
  check(asr_epochs >= 1, "train.asr_epochs must be >= 1");
  check(decode.width >= 1, "decode.beam must be >= 1");
  check(decode.temperature > 0, "decode.temperature must be > 0");
  check(decode.max_len >= 1 && decode.max_len <= model.max_target_len,
        "decode.max_len must be in [1, model.max_target_len]");
  if (problems.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

ModelConfig RunConfig::nlu_model() const {
  ModelConfig m = model;
  m.kind = ModelKind::kNlu;
  m.n_enc_layers = nlu_enc_layers;
  m.adapters = false;
  return m;
}

RunConfig parse_run_config(std::string_view ini_text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(ini_text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' outside a section");
    }
    for (const auto& [key, value] : body) set_key(cfg, section, key, value.data());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_run_config(os.str());
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw ConfigError("override '" + std::string(assignment) + "' is not section.key=value");
  }
  set_key(cfg, assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1),
          assignment.substr(eq + 1));
}

std::string dump_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      if (!current.empty()) os << "\n";
      os << "[" << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace sicsf
