// SPDX-License-Identifier: Apache-2.0
//
// sicsf: data synthesis, tokenizer and model training, prediction, scoring
// and the cascade experiment.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sicsf/config.hpp"
#include "sicsf/errors.hpp"
#include "sicsf/pipeline.hpp"

namespace {

using namespace sicsf;
namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config, "INI run configuration");
  cmd->add_option("--set", opts.overrides, "Override section.key=value (repeatable)");
}

RunConfig resolve(const CommonOptions& opts) {
  RunConfig cfg = opts.config.empty() ? RunConfig{} : load_run_config(opts.config);
  for (const auto& o : opts.overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

void print_config(const RunConfig& cfg) {
  std::cerr << "# effective configuration\n" << dump_run_config(cfg) << "\n";
}

void print_counts(const Model& m) {
  std::cout << "trainable parameters: " << m.trainable_params() << " / " << m.total_params() << " ("
            << 100.0 * double(m.trainable_params()) / double(m.total_params()) << "%)\n";
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

// ---- commands --------------------------------------------------------------

struct SynthArgs {
  CommonOptions common;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const RunConfig cfg = resolve(a.common);
  print_config(cfg);
  synth_generate(cfg.data, a.out);
  std::cout << "wrote " << cfg.data.train_samples << "/" << cfg.data.dev_samples << "/"
            << cfg.data.test_samples << " train/dev/test examples to " << a.out << "\n";
  return kOk;
}

struct TokenizerArgs {
  CommonOptions common;
  std::string data, out, target = "semantics";
  std::optional<std::size_t> vocab_size;
};

int cmd_train_tokenizer(const TokenizerArgs& a) {
  const RunConfig cfg = resolve(a.common);
  const auto train = load_manifest(split_path(a.data, "train"), false);
  const bool transcripts = a.target == "transcript";
  const std::size_t size = a.vocab_size.value_or(transcripts ? cfg.asr_vocab_size : cfg.vocab_size);
  const Vocab v = transcripts ? transcript_vocab(train, size) : semantics_vocab(train, size);
  v.save(a.out);
  std::cout << "vocabulary of " << v.piece_count() << " pieces (+" << kNumSpecials << " specials) -> "
            << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  CommonOptions common;
  std::string data, out, log, init_encoder, vocab;
  bool freeze_encoder = false, adapters = false;
  std::optional<std::size_t> epochs;
  bool no_dev = false;
};

int run_training(const TrainArgs& a, bool asr_proxy) {
  RunConfig cfg = resolve(a.common);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (asr_proxy) cfg.train.epochs = a.epochs.value_or(cfg.asr_epochs);
  if (a.adapters) cfg.model.adapters = true;
  cfg.validate();
  print_config(cfg);

  Dataset ds = load_dataset(a.data);
  const std::vector<Example> train_set = asr_proxy ? asr_training_set(a.data, ds) : ds.train;
  Vocab vocab = !a.vocab.empty() ? Vocab::load(a.vocab)
                : asr_proxy      ? transcript_vocab(train_set, cfg.asr_vocab_size)
                                 : semantics_vocab(ds.train, cfg.vocab_size);
  Model model = Model::build(cfg.model, std::move(vocab), std::nullopt, cfg.train.seed);
  if (!a.init_encoder.empty()) {
    const Model source = load_checkpoint<float>(a.init_encoder);
    model.init_encoder_from(source);
  }
  if (a.freeze_encoder) model.freeze_encoder(a.adapters);
  print_counts(model);

  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  std::ofstream log = open_output(log_path);
  const std::vector<Example>* dev = a.no_dev ? nullptr : &ds.dev;
  const auto run = train_with_dev(model, train_set, dev, cfg.train, &log, {},
                                  asr_proxy ? &transcript_target : nullptr, cfg.decode.max_len);
  const auto& last = run.result.epochs.back();
  std::cout << "epochs " << run.result.epochs.size() << ", steps " << run.result.steps
            << ", final train loss " << last.train_loss;
  if (last.dev_f1) {
    std::cout << ", dev intent accuracy " << *last.dev_intent_acc << ", dev F1 " << *last.dev_f1;
  }
  std::cout << "\n";
  if (asr_proxy && dev != nullptr) {
    std::cout << "dev word error rate " << transcript_wer(model, ds.dev, cfg.decode.max_len) << "\n";
  }
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(model, a.out);
  std::cout << "checkpoint -> " << a.out << ", log -> " << log_path << "\n";
  return kOk;
}

struct PredictArgs {
  std::string ckpt, data, out, split = "test";
  std::size_t beam = 32;
  double temperature = 1.25;
  std::size_t max_len = 192;
  double len_norm_alpha = 0.0;
  bool greedy = false, jsonl = false;
};

int cmd_predict(const PredictArgs& a) {
  if (!fs::exists(a.ckpt)) throw DataError("checkpoint not found: " + a.ckpt);
  const Model model = load_checkpoint<float>(a.ckpt);
  const auto examples = load_manifest(split_path(a.data, a.split));
  DecodeOptions opts{a.greedy, BeamConfig{a.beam, a.temperature, a.max_len, a.len_norm_alpha}};
  std::ofstream out = open_output(a.out);
  for (const auto& ex : examples) {
    const std::string text = opts.greedy ? greedy_decode(model, ex, a.max_len) : beam_decode(model, ex, opts.beam);
    const std::string canonical = canonicalize(text);
    if (a.jsonl) {
      out << nlohmann::json{{"id", ex.id}, {"prediction", canonical}, {"raw", text}}.dump() << "\n";
    } else {
      out << canonical << "\n";
    }
  }
  std::cout << "wrote " << examples.size() << " predictions -> " << a.out << "\n";
  return kOk;
}

struct ScoreArgs {
  std::string pred, gold, mode = "exact", split = "test";
  bool json = false;
};

int cmd_score(const ScoreArgs& a) {
  MatchMode mode;
  try {
    mode = parse_match_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const fs::path gold = fs::is_directory(a.gold) ? split_path(a.gold, a.split) : fs::path(a.gold);
  const EvalReport r = score_files(a.pred, gold, mode);
  std::cout << (a.json ? report_json(r) + "\n" : format_report_table(r));
  return kOk;
}

struct CascadeArgs {
  CommonOptions common;
  std::string data;
  std::vector<double> wers{0.0};
  bool json = false;
};

int cmd_cascade(const CascadeArgs& a) {
  const RunConfig cfg = resolve(a.common);
  for (double w : a.wers) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("--wer values must be in [0, 1]");
  }
  print_config(cfg);
  const Dataset ds = load_dataset(a.data, false);
  nlohmann::json all = nlohmann::json::array();
  for (double w : a.wers) {
    const EvalReport r = cascade_eval(cfg, ds, w);
    if (a.json) {
      auto j = nlohmann::json::parse(report_json(r));
      j["wer"] = w;
      all.push_back(j);
    } else {
      std::cout << "== cascade, WER " << w << "\n" << format_report_table(r);
    }
  }
  if (a.json) std::cout << all.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech intent classification and slot filling toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Generate the synthetic dataset");
  add_common(c_synth, synth.common);
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  TokenizerArgs tok;
  auto* c_tok = app.add_subcommand("train-tokenizer", "Train a BPE vocabulary");
  add_common(c_tok, tok.common);
  c_tok->add_option("--data", tok.data, "Dataset directory")->required();
  c_tok->add_option("--out", tok.out, "Vocabulary file")->required();
  c_tok->add_option("--vocab-size", tok.vocab_size, "Number of pieces (default from config)");
  c_tok->add_option("--target", tok.target, "semantics or transcript")
      ->check(CLI::IsMember({"semantics", "transcript"}));

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the end-to-end model");
  TrainArgs asr;
  auto* c_asr = app.add_subcommand("asr-proxy-train", "Train encoder + decoder on transcripts");
  for (auto [cmd, args] : {std::pair{c_train, &train}, std::pair{c_asr, &asr}}) {
    add_common(cmd, args->common);
    cmd->add_option("--data", args->data, "Dataset directory")->required();
    cmd->add_option("--out", args->out, "Checkpoint path")->required();
    cmd->add_option("--log", args->log, "CSV training log (default <out>.log.csv)");
    cmd->add_option("--epochs", args->epochs, "Override train.epochs");
    cmd->add_option("--vocab", args->vocab, "Use this vocabulary file");
    cmd->add_flag("--no-dev", args->no_dev, "Skip per-epoch dev evaluation");
  }
  c_train->add_flag("--freeze-encoder", train.freeze_encoder, "Train only the decoder (and adapters)");
  c_train->add_flag("--adapters", train.adapters, "Insert adapters into the encoder");
  c_train->add_option("--init-encoder", train.init_encoder, "Initialise the encoder from a checkpoint");

  PredictArgs pred;
  auto* c_pred = app.add_subcommand("predict", "Decode a split to semantics strings");
  c_pred->add_option("--ckpt", pred.ckpt, "Checkpoint")->required();
  c_pred->add_option("--data", pred.data, "Dataset directory")->required();
  c_pred->add_option("--out", pred.out, "Prediction file")->required();
  c_pred->add_option("--split", pred.split, "Split to decode");
  c_pred->add_option("--beam", pred.beam, "Beam width")->check(CLI::PositiveNumber);
  c_pred->add_option("--temperature", pred.temperature, "Softmax temperature")->check(CLI::PositiveNumber);
  c_pred->add_option("--max-len", pred.max_len, "Maximum generated tokens")->check(CLI::PositiveNumber);
  c_pred->add_option("--len-norm-alpha", pred.len_norm_alpha, "Length normalisation exponent");
  c_pred->add_flag("--greedy", pred.greedy, "Greedy decoding");
  c_pred->add_flag("--jsonl", pred.jsonl, "Write id/prediction JSON lines");

  ScoreArgs score;
  auto* c_score = app.add_subcommand("score", "Score predictions against gold semantics");
  c_score->add_option("--pred", score.pred, "Prediction file")->required();
  c_score->add_option("--gold", score.gold, "Dataset directory, manifest or prediction-format file")->required();
  c_score->add_option("--split", score.split, "Split when --gold is a directory");
  c_score->add_option("--mode", score.mode, "exact, word or char");
  c_score->add_flag("--json", score.json, "Machine-readable report");

  CascadeArgs cascade;
  auto* c_cascade = app.add_subcommand("cascade-eval", "Train and score the text NLU model at given WERs");
  add_common(c_cascade, cascade.common);
  c_cascade->add_option("--data", cascade.data, "Dataset directory")->required();
  c_cascade->add_option("--wer", cascade.wers, "Word error rates (repeatable)")->delimiter(',');
  c_cascade->add_flag("--json", cascade.json, "Machine-readable reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_synth->parsed()) return cmd_synth(synth);
    if (c_tok->parsed()) return cmd_train_tokenizer(tok);
    if (c_train->parsed()) return run_training(train, false);
    if (c_asr->parsed()) return run_training(asr, true);
    if (c_pred->parsed()) return cmd_predict(pred);
    if (c_score->parsed()) return cmd_score(score);
    if (c_cascade->parsed()) return cmd_cascade(cascade);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
