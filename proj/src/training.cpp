// SPDX-License-Identifier: Apache-2.0

#include "sicsf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "sicsf/errors.hpp"
#include "sicsf/seed.hpp"

namespace sicsf {

namespace {

// Next-token targets with PAD mapped to the ignored index -1.
template <typename T>
std::vector<int> shifted_targets(const Tensor<T>& logits, std::span<const int> targets) {
  if (targets.size() < 2 || logits.rank() != 2 || logits.dim(0) != targets.size() - 1) {
    throw ShapeError("teacher forcing: " + std::to_string(targets.size()) +
                     " targets need " + std::to_string(targets.size() - 1) + " logit rows, got " +
                     shape_str(logits.shape()));
  }
  std::vector<int> next(targets.begin() + 1, targets.end());
  for (auto& t : next) {
    if (t == kPadId) t = -1;
  }
  return next;
}

}  // namespace

template <typename T>
Tensor<T> nll_sum(const Tensor<T>& logits, std::span<const int> targets) {
  return cross_entropy_sum(logits, std::span<const int>(shifted_targets(logits, targets)), -1);
}

template <typename T>
TrainingLoss<T> nll_teacher_forcing_loss(const Tensor<T>& logits, std::span<const int> targets) {
  const auto next = shifted_targets(logits, targets);
  const auto tokens = static_cast<std::size_t>(
      std::count_if(next.begin(), next.end(), [](int t) { return t != -1; }));
  if (tokens == 0) throw ShapeError("teacher forcing: no non-PAD target tokens");
  return {cross_entropy_mean(logits, std::span<const int>(next), -1), tokens};
}

// ---- optimiser -------------------------------------------------------------

bool in_encoder_group(std::string_view name) {
  return is_encoder_param(name) && !is_adapter_param(name);
}

template <typename T>
void adam_step(ParameterStore<T>& params, OptimState& state, const LearningRateFn& lr,
               const AdamConfig& cfg) {
  const auto& entries = params.entries();
  if (state.moments.size() < entries.size()) state.moments.resize(entries.size());
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T> p = entries[i].tensor;
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto g = p.grad();
    for (T v : g) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient in parameter " + entries[i].name);
    }
    auto& mom = state.moments[i];
    if (mom.m.empty()) {
      mom.m.assign(p.numel(), 0.0);
      mom.v.assign(p.numel(), 0.0);
    }
    const double rate = lr(entries[i].name);
    auto data = p.mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = g[k];
      mom.m[k] = cfg.beta1 * mom.m[k] + (1.0 - cfg.beta1) * gk;
      mom.v[k] = cfg.beta2 * mom.v[k] + (1.0 - cfg.beta2) * gk * gk;
      const double mhat = mom.m[k] / bc1;
      const double vhat = mom.v[k] / bc2;
      data[k] = static_cast<T>(double(data[k]) - rate * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
    for (T v : e.tensor.grad()) sq += double(v) * double(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& e : params.entries()) {
      if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
      Tensor<T> t = e.tensor;
      for (auto& v : t.mutable_grad()) v *= factor;
    }
  }
  return norm;
}

// ---- schedule --------------------------------------------------------------

namespace {

double scheduled(double peak, std::size_t step, const ScheduleConfig& sc) {
  if (step < sc.warmup_steps) return peak * double(step) / double(sc.warmup_steps);
  if (step >= sc.total_steps) return std::min(sc.min_lr, peak);
  const double min_ratio = std::min(sc.min_lr / peak, 1.0);
  const double span = double(sc.total_steps - sc.warmup_steps);
  const double progress = span > 0 ? double(step - sc.warmup_steps) / span : 1.0;
  return peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace

GroupRates lr_at(std::size_t step, const ScheduleConfig& sc) {
  return {scheduled(sc.peak_lr_enc, step, sc), scheduled(sc.peak_lr_dec, step, sc)};
}

std::size_t effective_warmup(std::size_t configured, std::size_t total_steps) {
  if (configured < total_steps) return configured;
  return total_steps < 2000 ? std::min<std::size_t>(200, total_steps / 2) : configured;
}

// ---- epoch loop ------------------------------------------------------------

std::string epoch_log_header() { return "epoch,step,lr_enc,lr_dec,train_loss,dev_intent_acc,dev_f1"; }

std::string epoch_log_csv(const EpochLog& log) {
  std::ostringstream os;
  os.precision(9);
  os << log.epoch << ',' << log.step << ',' << log.lr_enc << ',' << log.lr_dec << ',' << log.train_loss;
  os << ',';
  if (log.dev_intent_acc) os << *log.dev_intent_acc;
  os << ',';
  if (log.dev_f1) os << *log.dev_f1;
  return os.str();
}

template <typename T>
std::vector<TrainExample> make_train_examples(const ModelBundle<T>& model,
                                              const std::vector<Example>& data,
                                              std::string (*target_of)(const Example&)) {
  std::vector<TrainExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    TrainExample te{&ex, model.output_vocab().encode(target_of ? target_of(ex) : ex.semantics, true)};
    if (te.targets.size() > model.config().max_target_len + 1) {
      throw DataError("example " + ex.id + ": target of " + std::to_string(te.targets.size()) +
                      " tokens exceeds max_target_len " +
                      std::to_string(model.config().max_target_len));
    }
    out.push_back(std::move(te));
  }
  return out;
}

template <typename T>
TrainResult train(ModelBundle<T>& model, const std::vector<TrainExample>& data,
                  const TrainConfig& cfg, const EpochHook<T>& hook) {
  if (data.empty()) throw DataError("training set is empty");
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw ConfigError("epochs and batch_size must be >= 1");
  const std::size_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  ScheduleConfig sc;
  sc.peak_lr_enc = cfg.lr_enc;
  sc.peak_lr_dec = cfg.lr_dec;
  sc.total_steps = batches_per_epoch * cfg.epochs;
  sc.warmup_steps = effective_warmup(cfg.warmup_steps, sc.total_steps);
  sc.min_lr = cfg.min_lr;

  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, "dropout"));
  ForwardContext<T> ctx;
  ctx.dropout = static_cast<T>(model.config().dropout);
  ctx.rng = &dropout_rng;

  auto& params = model.params();
  for (const auto& e : params.entries()) {
    Tensor<T> t = e.tensor;
    t.zero_grad();
  }
  OptimState state;
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    GroupRates rates;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, data.size());
      std::size_t tokens = 0;
      for (std::size_t i = begin; i < end; ++i) tokens += data[order[i]].targets.size() - 1;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& te = data[order[i]];
        const auto enc = model.encode_example(*te.example, ctx);
        const std::span<const int> prefix(te.targets.data(), te.targets.size() - 1);
        const Tensor<T> sum = nll_sum(model.decode_logits(prefix, enc, ctx), te.targets);
        const double value = sum.item();
        if (!std::isfinite(value)) {
          throw NumericError("training loss became non-finite at step " +
                             std::to_string(result.steps + 1) + " (example " + te.example->id + ")");
        }
        epoch_loss += value;
        backward(scale(sum, T(1) / T(tokens)));
      }
      epoch_tokens += tokens;
      rates = lr_at(result.steps, sc);
      if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, state,
                [&](const std::string& name) { return in_encoder_group(name) ? rates.encoder : rates.decoder; },
                cfg.adam);
      for (const auto& e : params.entries()) {
        Tensor<T> t = e.tensor;
        t.zero_grad();
      }
      ++result.steps;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = result.steps;
    log.lr_enc = rates.encoder;
    log.lr_dec = rates.decoder;
    log.train_loss = epoch_loss / double(epoch_tokens);
    const bool stop = hook ? hook(model, log) : false;
    result.epochs.push_back(log);
    if (stop) break;
  }
  return result;
}

#define SICSF_INSTANTIATE(T)                                                                    \
  template Tensor<T> nll_sum(const Tensor<T>&, std::span<const int>);                           \
  template TrainingLoss<T> nll_teacher_forcing_loss(const Tensor<T>&, std::span<const int>);    \
  template void adam_step(ParameterStore<T>&, OptimState&, const LearningRateFn&,               \
                          const AdamConfig&);                                                   \
  template double clip_grad_norm(ParameterStore<T>&, double);                                   \
  template std::vector<TrainExample> make_train_examples(                                       \
      const ModelBundle<T>&, const std::vector<Example>&, std::string (*)(const Example&));     \
  template TrainResult train(ModelBundle<T>&, const std::vector<TrainExample>&,                 \
                             const TrainConfig&, const EpochHook<T>&);

SICSF_INSTANTIATE(float)
SICSF_INSTANTIATE(double)

}  // namespace sicsf
