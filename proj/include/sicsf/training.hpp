// SPDX-License-Identifier: Apache-2.0
//
// Teacher-forced NLL, Adam with two learning-rate groups (encoder; decoder plus
// adapters), linear warmup into cosine decay, and the epoch loop.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sicsf/model.hpp"

namespace sicsf {

template <typename T>
struct TrainingLoss {
  Tensor<T> value;  // scalar: summed NLL / tokens
  std::size_t tokens = 0;
};

// Σ_i -log softmax(logits[i])[targets[i+1]] over i with targets[i+1] != PAD.
// logits must have targets.size() - 1 rows.
template <typename T>
Tensor<T> nll_sum(const Tensor<T>& logits, std::span<const int> targets);

// nll_sum divided by the number of non-PAD predicted tokens.
template <typename T>
TrainingLoss<T> nll_teacher_forcing_loss(const Tensor<T>& logits, std::span<const int> targets);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct OptimState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::uint64_t step = 0;
  std::vector<Moments> moments;  // indexed like ParameterStore::entries()
};

// Learning rate for a parameter, by name.
using LearningRateFn = std::function<double(const std::string& name)>;

// One bias-corrected Adam update of every trainable parameter that holds a
// gradient. Non-trainable parameters and their moments are left untouched.
// Throws NumericError naming the parameter on a non-finite gradient.
template <typename T>
void adam_step(ParameterStore<T>& params, OptimState& state, const LearningRateFn& lr,
               const AdamConfig& cfg = {});

// Rescales all trainable gradients so their global L2 norm is at most
// max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm);

struct ScheduleConfig {
  double peak_lr_enc = 2e-4;
  double peak_lr_dec = 3e-4;
  std::size_t warmup_steps = 2000;
  std::size_t total_steps = 20000;
  double min_lr = 0.0;
};

struct GroupRates {
  double encoder = 0.0;
  double decoder = 0.0;
};

// Linear 0 -> peak over [0, warmup], cosine from peak down to min_lr at
// total_steps, min_lr afterwards.
GroupRates lr_at(std::size_t step, const ScheduleConfig& sc);

// Warmup actually used for a run: 200 steps when the run is shorter than
// 2000 steps and the configured warmup would not fit.
std::size_t effective_warmup(std::size_t configured, std::size_t total_steps);

// Encoder group: encoder parameters other than adapters.
bool in_encoder_group(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double lr_enc = 2e-4;
  double lr_dec = 3e-4;
  std::size_t warmup_steps = 2000;
  double min_lr = 0.0;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  AdamConfig adam;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr_enc = 0.0;
  double lr_dec = 0.0;
  double train_loss = 0.0;
  std::optional<double> dev_intent_acc;
  std::optional<double> dev_f1;
};

std::string epoch_log_header();
std::string epoch_log_csv(const EpochLog& log);

// A pre-tokenised training pair.
struct TrainExample {
  const Example* example = nullptr;
  std::vector<int> targets;  // BOS ... EOS
};

template <typename T>
std::vector<TrainExample> make_train_examples(const ModelBundle<T>& model,
                                              const std::vector<Example>& data,
                                              std::string (*target_of)(const Example&) = nullptr);

// Runs after each epoch; may fill the dev scores. Returning true stops training.
template <typename T>
using EpochHook = std::function<bool(const ModelBundle<T>&, EpochLog&)>;

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
};

// Shuffled (seeded) mini-batches; the loss of a batch is its summed NLL over
// its total target-token count. Throws NumericError if the loss goes
// non-finite, naming the step.
template <typename T>
TrainResult train(ModelBundle<T>& model, const std::vector<TrainExample>& data,
                  const TrainConfig& cfg, const EpochHook<T>& hook = {});

}  // namespace sicsf
