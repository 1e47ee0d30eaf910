// SPDX-License-Identifier: Apache-2.0
//
// The end-to-end model (subsampling + Conformer encoder over features) and the
// cascade NLU model (Transformer encoder over text tokens), both feeding the
// same Transformer decoder with an untied output projection.
//
// Parameter names are dotted paths; every encoder parameter starts with
// "encoder." and adapter parameters contain ".adapter_".

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sicsf/data.hpp"
#include "sicsf/nnet.hpp"
#include "sicsf/tokenizer.hpp"

namespace sicsf {

enum class ModelKind { kEndToEnd, kNlu };

struct ModelConfig {
  ModelKind kind = ModelKind::kEndToEnd;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 3;
  std::size_t conv_kernel = 9;
  std::size_t subsample_factor = 4;
  std::size_t feature_dim = 16;
  std::size_t rel_pos_clip = 64;
  bool adapters = false;
  std::size_t adapter_bottleneck = 8;
  std::size_t max_target_len = 192;
  double dropout = 0.1;

  // Throws ConfigError listing every invalid field.
  void validate() const;
  LayerShape layer_shape(bool with_adapters) const;
};

template <typename T>
struct EncoderStates {
  Tensor<T> hidden;  // [T' × D]
  std::size_t valid_len = 0;
};

// Per-layer key/value caches for incremental decoding. Copies share the cached
// tensors, which are never modified in place, so a copy is an independent
// snapshot.
template <typename T>
struct DecodeCache {
  std::vector<DecoderLayerCache<T>> layers;
  std::size_t length = 0;
};

template <typename T>
class ModelBundle {
 public:
  // Seeded initialisation. `input_vocab` is required for the NLU model and
  // ignored otherwise.
  static ModelBundle build(const ModelConfig& cfg, Vocab output_vocab,
                           std::optional<Vocab> input_vocab, std::uint64_t seed);

  ModelBundle(ModelBundle&&) noexcept = default;
  ModelBundle& operator=(ModelBundle&&) noexcept = default;
  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocab& output_vocab() const { return output_vocab_; }
  const std::optional<Vocab>& input_vocab() const { return input_vocab_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  EncoderStates<T> encode(const FeatureMatrix& features, const ForwardContext<T>& ctx = {}) const;
  EncoderStates<T> encode_text(std::span<const int> ids, const ForwardContext<T>& ctx = {}) const;
  // Dispatches on the model kind: features for E2E, the transcript for NLU.
  EncoderStates<T> encode_example(const Example& ex, const ForwardContext<T>& ctx = {}) const;
  std::vector<int> source_ids(std::string_view transcript) const;

  // Logits [len(prefix) × V]; row i is the distribution of token i+1.
  Tensor<T> decode_logits(std::span<const int> prefix, const EncoderStates<T>& enc,
                          const ForwardContext<T>& ctx = {}) const;
  // Logits for `new_ids` only, attending to everything already in `cache`.
  Tensor<T> decode_step(std::span<const int> new_ids, const EncoderStates<T>& enc,
                        DecodeCache<T>& cache) const;

  // Encoder (including adapters) becomes non-trainable; adapters are then
  // re-enabled if requested. Throws ConfigError if adapters are requested but
  // absent.
  void freeze_encoder(bool adapters_trainable);
  // Copies every non-adapter encoder parameter from `source`, by name and
  // shape. Throws ConfigError on a missing name or shape mismatch.
  void init_encoder_from(const ModelBundle& source);

  std::size_t total_params() const { return params_.total_count(); }
  std::size_t trainable_params() const { return params_.trainable_count(); }
  // Number of scalars in parameters whose name starts with `prefix`.
  std::size_t count_params(std::string_view prefix) const;

 private:
  ModelBundle(ModelConfig cfg, Vocab output_vocab, std::optional<Vocab> input_vocab,
              std::uint64_t seed);

  Tensor<T> embed_target(std::span<const int> ids, std::size_t offset) const;

  ModelConfig cfg_;
  Vocab output_vocab_;
  std::optional<Vocab> input_vocab_;
  ParameterStore<T> params_;

  SubsampleWeights<T> subsample_;
  std::vector<ConformerLayerWeights<T>> conformer_;
  Tensor<T> source_embedding_;
  std::vector<TransformerEncoderLayerWeights<T>> text_encoder_;
  LayerNormWeights<T> text_encoder_norm_;

  Tensor<T> target_embedding_;
  std::vector<DecoderLayerWeights<T>> decoder_;
  LayerNormWeights<T> decoder_norm_;
  LinearWeights<T> output_;
};

bool is_encoder_param(std::string_view name);
bool is_adapter_param(std::string_view name);

// Binary layout: "SICK", u32 version, u64 length + JSON config (including the
// vocabularies and init seed), u32 tensor count, then per tensor: u32 name
// length + name, u8 dtype (0 f32, 1 f64), u8 trainable, u32 rank, u64 dims,
// little-endian payload.
template <typename T>
void save_checkpoint(const ModelBundle<T>& model, const std::filesystem::path& path);
template <typename T>
ModelBundle<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace sicsf
