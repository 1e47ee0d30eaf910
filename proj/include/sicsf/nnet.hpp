// SPDX-License-Identifier: Apache-2.0
//
// Layers for the Conformer encoder, the Transformer encoder/decoder and the
// bottleneck adapter. Weight structs hold tensor handles owned by a
// ParameterStore; forward functions are pure functions of (weights, input).

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "sicsf/tensor.hpp"

namespace sicsf {

// Named, ordered parameter registry with seeded initialisation. A parameter is
// trainable iff its tensor requires a gradient.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // U(-bound, bound)
  Tensor<T> uniform(const std::string& name, Shape shape, double bound);
  Tensor<T> constant(const std::string& name, Shape shape, T value);

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry* find(const std::string& name) const;
  std::size_t total_count() const;
  std::size_t trainable_count() const;

  // Sets the trainable flag of every parameter whose name starts with prefix.
  // Returns how many parameters matched.
  std::size_t set_trainable(const std::string& prefix, bool trainable);

 private:
  Tensor<T> add(const std::string& name, Tensor<T> tensor);

  std::uint64_t seed_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct LinearWeights {
  Tensor<T> weight;  // [in × out]
  Tensor<T> bias;    // [out], may be undefined
};

template <typename T>
struct LayerNormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct FeedForwardWeights {
  LinearWeights<T> up;    // D -> 4D
  LinearWeights<T> down;  // 4D -> D
};

template <typename T>
struct AttentionWeights {
  LinearWeights<T> query, key, value, output;
  Tensor<T> rel_bias;  // optional [heads × (2·clip+1)]
};

template <typename T>
struct ConvModuleWeights {
  LinearWeights<T> pointwise_in;  // D -> 2D, followed by GLU
  Tensor<T> depthwise;            // [K × D]
  Tensor<T> depthwise_bias;       // [D]
  LayerNormWeights<T> norm;
  LinearWeights<T> pointwise_out;  // D -> D
};

template <typename T>
struct AdapterWeights {
  LinearWeights<T> down;  // D -> B
  LinearWeights<T> up;    // B -> D, zero-initialised
};

template <typename T>
struct ConformerLayerWeights {
  LayerNormWeights<T> ffn1_norm;
  FeedForwardWeights<T> ffn1;
  LayerNormWeights<T> mhsa_norm;
  AttentionWeights<T> mhsa;
  LayerNormWeights<T> conv_norm;
  ConvModuleWeights<T> conv;
  LayerNormWeights<T> ffn2_norm;
  FeedForwardWeights<T> ffn2;
  LayerNormWeights<T> final_norm;
  std::optional<AdapterWeights<T>> adapter_mhsa;
  std::optional<AdapterWeights<T>> adapter_conv;
};

template <typename T>
struct TransformerEncoderLayerWeights {
  LayerNormWeights<T> attn_norm;
  AttentionWeights<T> attn;
  LayerNormWeights<T> mlp_norm;
  FeedForwardWeights<T> mlp;
};

template <typename T>
struct DecoderLayerWeights {
  LayerNormWeights<T> self_norm;
  AttentionWeights<T> self_attn;
  LayerNormWeights<T> cross_norm;
  AttentionWeights<T> cross_attn;
  LayerNormWeights<T> mlp_norm;
  FeedForwardWeights<T> mlp;
};

template <typename T>
struct SubsampleWeights {
  LinearWeights<T> proj;  // factor·F -> D
  std::size_t factor = 4;
};

struct LayerShape {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t conv_kernel = 9;
  std::size_t rel_pos_clip = 64;  // 0 disables the relative-position bias
  std::size_t adapter_bottleneck = 0;  // 0 = no adapters
};

// Dropout is active only when rate > 0 and an RNG is supplied.
template <typename T>
struct ForwardContext {
  T dropout = T(0);
  std::mt19937_64* rng = nullptr;

  Tensor<T> drop(const Tensor<T>& x) const {
    return (rng != nullptr && dropout > T(0)) ? sicsf::dropout(x, dropout, *rng) : x;
  }
};

struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;
  std::size_t key_valid = SIZE_MAX;
  std::size_t query_offset = 0;  // absolute position of the first query row
  std::size_t rel_pos_clip = 0;
};

// ---- construction ----------------------------------------------------------

template <typename T>
LinearWeights<T> make_linear(ParameterStore<T>& store, const std::string& prefix,
                             std::size_t in, std::size_t out, bool with_bias = true);
template <typename T>
LayerNormWeights<T> make_layer_norm(ParameterStore<T>& store, const std::string& prefix,
                                    std::size_t d);
template <typename T>
AttentionWeights<T> make_attention(ParameterStore<T>& store, const std::string& prefix,
                                   const LayerShape& shape, bool relative_bias);
template <typename T>
AdapterWeights<T> make_adapter(ParameterStore<T>& store, const std::string& prefix,
                               std::size_t d, std::size_t bottleneck);
template <typename T>
ConformerLayerWeights<T> make_conformer_layer(ParameterStore<T>& store, const std::string& prefix,
                                              const LayerShape& shape);
template <typename T>
TransformerEncoderLayerWeights<T> make_transformer_encoder_layer(ParameterStore<T>& store,
                                                                 const std::string& prefix,
                                                                 const LayerShape& shape);
template <typename T>
DecoderLayerWeights<T> make_decoder_layer(ParameterStore<T>& store, const std::string& prefix,
                                          const LayerShape& shape);
template <typename T>
SubsampleWeights<T> make_subsample(ParameterStore<T>& store, const std::string& prefix,
                                   std::size_t feat_dim, std::size_t d_model, std::size_t factor);

// ---- forward ---------------------------------------------------------------

enum class Activation { kRelu, kSwish };

template <typename T> Tensor<T> linear(const Tensor<T>& x, const LinearWeights<T>& w);
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormWeights<T>& w);
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w, Activation act,
                       const ForwardContext<T>& ctx);

// Scaled dot-product attention over already-projected q/k/v, one call per head,
// followed by the output projection.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const AttentionWeights<T>& w, const AttentionOptions& opts,
                 const ForwardContext<T>& ctx);

// Projects queries from `query_in` and keys/values from `kv_in`, then attends.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& query_in, const Tensor<T>& kv_in,
                               const AttentionWeights<T>& w, const AttentionOptions& opts,
                               const ForwardContext<T>& ctx);

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterWeights<T>& w);

template <typename T>
Tensor<T> conv_module_forward(const Tensor<T>& x, const ConvModuleWeights<T>& w,
                              std::size_t valid_len, const ForwardContext<T>& ctx);

template <typename T>
Tensor<T> conformer_layer_forward(const Tensor<T>& x, const ConformerLayerWeights<T>& w,
                                  std::size_t valid_len, const LayerShape& shape,
                                  const ForwardContext<T>& ctx);

template <typename T>
Tensor<T> transformer_encoder_layer_forward(const Tensor<T>& x,
                                            const TransformerEncoderLayerWeights<T>& w,
                                            std::size_t valid_len, const LayerShape& shape,
                                            const ForwardContext<T>& ctx);

// Self-attention keys/values of earlier positions plus projected encoder
// keys/values, for incremental decoding.
template <typename T>
struct DecoderLayerCache {
  Tensor<T> self_k, self_v;
  Tensor<T> cross_k, cross_v;
  std::size_t length() const { return self_k.defined() ? self_k.dim(0) : 0; }
};

// With cache == nullptr, `y` holds the whole prefix. With a cache, `y` holds
// only the new positions; they attend to the cached positions and the cache is
// extended in place.
template <typename T>
Tensor<T> decoder_layer_forward(const Tensor<T>& y, const Tensor<T>& enc,
                                const DecoderLayerWeights<T>& w, std::size_t enc_valid,
                                const LayerShape& shape, const ForwardContext<T>& ctx,
                                DecoderLayerCache<T>* cache = nullptr);

template <typename T>
struct Subsampled {
  Tensor<T> states;
  std::size_t valid_len = 0;
};

template <typename T>
Subsampled<T> subsample(const Tensor<T>& features, std::size_t valid_len,
                        const SubsampleWeights<T>& w);

// Fixed sinusoidal position table rows [offset, offset+len).
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t offset, std::size_t len, std::size_t d_model);

}  // namespace sicsf
