// SPDX-License-Identifier: Apache-2.0

#include "sicsf/nnet.hpp"

#include <cmath>

#include "sicsf/seed.hpp"

namespace sicsf {

// ---- ParameterStore --------------------------------------------------------

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Tensor<T> tensor) {
  if (index_.count(name) != 0) throw std::logic_error("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, tensor});
  return tensor;
}

template <typename T>
Tensor<T> ParameterStore<T>::uniform(const std::string& name, Shape shape, double bound) {
  // Seeded by name, so a parameter's values do not depend on which others exist.
  std::mt19937_64 rng(derive_seed(seed_, name));
  std::uniform_real_distribution<double> unif(-bound, bound);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(unif(rng));
  return add(name, Tensor<T>::from(std::move(shape), std::move(data), true));
}

template <typename T>
Tensor<T> ParameterStore<T>::constant(const std::string& name, Shape shape, T value) {
  return add(name, Tensor<T>::full(std::move(shape), value, true));
}

template <typename T>
const typename ParameterStore<T>::Entry* ParameterStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
std::size_t ParameterStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.tensor.requires_grad()) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
std::size_t ParameterStore<T>::set_trainable(const std::string& prefix, bool trainable) {
  std::size_t matched = 0;
  for (auto& e : entries_) {
    if (e.name.compare(0, prefix.size(), prefix) == 0) {
      e.tensor.set_requires_grad(trainable);
      ++matched;
    }
  }
  return matched;
}

// ---- construction ----------------------------------------------------------

template <typename T>
LinearWeights<T> make_linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in,
                             std::size_t out, bool with_bias) {
  LinearWeights<T> w;
  w.weight = store.uniform(prefix + ".weight", {in, out}, 1.0 / std::sqrt(double(in)));
  if (with_bias) w.bias = store.constant(prefix + ".bias", {out}, T(0));
  return w;
}

template <typename T>
LayerNormWeights<T> make_layer_norm(ParameterStore<T>& store, const std::string& prefix,
                                    std::size_t d) {
  return {store.constant(prefix + ".gamma", {d}, T(1)), store.constant(prefix + ".beta", {d}, T(0))};
}

namespace {

template <typename T>
FeedForwardWeights<T> make_feed_forward(ParameterStore<T>& store, const std::string& prefix,
                                        const LayerShape& s) {
  return {make_linear(store, prefix + ".up", s.d_model, s.ffn_mult * s.d_model),
          make_linear(store, prefix + ".down", s.ffn_mult * s.d_model, s.d_model)};
}

void check_shape(const LayerShape& s) {
  if (s.heads == 0 || s.d_model % s.heads != 0) {
    throw ShapeError("heads (" + std::to_string(s.heads) + ") must divide d_model (" +
                     std::to_string(s.d_model) + ")");
  }
}

}  // namespace

template <typename T>
AttentionWeights<T> make_attention(ParameterStore<T>& store, const std::string& prefix,
                                   const LayerShape& s, bool relative_bias) {
  check_shape(s);
  AttentionWeights<T> w;
  w.query = make_linear(store, prefix + ".query", s.d_model, s.d_model);
  // A key bias only shifts each query's scores by a constant, which softmax ignores.
  w.key = make_linear(store, prefix + ".key", s.d_model, s.d_model, false);
  w.value = make_linear(store, prefix + ".value", s.d_model, s.d_model);
  w.output = make_linear(store, prefix + ".output", s.d_model, s.d_model);
  if (relative_bias && s.rel_pos_clip > 0) {
    w.rel_bias = store.constant(prefix + ".rel_bias", {s.heads, 2 * s.rel_pos_clip + 1}, T(0));
  }
  return w;
}

template <typename T>
AdapterWeights<T> make_adapter(ParameterStore<T>& store, const std::string& prefix,
                               std::size_t d, std::size_t bottleneck) {
  if (bottleneck == 0 || bottleneck * 4 > d) {
    throw ShapeError("adapter bottleneck " + std::to_string(bottleneck) +
                     " must be in [1, d_model/4] for d_model " + std::to_string(d));
  }
  AdapterWeights<T> w;
  w.down = make_linear(store, prefix + ".down", d, bottleneck);
  w.up.weight = store.constant(prefix + ".up.weight", {bottleneck, d}, T(0));
  w.up.bias = store.constant(prefix + ".up.bias", {d}, T(0));
  return w;
}

template <typename T>
ConformerLayerWeights<T> make_conformer_layer(ParameterStore<T>& store, const std::string& p,
                                              const LayerShape& s) {
  check_shape(s);
  if (s.conv_kernel % 2 == 0) {
    throw ShapeError("conv kernel size must be odd, got " + std::to_string(s.conv_kernel));
  }
  const std::size_t d = s.d_model;
  ConformerLayerWeights<T> w;
  w.ffn1_norm = make_layer_norm(store, p + ".ffn1_norm", d);
  w.ffn1 = make_feed_forward(store, p + ".ffn1", s);
  w.mhsa_norm = make_layer_norm(store, p + ".mhsa_norm", d);
  w.mhsa = make_attention(store, p + ".mhsa", s, true);
  w.conv_norm = make_layer_norm(store, p + ".conv_norm", d);
  w.conv.pointwise_in = make_linear(store, p + ".conv.pointwise_in", d, 2 * d);
  w.conv.depthwise = store.uniform(p + ".conv.depthwise", {s.conv_kernel, d},
                                   1.0 / std::sqrt(double(s.conv_kernel)));
  w.conv.depthwise_bias = store.constant(p + ".conv.depthwise_bias", {d}, T(0));
  w.conv.norm = make_layer_norm(store, p + ".conv.norm", d);
  w.conv.pointwise_out = make_linear(store, p + ".conv.pointwise_out", d, d);
  w.ffn2_norm = make_layer_norm(store, p + ".ffn2_norm", d);
  w.ffn2 = make_feed_forward(store, p + ".ffn2", s);
  w.final_norm = make_layer_norm(store, p + ".final_norm", d);
  if (s.adapter_bottleneck > 0) {
    w.adapter_mhsa = make_adapter(store, p + ".adapter_mhsa", d, s.adapter_bottleneck);
    w.adapter_conv = make_adapter(store, p + ".adapter_conv", d, s.adapter_bottleneck);
  }
  return w;
}

template <typename T>
TransformerEncoderLayerWeights<T> make_transformer_encoder_layer(ParameterStore<T>& store,
                                                                 const std::string& p,
                                                                 const LayerShape& s) {
  TransformerEncoderLayerWeights<T> w;
  w.attn_norm = make_layer_norm(store, p + ".attn_norm", s.d_model);
  w.attn = make_attention(store, p + ".attn", s, false);
  w.mlp_norm = make_layer_norm(store, p + ".mlp_norm", s.d_model);
  w.mlp = make_feed_forward(store, p + ".mlp", s);
  return w;
}

template <typename T>
DecoderLayerWeights<T> make_decoder_layer(ParameterStore<T>& store, const std::string& p,
                                          const LayerShape& s) {
  DecoderLayerWeights<T> w;
  w.self_norm = make_layer_norm(store, p + ".self_norm", s.d_model);
  w.self_attn = make_attention(store, p + ".self_attn", s, false);
  w.cross_norm = make_layer_norm(store, p + ".cross_norm", s.d_model);
  w.cross_attn = make_attention(store, p + ".cross_attn", s, false);
  w.mlp_norm = make_layer_norm(store, p + ".mlp_norm", s.d_model);
  w.mlp = make_feed_forward(store, p + ".mlp", s);
  return w;
}

template <typename T>
SubsampleWeights<T> make_subsample(ParameterStore<T>& store, const std::string& prefix,
                                   std::size_t feat_dim, std::size_t d_model, std::size_t factor) {
  if (factor != 1 && factor != 2 && factor != 4) {
    throw ShapeError("subsample factor must be 1, 2 or 4, got " + std::to_string(factor));
  }
  return {make_linear(store, prefix + ".proj", factor * feat_dim, d_model), factor};
}

// ---- forward ---------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearWeights<T>& w) {
  Tensor<T> y = matmul(x, w.weight);
  return w.bias.defined() ? add_bias(y, w.bias) : y;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormWeights<T>& w) {
  return layer_norm(x, w.gamma, w.beta, T(1e-5));
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w, Activation act,
                       const ForwardContext<T>& ctx) {
  Tensor<T> h = linear(x, w.up);
  h = act == Activation::kSwish ? swish(h) : relu(h);
  return ctx.drop(linear(h, w.down));
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const AttentionWeights<T>& w, const AttentionOptions& opts,
                 const ForwardContext<T>& ctx) {
  const std::size_t d = q.dim(1);
  if (opts.heads == 0 || d % opts.heads != 0) {
    throw ShapeError("attention: heads (" + std::to_string(opts.heads) + ") must divide " +
                     std::to_string(d));
  }
  if (k.dim(0) != v.dim(0) || k.dim(1) != d || v.dim(1) != d) {
    throw ShapeError("attention: key " + shape_str(k.shape()) + " / value " +
                     shape_str(v.shape()) + " incompatible with query " + shape_str(q.shape()));
  }
  const std::size_t dh = d / opts.heads;
  const std::size_t tq = q.dim(0), tk = k.dim(0);
  const bool needs_mask = opts.causal || opts.key_valid < tk;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const Tensor<T> q_scaled = scale(q, inv_sqrt);
  std::vector<Tensor<T>> per_head;
  per_head.reserve(opts.heads);
  for (std::size_t h = 0; h < opts.heads; ++h) {
    const bool whole = opts.heads == 1;
    Tensor<T> qh = whole ? q_scaled : slice_cols(q_scaled, h * dh, dh);
    Tensor<T> kh = whole ? k : slice_cols(k, h * dh, dh);
    Tensor<T> vh = whole ? v : slice_cols(v, h * dh, dh);
    Tensor<T> scores = matmul_nt(qh, kh);
    if (w.rel_bias.defined() && opts.rel_pos_clip > 0) {
      scores = add(scores, relative_position_bias(w.rel_bias, h, tq, tk, opts.rel_pos_clip,
                                                  opts.query_offset));
    }
    if (needs_mask) scores = attention_mask(scores, opts.key_valid, opts.causal, opts.query_offset);
    per_head.push_back(matmul(ctx.drop(softmax(scores, 1)), vh));
  }
  Tensor<T> merged = per_head.size() == 1 ? per_head.front() : concat_cols(per_head);
  return linear(merged, w.output);
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& query_in, const Tensor<T>& kv_in,
                               const AttentionWeights<T>& w, const AttentionOptions& opts,
                               const ForwardContext<T>& ctx) {
  return attend(linear(query_in, w.query), linear(kv_in, w.key), linear(kv_in, w.value), w, opts,
                ctx);
}

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterWeights<T>& w) {
  return add(x, linear(relu(linear(x, w.down)), w.up));
}

template <typename T>
Tensor<T> conv_module_forward(const Tensor<T>& x, const ConvModuleWeights<T>& w,
                              std::size_t valid_len, const ForwardContext<T>& ctx) {
  Tensor<T> h = glu(linear(x, w.pointwise_in));
  h = add_bias(depthwise_conv1d(h, w.depthwise, valid_len), w.depthwise_bias);
  h = swish(layer_norm(h, w.norm));
  return ctx.drop(linear(h, w.pointwise_out));
}

template <typename T>
Tensor<T> conformer_layer_forward(const Tensor<T>& x, const ConformerLayerWeights<T>& w,
                                  std::size_t valid_len, const LayerShape& shape,
                                  const ForwardContext<T>& ctx) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ShapeError("conformer layer: empty input");
  if (valid_len > x.dim(0)) {
    throw ShapeError("conformer layer: valid length " + std::to_string(valid_len) +
                     " exceeds " + std::to_string(x.dim(0)) + " frames");
  }
  const T half = T(0.5);
  Tensor<T> h = add(x, scale(feed_forward(layer_norm(x, w.ffn1_norm), w.ffn1, Activation::kSwish,
                                          ctx),
                             half));

  AttentionOptions opts;
  opts.heads = shape.heads;
  opts.key_valid = valid_len;
  opts.rel_pos_clip = shape.rel_pos_clip;
  const Tensor<T> normed = layer_norm(h, w.mhsa_norm);
  Tensor<T> att = multi_head_attention(normed, normed, w.mhsa, opts, ctx);
  if (w.adapter_mhsa) att = adapter_forward(att, *w.adapter_mhsa);
  h = add(h, att);

  Tensor<T> conv = conv_module_forward(layer_norm(h, w.conv_norm), w.conv, valid_len, ctx);
  if (w.adapter_conv) conv = adapter_forward(conv, *w.adapter_conv);
  h = add(h, conv);

  h = add(h, scale(feed_forward(layer_norm(h, w.ffn2_norm), w.ffn2, Activation::kSwish, ctx),
                   half));
  return layer_norm(h, w.final_norm);
}

template <typename T>
Tensor<T> transformer_encoder_layer_forward(const Tensor<T>& x,
                                            const TransformerEncoderLayerWeights<T>& w,
                                            std::size_t valid_len, const LayerShape& shape,
                                            const ForwardContext<T>& ctx) {
  if (valid_len > x.dim(0)) {
    throw ShapeError("encoder layer: valid length " + std::to_string(valid_len) + " exceeds " +
                     std::to_string(x.dim(0)) + " positions");
  }
  AttentionOptions opts;
  opts.heads = shape.heads;
  opts.key_valid = valid_len;
  const Tensor<T> normed = layer_norm(x, w.attn_norm);
  Tensor<T> h = add(x, multi_head_attention(normed, normed, w.attn, opts, ctx));
  return add(h, feed_forward(layer_norm(h, w.mlp_norm), w.mlp, Activation::kRelu, ctx));
}

template <typename T>
Tensor<T> decoder_layer_forward(const Tensor<T>& y, const Tensor<T>& enc,
                                const DecoderLayerWeights<T>& w, std::size_t enc_valid,
                                const LayerShape& shape, const ForwardContext<T>& ctx,
                                DecoderLayerCache<T>* cache) {
  if (y.rank() != 2 || y.dim(0) == 0) throw ShapeError("decoder layer: empty target prefix");
  if (enc_valid > enc.dim(0) || enc_valid == 0) {
    throw ShapeError("decoder layer: encoder valid length " + std::to_string(enc_valid) +
                     " invalid for " + std::to_string(enc.dim(0)) + " encoder states");
  }
  const std::size_t past = cache ? cache->length() : 0;

  const Tensor<T> normed = layer_norm(y, w.self_norm);
  Tensor<T> q = linear(normed, w.self_attn.query);
  Tensor<T> k = linear(normed, w.self_attn.key);
  Tensor<T> v = linear(normed, w.self_attn.value);
  if (cache) {
    if (past > 0) {
      k = concat_rows<T>({cache->self_k, k});
      v = concat_rows<T>({cache->self_v, v});
    }
    cache->self_k = k;
    cache->self_v = v;
  }
  AttentionOptions self_opts;
  self_opts.heads = shape.heads;
  self_opts.causal = true;
  self_opts.query_offset = past;
  Tensor<T> h = add(y, attend(q, k, v, w.self_attn, self_opts, ctx));

  Tensor<T> ck, cv;
  if (cache && cache->cross_k.defined()) {
    ck = cache->cross_k;
    cv = cache->cross_v;
  } else {
    ck = linear(enc, w.cross_attn.key);
    cv = linear(enc, w.cross_attn.value);
    if (cache) {
      cache->cross_k = ck;
      cache->cross_v = cv;
    }
  }
  AttentionOptions cross_opts;
  cross_opts.heads = shape.heads;
  cross_opts.key_valid = enc_valid;
  const Tensor<T> cq = linear(layer_norm(h, w.cross_norm), w.cross_attn.query);
  h = add(h, attend(cq, ck, cv, w.cross_attn, cross_opts, ctx));
  return add(h, feed_forward(layer_norm(h, w.mlp_norm), w.mlp, Activation::kRelu, ctx));
}

template <typename T>
Subsampled<T> subsample(const Tensor<T>& features, std::size_t valid_len,
                        const SubsampleWeights<T>& w) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw ShapeError("subsample: empty feature matrix");
  }
  const std::size_t valid = std::min(valid_len, features.dim(0));
  Subsampled<T> out;
  out.states = linear(frame_stack(features, w.factor, valid), w.proj);
  out.valid_len = (valid + w.factor - 1) / w.factor;
  return out;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t offset, std::size_t len, std::size_t d_model) {
  std::vector<T> data(len * d_model);
  for (std::size_t p = 0; p < len; ++p) {
    const double pos = double(offset + p);
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(d_model));
      data[p * d_model + i] = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d_model) data[p * d_model + i + 1] = static_cast<T>(std::cos(pos * freq));
    }
  }
  return Tensor<T>::from({len, d_model}, std::move(data));
}

#define SICSF_INSTANTIATE(T)                                                                    \
  template class ParameterStore<T>;                                                             \
  template LinearWeights<T> make_linear<T>(ParameterStore<T>&, const std::string&, std::size_t, \
                                           std::size_t, bool);                                  \
  template LayerNormWeights<T> make_layer_norm<T>(ParameterStore<T>&, const std::string&,       \
                                                  std::size_t);                                 \
  template AttentionWeights<T> make_attention<T>(ParameterStore<T>&, const std::string&,        \
                                                 const LayerShape&, bool);                      \
  template AdapterWeights<T> make_adapter<T>(ParameterStore<T>&, const std::string&,            \
                                             std::size_t, std::size_t);                         \
  template ConformerLayerWeights<T> make_conformer_layer<T>(ParameterStore<T>&,                 \
                                                            const std::string&,                 \
                                                            const LayerShape&);                 \
  template TransformerEncoderLayerWeights<T> make_transformer_encoder_layer<T>(                 \
      ParameterStore<T>&, const std::string&, const LayerShape&);                               \
  template DecoderLayerWeights<T> make_decoder_layer<T>(ParameterStore<T>&, const std::string&, \
                                                        const LayerShape&);                     \
  template SubsampleWeights<T> make_subsample<T>(ParameterStore<T>&, const std::string&,        \
                                                 std::size_t, std::size_t, std::size_t);        \
  template Tensor<T> linear<T>(const Tensor<T>&, const LinearWeights<T>&);                      \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const LayerNormWeights<T>&);               \
  template Tensor<T> feed_forward<T>(const Tensor<T>&, const FeedForwardWeights<T>&,            \
                                     Activation, const ForwardContext<T>&);                     \
  template Tensor<T> attend<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               const AttentionWeights<T>&, const AttentionOptions&,             \
                               const ForwardContext<T>&);                                       \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,                \
                                             const AttentionWeights<T>&,                        \
                                             const AttentionOptions&, const ForwardContext<T>&); \
  template Tensor<T> adapter_forward<T>(const Tensor<T>&, const AdapterWeights<T>&);            \
  template Tensor<T> conv_module_forward<T>(const Tensor<T>&, const ConvModuleWeights<T>&,      \
                                            std::size_t, const ForwardContext<T>&);             \
  template Tensor<T> conformer_layer_forward<T>(const Tensor<T>&,                               \
                                                const ConformerLayerWeights<T>&, std::size_t,   \
                                                const LayerShape&, const ForwardContext<T>&);   \
  template Tensor<T> transformer_encoder_layer_forward<T>(                                      \
      const Tensor<T>&, const TransformerEncoderLayerWeights<T>&, std::size_t,                  \
      const LayerShape&, const ForwardContext<T>&);                                             \
  template Tensor<T> decoder_layer_forward<T>(const Tensor<T>&, const Tensor<T>&,               \
                                              const DecoderLayerWeights<T>&, std::size_t,       \
                                              const LayerShape&, const ForwardContext<T>&,      \
                                              DecoderLayerCache<T>*);                           \
  template Subsampled<T> subsample<T>(const Tensor<T>&, std::size_t, const SubsampleWeights<T>&); \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t, std::size_t);

SICSF_INSTANTIATE(float)
SICSF_INSTANTIATE(double)

#undef SICSF_INSTANTIATE

}  // namespace sicsf
