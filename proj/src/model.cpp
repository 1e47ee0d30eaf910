// SPDX-License-Identifier: Apache-2.0

#include "sicsf/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sicsf/errors.hpp"

namespace sicsf {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'I', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

const char* kind_name(ModelKind k) { return k == ModelKind::kNlu ? "nlu" : "e2e"; }

}  // namespace

bool is_encoder_param(std::string_view name) { return name.starts_with("encoder."); }
bool is_adapter_param(std::string_view name) { return name.find(".adapter_") != std::string_view::npos; }

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto need = [&](bool ok, std::string msg) {
    if (!ok) problems.push_back(std::move(msg));
  };
  need(d_model >= 1, "d_model must be >= 1");
  need(heads >= 1 && d_model % heads == 0,
       "heads (" + std::to_string(heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  need(ffn_mult >= 1, "ffn_mult must be >= 1");
  need(n_enc_layers >= 1, "n_enc_layers must be >= 1");
  need(n_dec_layers >= 1, "n_dec_layers must be >= 1");
  need(conv_kernel % 2 == 1, "conv_kernel must be odd");
  need(subsample_factor == 1 || subsample_factor == 2 || subsample_factor == 4,
       "subsample_factor must be 1, 2 or 4");
  need(feature_dim >= 1, "feature_dim must be >= 1");
  need(!adapters || (adapter_bottleneck >= 1 && adapter_bottleneck <= d_model / 4),
       "adapter_bottleneck must be in [1, d_model/4] when adapters are enabled");
  need(kind == ModelKind::kEndToEnd || !adapters, "adapters are only defined for the E2E encoder");
  need(max_target_len >= 2, "max_target_len must be >= 2");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

LayerShape ModelConfig::layer_shape(bool with_adapters) const {
  LayerShape s;
  s.d_model = d_model;
  s.heads = heads;
  s.ffn_mult = ffn_mult;
  s.conv_kernel = conv_kernel;
  s.rel_pos_clip = rel_pos_clip;
  s.adapter_bottleneck = with_adapters && adapters ? adapter_bottleneck : 0;
  return s;
}

// ---- construction ----------------------------------------------------------

template <typename T>
ModelBundle<T>::ModelBundle(ModelConfig cfg, Vocab output_vocab, std::optional<Vocab> input_vocab,
                            std::uint64_t seed)
    : cfg_(std::move(cfg)),
      output_vocab_(std::move(output_vocab)),
      input_vocab_(std::move(input_vocab)),
      params_(seed) {}

template <typename T>
ModelBundle<T> ModelBundle<T>::build(const ModelConfig& cfg, Vocab output_vocab,
                                     std::optional<Vocab> input_vocab, std::uint64_t seed) {
  cfg.validate();
  if (cfg.kind == ModelKind::kNlu && !input_vocab) {
    throw ConfigError("the NLU model needs an input vocabulary");
  }
  if (cfg.kind == ModelKind::kEndToEnd) input_vocab.reset();
  ModelBundle m(cfg, std::move(output_vocab), std::move(input_vocab), seed);
  auto& store = m.params_;
  const std::size_t d = cfg.d_model;

  if (cfg.kind == ModelKind::kEndToEnd) {
    m.subsample_ = make_subsample(store, "encoder.subsample", cfg.feature_dim, d, cfg.subsample_factor);
    const LayerShape shape = cfg.layer_shape(true);
    for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) {
      m.conformer_.push_back(make_conformer_layer(store, "encoder.layers." + std::to_string(i), shape));
    }
  } else {
    m.source_embedding_ = store.uniform("encoder.embedding", {m.input_vocab_->size(), d}, 1.0);
    const LayerShape shape = cfg.layer_shape(false);
    for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) {
      m.text_encoder_.push_back(
          make_transformer_encoder_layer(store, "encoder.layers." + std::to_string(i), shape));
    }
    m.text_encoder_norm_ = make_layer_norm(store, "encoder.final_norm", d);
  }

  m.target_embedding_ = store.uniform("decoder.embedding", {m.output_vocab_.size(), d}, 1.0);
  const LayerShape dec_shape = cfg.layer_shape(false);
  for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) {
    m.decoder_.push_back(make_decoder_layer(store, "decoder.layers." + std::to_string(i), dec_shape));
  }
  m.decoder_norm_ = make_layer_norm(store, "decoder.final_norm", d);
  m.output_ = make_linear(store, "decoder.output", d, m.output_vocab_.size());
  return m;
}

// ---- forward ---------------------------------------------------------------

template <typename T>
EncoderStates<T> ModelBundle<T>::encode(const FeatureMatrix& features,
                                        const ForwardContext<T>& ctx) const {
  if (cfg_.kind != ModelKind::kEndToEnd) throw ConfigError("encode() needs the E2E model");
  if (features.dim != cfg_.feature_dim) {
    throw ShapeError("feature dim " + std::to_string(features.dim) + " does not match model's " +
                     std::to_string(cfg_.feature_dim));
  }
  if (features.valid_len == 0) throw ShapeError("feature matrix has no valid frames");
  auto sub = subsample(features.to_tensor<T>(), features.valid_len, subsample_);
  const LayerShape shape = cfg_.layer_shape(true);
  Tensor<T> h = sub.states;
  for (const auto& layer : conformer_) h = conformer_layer_forward(h, layer, sub.valid_len, shape, ctx);
  return {h, sub.valid_len};
}

template <typename T>
EncoderStates<T> ModelBundle<T>::encode_text(std::span<const int> ids,
                                             const ForwardContext<T>& ctx) const {
  if (cfg_.kind != ModelKind::kNlu) throw ConfigError("encode_text() needs the NLU model");
  if (ids.empty()) throw ShapeError("empty source sequence");
  const LayerShape shape = cfg_.layer_shape(false);
  Tensor<T> h = add(embedding(source_embedding_, ids), sinusoidal_positions<T>(0, ids.size(), cfg_.d_model));
  for (const auto& layer : text_encoder_) {
    h = transformer_encoder_layer_forward(h, layer, ids.size(), shape, ctx);
  }
  return {layer_norm(h, text_encoder_norm_), ids.size()};
}

template <typename T>
std::vector<int> ModelBundle<T>::source_ids(std::string_view transcript) const {
  if (!input_vocab_) throw ConfigError("model has no input vocabulary");
  return input_vocab_->encode(transcript, true);
}

template <typename T>
EncoderStates<T> ModelBundle<T>::encode_example(const Example& ex,
                                                const ForwardContext<T>& ctx) const {
  if (cfg_.kind == ModelKind::kEndToEnd) return encode(ex.features, ctx);
  const auto ids = source_ids(ex.transcript);
  return encode_text(ids, ctx);
}

template <typename T>
Tensor<T> ModelBundle<T>::embed_target(std::span<const int> ids, std::size_t offset) const {
  if (offset + ids.size() > cfg_.max_target_len) {
    throw ShapeError("target prefix of " + std::to_string(offset + ids.size()) +
                     " tokens exceeds max_target_len " + std::to_string(cfg_.max_target_len));
  }
  return add(embedding(target_embedding_, ids), sinusoidal_positions<T>(offset, ids.size(), cfg_.d_model));
}

template <typename T>
Tensor<T> ModelBundle<T>::decode_logits(std::span<const int> prefix, const EncoderStates<T>& enc,
                                        const ForwardContext<T>& ctx) const {
  if (prefix.empty() || prefix[0] != kBosId) throw ShapeError("target prefix must start with BOS");
  const LayerShape shape = cfg_.layer_shape(false);
  Tensor<T> h = embed_target(prefix, 0);
  for (const auto& layer : decoder_) h = decoder_layer_forward(h, enc.hidden, layer, enc.valid_len, shape, ctx);
  return linear(layer_norm(h, decoder_norm_), output_);
}

template <typename T>
Tensor<T> ModelBundle<T>::decode_step(std::span<const int> new_ids, const EncoderStates<T>& enc,
                                      DecodeCache<T>& cache) const {
  if (cache.length == 0 && (new_ids.empty() || new_ids[0] != kBosId)) {
    throw ShapeError("target prefix must start with BOS");
  }
  if (cache.layers.size() != decoder_.size()) cache.layers.resize(decoder_.size());
  const LayerShape shape = cfg_.layer_shape(false);
  const ForwardContext<T> ctx;
  Tensor<T> h = embed_target(new_ids, cache.length);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    h = decoder_layer_forward(h, enc.hidden, decoder_[i], enc.valid_len, shape, ctx, &cache.layers[i]);
  }
  cache.length += new_ids.size();
  return linear(layer_norm(h, decoder_norm_), output_);
}

// ---- bookkeeping -------------------------------------------------------------

template <typename T>
void ModelBundle<T>::freeze_encoder(bool adapters_trainable) {
  if (adapters_trainable && !cfg_.adapters) {
    throw ConfigError("adapters requested but the model was built without them");
  }
  for (const auto& e : params_.entries()) {
    if (!is_encoder_param(e.name)) continue;
    Tensor<T> t = e.tensor;
    t.set_requires_grad(adapters_trainable && is_adapter_param(e.name));
  }
}

template <typename T>
void ModelBundle<T>::init_encoder_from(const ModelBundle& source) {
  if (source.cfg_.kind != cfg_.kind) throw ConfigError("--init-encoder: model kinds differ");
  for (const auto& e : params_.entries()) {
    if (!is_encoder_param(e.name) || is_adapter_param(e.name)) continue;
    const auto* src = source.params_.find(e.name);
    if (src == nullptr) throw ConfigError("--init-encoder: source lacks parameter " + e.name);
    if (src->tensor.shape() != e.tensor.shape()) {
      throw ConfigError("--init-encoder: shape mismatch for " + e.name + ": " +
                        shape_str(src->tensor.shape()) + " vs " + shape_str(e.tensor.shape()));
    }
    Tensor<T> dst = e.tensor;
    auto out = dst.mutable_data();
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), out.begin());
  }
}

template <typename T>
std::size_t ModelBundle<T>::count_params(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& e : params_.entries()) {
    if (std::string_view(e.name).starts_with(prefix)) n += e.tensor.numel();
  }
  return n;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
  return {{"kind", kind_name(c.kind)},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"n_enc_layers", c.n_enc_layers},
          {"n_dec_layers", c.n_dec_layers},
          {"conv_kernel", c.conv_kernel},
          {"subsample_factor", c.subsample_factor},
          {"feature_dim", c.feature_dim},
          {"rel_pos_clip", c.rel_pos_clip},
          {"adapters", c.adapters},
          {"adapter_bottleneck", c.adapter_bottleneck},
          {"max_target_len", c.max_target_len},
          {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "e2e" && kind != "nlu") throw DataError("checkpoint: unknown model kind " + kind);
  c.kind = kind == "nlu" ? ModelKind::kNlu : ModelKind::kEndToEnd;
  c.d_model = j.at("d_model");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.n_enc_layers = j.at("n_enc_layers");
  c.n_dec_layers = j.at("n_dec_layers");
  c.conv_kernel = j.at("conv_kernel");
  c.subsample_factor = j.at("subsample_factor");
  c.feature_dim = j.at("feature_dim");
  c.rel_pos_clip = j.at("rel_pos_clip");
  c.adapters = j.at("adapters");
  c.adapter_bottleneck = j.at("adapter_bottleneck");
  c.max_target_len = j.at("max_target_len");
  c.dropout = j.at("dropout");
  return c;
}

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(what_ + ": truncated checkpoint");
  }
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void save_checkpoint(const ModelBundle<T>& model, const std::filesystem::path& path) {
  json header = {{"model", config_to_json(model.config())},
                 {"seed", model.params().seed()},
                 {"output_vocab", model.output_vocab().to_text()}};
  if (model.input_vocab()) header["input_vocab"] = model.input_vocab()->to_text();
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  const auto& entries = model.params().entries();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(sizeof(T) == 4 ? 0 : 1));
    out.push_back(static_cast<char>(e.tensor.requires_grad() ? 1 : 0));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) put_le<std::uint64_t>(out, d);
    for (T v : e.tensor.data()) {
      if constexpr (sizeof(T) == 4) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
      } else {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write checkpoint " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("write failed: " + path.string());
}

template <typename T>
ModelBundle<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(file)), {});
  const std::string what = path.string();
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw DataError(what + ": not a checkpoint (bad magic)");
  }
  ByteReader r(bytes.substr(4), what);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  json header;
  try {
    header = json::parse(r.take(r.get<std::uint64_t>()));
  } catch (const json::exception& e) {
    throw DataError(what + ": bad config block (" + e.what() + ")");
  }
  ModelConfig cfg;
  std::uint64_t seed = 0;
  std::optional<Vocab> input_vocab;
  std::optional<Vocab> output_vocab;
  try {
    cfg = config_from_json(header.at("model"));
    seed = header.at("seed").get<std::uint64_t>();
    output_vocab = Vocab::from_text(header.at("output_vocab").get<std::string>());
    if (header.contains("input_vocab")) input_vocab = Vocab::from_text(header["input_vocab"].get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(what + ": bad config block (" + e.what() + ")");
  }
  auto model = ModelBundle<T>::build(cfg, std::move(*output_vocab), std::move(input_vocab), seed);

  const auto count = r.get<std::uint32_t>();
  if (count != model.params().entries().size()) {
    throw DataError(what + ": checkpoint has " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(model.params().entries().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.take(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    const bool trainable = r.get<std::uint8_t>() != 0;
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const auto* entry = model.params().find(name);
    if (entry == nullptr) throw DataError(what + ": unexpected tensor " + name);
    if (entry->tensor.shape() != shape) {
      throw DataError(what + ": shape mismatch for " + name + ": file " + shape_str(shape) +
                      ", model " + shape_str(entry->tensor.shape()));
    }
    if (dtype > 1) throw DataError(what + ": unknown dtype for " + name);
    Tensor<T> t = entry->tensor;
    for (auto& v : t.mutable_data()) {
      v = dtype == 0 ? static_cast<T>(std::bit_cast<float>(r.get<std::uint32_t>()))
                     : static_cast<T>(std::bit_cast<double>(r.get<std::uint64_t>()));
    }
    t.set_requires_grad(trainable);
  }
  if (!r.done()) throw DataError(what + ": trailing bytes after last tensor");
  return model;
}

template class ModelBundle<float>;
template class ModelBundle<double>;
template void save_checkpoint(const ModelBundle<float>&, const std::filesystem::path&);
template void save_checkpoint(const ModelBundle<double>&, const std::filesystem::path&);
template ModelBundle<float> load_checkpoint<float>(const std::filesystem::path&);
template ModelBundle<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace sicsf
