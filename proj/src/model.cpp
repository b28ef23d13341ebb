#include "elusive/model.hpp"

#include <algorithm>
#include <cmath>

#include "elusive/errors.hpp"
#include "elusive/rng.hpp"

namespace elusive {

namespace {

constexpr double kInitStd = 0.02;

void reject_unknown(const Json& j, std::initializer_list<std::string_view> allowed,
                    std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError(std::string(where) + ": unknown key \"" + item.key() + "\"");
  }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: bad value for \"") + key + "\": " + e.what());
  }
}

ad::Matrix<float> normal_matrix(ad::Index rows, ad::Index cols, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  ad::Matrix<float> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, stddev));
  return m;
}

void add_param(ModelCheckpoint& ckpt, const std::string& name, ad::Shape shape,
               ad::Matrix<float> value) {
  ckpt.params[name] = Parameter{std::move(shape), std::move(value)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq_len < 1)
    throw ConfigError("model config: sizes must be positive");
  if (vocab_size <= 4) throw ConfigError("model config: vocab_size must exceed the reserved ids");
  if (d_model % n_heads != 0)
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  if (d_head() % 2 != 0)
    throw ConfigError("model config: head dimension " + std::to_string(d_head()) +
                      " must be even for rotary embeddings");
  if (!(rope_theta > 0)) throw ConfigError("model config: rope_theta must be positive");
}

ModelConfig ModelConfig::preset_config(std::string_view name, int vocab_size, int max_seq_len) {
  ModelConfig c;
  c.preset = std::string(name);
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  if (name == "toy-small") {
    c.n_layers = 4, c.n_heads = 4, c.d_model = 128, c.d_ff = 512;
  } else if (name == "toy-large") {
    c.n_layers = 8, c.n_heads = 8, c.d_model = 256, c.d_ff = 1024;
  } else {
    throw ConfigError("unknown model preset \"" + std::string(name) + "\"");
  }
  return c;
}

Json ModelConfig::to_json() const {
  Json j;
  j["preset"] = preset;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["vocab_size"] = vocab_size;
  j["max_seq_len"] = max_seq_len;
  j["rope_theta"] = rope_theta;
  return j;
}

ModelConfig ModelConfig::from_json(const Json& j) {
  reject_unknown(j,
                 {"preset", "n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len",
                  "rope_theta"},
                 "model config");
  ModelConfig c;
  c.preset = get_or<std::string>(j, "preset", c.preset);
  c.n_layers = get_or(j, "n_layers", c.n_layers);
  c.n_heads = get_or(j, "n_heads", c.n_heads);
  c.d_model = get_or(j, "d_model", c.d_model);
  c.d_ff = get_or(j, "d_ff", c.d_ff);
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  c.max_seq_len = get_or(j, "max_seq_len", c.max_seq_len);
  c.rope_theta = get_or(j, "rope_theta", c.rope_theta);
  return c;
}

Json LoraSpec::to_json() const {
  Json j;
  j["rank"] = rank;
  j["alpha_scale"] = alpha_scale;
  j["targets"] = targets;
  return j;
}

LoraSpec LoraSpec::from_json(const Json& j) {
  reject_unknown(j, {"rank", "alpha_scale", "targets"}, "lora");
  LoraSpec s;
  s.rank = get_or(j, "rank", s.rank);
  s.alpha_scale = get_or(j, "alpha_scale", s.alpha_scale);
  s.targets = get_or(j, "targets", s.targets);
  return s;
}

// ---------------------------------------------------------------------------
// Parameters

std::string layer_param(int layer, std::string_view kind) {
  return "layers." + std::to_string(layer) + "." + std::string(kind);
}

bool is_adapter_param(std::string_view name) {
  return name.ends_with(".lora_a") || name.ends_with(".lora_b");
}

const Parameter& ModelCheckpoint::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("checkpoint has no parameter \"" + name + "\"");
  return it->second;
}

std::int64_t ModelCheckpoint::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, p] : params) n += p.value.size();
  return n;
}

std::int64_t ModelCheckpoint::base_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, p] : params)
    if (!is_adapter_param(name)) n += p.value.size();
  return n;
}

ModelCheckpoint init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelCheckpoint ckpt;
  ckpt.config = config;
  const ad::Index d = config.d_model, f = config.d_ff, v = config.vocab_size;
  const double out_std = kInitStd / std::sqrt(2.0 * config.n_layers);
  auto key = [seed](const std::string& name) { return derive_seed(seed, hash_string(name)); };

  add_param(ckpt, "embed", {v, d}, normal_matrix(v, d, kInitStd, key("embed")));
  for (int l = 0; l < config.n_layers; ++l) {
    for (const char* kind : {"attn_norm", "mlp_norm"})
      add_param(ckpt, layer_param(l, kind), {d}, ad::Matrix<float>::Ones(1, d));
    for (const char* kind : {"wq", "wk", "wv"}) {
      const auto name = layer_param(l, kind);
      add_param(ckpt, name, {d, d}, normal_matrix(d, d, kInitStd, key(name)));
    }
    auto wo = layer_param(l, "wo");
    add_param(ckpt, wo, {d, d}, normal_matrix(d, d, out_std, key(wo)));
    auto up = layer_param(l, "w_up");
    add_param(ckpt, up, {f, d}, normal_matrix(f, d, kInitStd, key(up)));
    auto down = layer_param(l, "w_down");
    add_param(ckpt, down, {d, f}, normal_matrix(d, f, out_std, key(down)));
  }
  add_param(ckpt, "final_norm", {d}, ad::Matrix<float>::Ones(1, d));
  add_param(ckpt, "lm_head", {v, d}, normal_matrix(v, d, kInitStd, key("lm_head")));
  return ckpt;
}

ModelCheckpoint attach_lora(const ModelCheckpoint& base, const LoraSpec& spec, std::uint64_t seed) {
  if (base.lora) throw ContractError("attach_lora: checkpoint already carries adapters");
  if (spec.rank < 1) throw ConfigError("lora: rank must be at least 1");
  for (const auto& t : spec.targets) {
    if (std::find(kProjections.begin(), kProjections.end(), t) == kProjections.end())
      throw ConfigError("lora: unknown target \"" + t + "\"");
  }
  ModelCheckpoint out = base;
  out.lora = spec;
  for (int l = 0; l < base.config.n_layers; ++l) {
    for (const auto& t : spec.targets) {
      const auto name = layer_param(l, t);
      const auto& w = base.at(name);
      const ad::Index rows = w.shape[0], cols = w.shape[1];
      if (spec.rank > std::min(rows, cols))
        throw ConfigError("lora: rank " + std::to_string(spec.rank) + " exceeds min(" +
                          std::to_string(rows) + ", " + std::to_string(cols) + ") for " + name);
      add_param(out, name + ".lora_a", {spec.rank, cols},
                normal_matrix(spec.rank, cols, kInitStd, derive_seed(seed, hash_string(name))));
      add_param(out, name + ".lora_b", {rows, spec.rank}, ad::Matrix<float>::Zero(rows, spec.rank));
    }
  }
  return out;
}

ModelCheckpoint merge_lora(const ModelCheckpoint& adapted) {
  if (!adapted.lora) return adapted;
  ModelCheckpoint out = adapted;
  const float scale = static_cast<float>(adapted.lora->alpha_scale);
  for (int l = 0; l < adapted.config.n_layers; ++l) {
    for (const auto& t : adapted.lora->targets) {
      const auto name = layer_param(l, t);
      const auto& a = adapted.at(name + ".lora_a").value;
      const auto& b = adapted.at(name + ".lora_b").value;
      out.params[name].value += scale * (b * a);
      out.params.erase(name + ".lora_a");
      out.params.erase(name + ".lora_b");
    }
  }
  out.lora.reset();
  return out;
}

std::int64_t lora_trainable_count(const ModelCheckpoint& adapted) {
  std::int64_t n = 0;
  for (const auto& [name, p] : adapted.params)
    if (is_adapter_param(name)) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward

PackedBatch PackedBatch::pack(std::span<const std::vector<int>> sequences) {
  PackedBatch b;
  for (const auto& seq : sequences) {
    b.segments.push_back({static_cast<ad::Index>(b.ids.size()), static_cast<ad::Index>(seq.size())});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      b.ids.push_back(seq[i]);
      b.positions.push_back(static_cast<int>(i));
    }
  }
  return b;
}

PackedBatch PackedBatch::single(std::span<const int> ids) {
  std::vector<std::vector<int>> one{std::vector<int>(ids.begin(), ids.end())};
  return pack(one);
}

template <typename Scalar>
const ad::Tensor<Scalar>& Weights<Scalar>::operator[](const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("weights have no tensor \"" + name + "\"");
  return it->second;
}

template <typename Scalar>
Weights<Scalar> make_weights(const ModelCheckpoint& ckpt,
                             const std::function<bool(const std::string&)>& trainable) {
  Weights<Scalar> w;
  w.config = ckpt.config;
  w.lora = ckpt.lora;
  for (const auto& [name, p] : ckpt.params) {
    const bool grad = trainable ? trainable(name) : false;
    if constexpr (std::is_same_v<Scalar, float>) {
      w.tensors.emplace(name, ad::Tensor<float>::leaf(p.shape, p.value, grad));
    } else {
      w.tensors.emplace(name, ad::Tensor<Scalar>::leaf(p.shape, p.value.template cast<Scalar>(), grad));
    }
  }
  return w;
}

void store_weights(const Weights<float>& weights, ModelCheckpoint& ckpt) {
  for (const auto& [name, t] : weights.tensors) ckpt.params[name].value = t.value();
}

namespace {

template <typename Scalar>
ad::Tensor<Scalar> project(const Weights<Scalar>& w, const ad::Tensor<Scalar>& x, int layer,
                           const std::string& kind) {
  const auto name = layer_param(layer, kind);
  auto y = ad::linear(x, w[name]);
  if (w.lora && std::find(w.lora->targets.begin(), w.lora->targets.end(), kind) !=
                    w.lora->targets.end()) {
    auto low = ad::linear(ad::linear(x, w[name + ".lora_a"]), w[name + ".lora_b"]);
    y = ad::add(y, ad::scale(low, static_cast<Scalar>(w.lora->alpha_scale)));
  }
  return y;
}

}  // namespace

template <typename Scalar>
ForwardResult<Scalar> forward(const Weights<Scalar>& w, const PackedBatch& batch,
                              const ForwardOptions& options) {
  const ModelConfig& cfg = w.config;
  for (const auto& seg : batch.segments) {
    if (seg.length > cfg.max_seq_len)
      throw DataError("sequence of " + std::to_string(seg.length) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  if (batch.ids.empty()) throw ContractError("forward: empty batch");

  ForwardResult<Scalar> result;
  const bool capturing = options.capture != CaptureMode::none;
  if (capturing) {
    result.captures.resize(batch.segments.size());
    for (std::size_t s = 0; s < batch.segments.size(); ++s) {
      const auto len = batch.segments[s].length;
      result.captures[s].average = Eigen::MatrixXd::Zero(len, len);
      if (options.capture == CaptureMode::full) result.captures[s].heads.resize(cfg.n_layers);
    }
  }

  auto x = ad::embedding(w["embed"], std::span<const int>(batch.ids));
  ad::AttentionProbs<Scalar> probs;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto h = ad::rms_norm(x, w[layer_param(l, "attn_norm")]);
    auto q = ad::rope(project(w, h, l, "wq"), batch.positions, cfg.d_head(), cfg.rope_theta);
    auto k = ad::rope(project(w, h, l, "wk"), batch.positions, cfg.d_head(), cfg.rope_theta);
    auto v = project(w, h, l, "wv");
    auto a = ad::causal_attention(q, k, v, batch.segments, cfg.n_heads,
                                  capturing ? &probs : nullptr);
    if (capturing) {
      for (std::size_t s = 0; s < probs.per_segment.size(); ++s) {
        auto& cap = result.captures[s];
        for (const auto& head : probs.per_segment[s]) {
          Eigen::MatrixXd p = head.template cast<double>();
          cap.average += p;
          if (options.capture == CaptureMode::full) cap.heads[l].push_back(std::move(p));
        }
      }
    }
    x = ad::add(x, project(w, a, l, "wo"));
    h = ad::rms_norm(x, w[layer_param(l, "mlp_norm")]);
    x = ad::add(x, project(w, ad::silu(project(w, h, l, "w_up")), l, "w_down"));
  }
  if (capturing) {
    const double count = static_cast<double>(cfg.n_layers) * cfg.n_heads;
    for (auto& cap : result.captures) cap.average /= count;
  }
  x = ad::rms_norm(x, w["final_norm"]);
  if (options.last_only) {
    std::vector<ad::Index> last;
    for (const auto& seg : batch.segments) last.push_back(seg.begin + seg.length - 1);
    x = ad::gather_rows(x, last);
  }
  result.logits = ad::linear(x, w["lm_head"]);
  return result;
}

ForwardResult<float> forward(const ModelCheckpoint& ckpt, std::span<const int> ids,
                             CaptureMode capture) {
  auto w = make_weights<float>(ckpt);
  return forward(w, PackedBatch::single(ids), ForwardOptions{capture, false});
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<float> make_weights(const ModelCheckpoint&,
                                     const std::function<bool(const std::string&)>&);
template Weights<double> make_weights(const ModelCheckpoint&,
                                      const std::function<bool(const std::string&)>&);
template ForwardResult<float> forward(const Weights<float>&, const PackedBatch&,
                                      const ForwardOptions&);
template ForwardResult<double> forward(const Weights<double>&, const PackedBatch&,
                                       const ForwardOptions&);

}  // namespace elusive
