#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "elusive/io.hpp"
#include "elusive/tensor.hpp"

namespace elusive {

struct ModelConfig {
  std::string preset = "toy-small";
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq_len = 512;
  double rope_theta = 10000.0;

  int d_head() const { return n_heads > 0 ? d_model / n_heads : 0; }

  // Throws ConfigError: non-positive sizes, d_model % n_heads, odd d_head.
  void validate() const;

  // toy-small: 4 layers, 4 heads, d_model 128, d_ff 512.
  // toy-large: 8 layers, 8 heads, d_model 256, d_ff 1024.
  static ModelConfig preset_config(std::string_view name, int vocab_size, int max_seq_len = 512);

  Json to_json() const;
  // Unknown keys are rejected.
  static ModelConfig from_json(const Json& j);

  bool operator==(const ModelConfig&) const = default;
};

// Projection kinds inside each block that may carry adapters.
inline const std::vector<std::string> kProjections = {"wq", "wk", "wv", "wo", "w_up", "w_down"};

struct LoraSpec {
  int rank = 4;
  double alpha_scale = 1.0;
  std::vector<std::string> targets = kProjections;

  Json to_json() const;
  static LoraSpec from_json(const Json& j);
  bool operator==(const LoraSpec&) const = default;
};

struct Parameter {
  ad::Shape shape;
  ad::Matrix<float> value;
  bool operator==(const Parameter& o) const { return shape == o.shape && value == o.value; }
};

// Adapter factors live next to their base matrix as "<name>.lora_a" (rank x in)
// and "<name>.lora_b" (out x rank).
struct ModelCheckpoint {
  ModelConfig config;
  std::optional<LoraSpec> lora;
  std::map<std::string, Parameter> params;
  std::int64_t step = 0;
  std::string rng_state;

  const Parameter& at(const std::string& name) const;
  std::int64_t parameter_count() const;
  // Sum of base (non-adapter) parameter sizes.
  std::int64_t base_parameter_count() const;
};

std::string layer_param(int layer, std::string_view kind);
bool is_adapter_param(std::string_view name);

ModelCheckpoint init_model(const ModelConfig& config, std::uint64_t seed);

// A: N(0, 0.02^2), B: zero. Throws ConfigError for rank < 1 or rank > min(out, in),
// or an unknown target.
ModelCheckpoint attach_lora(const ModelCheckpoint& base, const LoraSpec& spec, std::uint64_t seed);
// W <- W + alpha_scale * B A for every adapted matrix; the result carries no adapters.
ModelCheckpoint merge_lora(const ModelCheckpoint& adapted);
// Sum of rank * (out + in) over the adapted matrices.
std::int64_t lora_trainable_count(const ModelCheckpoint& adapted);

// ---------------------------------------------------------------------------
// Forward

// Sequences laid end to end; attention is block diagonal over segments and
// positions restart at zero in each segment.
struct PackedBatch {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<ad::Segment> segments;

  static PackedBatch pack(std::span<const std::vector<int>> sequences);
  static PackedBatch single(std::span<const int> ids);
  int total() const { return static_cast<int>(ids.size()); }
};

enum class CaptureMode { none, average, full };

struct ForwardOptions {
  CaptureMode capture = CaptureMode::none;
  bool last_only = false;  // logits for the final row of each segment only
};

// Attention of one sequence. heads[layer][head] is filled in full mode only.
struct AttentionCapture {
  std::vector<std::vector<Eigen::MatrixXd>> heads;
  Eigen::MatrixXd average;
};

template <typename Scalar>
struct Weights {
  ModelConfig config;
  std::optional<LoraSpec> lora;
  std::map<std::string, ad::Tensor<Scalar>> tensors;

  const ad::Tensor<Scalar>& operator[](const std::string& name) const;
};

// Leaves for every parameter; `trainable(name)` decides requires_grad.
template <typename Scalar>
Weights<Scalar> make_weights(const ModelCheckpoint& ckpt,
                             const std::function<bool(const std::string&)>& trainable = {});
// Copies tensor values back into the checkpoint.
void store_weights(const Weights<float>& weights, ModelCheckpoint& ckpt);

template <typename Scalar>
struct ForwardResult {
  ad::Tensor<Scalar> logits;  // [rows, vocab]; rows = tokens, or segments with last_only
  std::vector<AttentionCapture> captures;  // one per segment when requested
};

// Throws DataError when a segment exceeds max_seq_len, IndexError for bad ids.
template <typename Scalar>
ForwardResult<Scalar> forward(const Weights<Scalar>& weights, const PackedBatch& batch,
                              const ForwardOptions& options = {});

ForwardResult<float> forward(const ModelCheckpoint& ckpt, std::span<const int> ids,
                             CaptureMode capture = CaptureMode::none);

extern template ForwardResult<float> forward(const Weights<float>&, const PackedBatch&,
                                             const ForwardOptions&);
extern template ForwardResult<double> forward(const Weights<double>&, const PackedBatch&,
                                              const ForwardOptions&);
extern template Weights<float> make_weights(const ModelCheckpoint&,
                                            const std::function<bool(const std::string&)>&);
extern template Weights<double> make_weights(const ModelCheckpoint&,
                                             const std::function<bool(const std::string&)>&);

// ---------------------------------------------------------------------------
// Persistence
//
// "ELUSCKPT", u32 version, u64 header length, header JSON (config, lora, step,
// rng state), u32 tensor count, then per tensor: u32 name length, name,
// u32 rank, u64 dims, little-endian f32 data. Tensors are written in name order.

std::string serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace elusive
