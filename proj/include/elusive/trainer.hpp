#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "elusive/io.hpp"
#include "elusive/model.hpp"
#include "elusive/tokenizer.hpp"

namespace elusive {

enum class LrSchedule { constant, linear_warmup_constant };
enum class TrainMode { full, lora };

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 16;
  LrSchedule schedule = LrSchedule::constant;
  int warmup_steps = 0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::full;
  int eval_every = 0;  // epochs between validator calls; 0 disables selection
  double grad_clip = 1.0;
  LoraSpec lora;  // used when mode == lora and the base has no adapters

  // Adam moments are fixed at beta1 0.9, beta2 0.999, eps 1e-8.
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  void validate() const;  // ConfigError
  Json to_json() const;
  static TrainConfig from_json(const Json& j);  // unknown keys rejected
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean token loss per epoch
  std::int64_t steps = 0;
  double seconds = 0.0;
  int best_epoch = 0;               // epoch of the returned checkpoint (1-based)
  std::optional<double> best_score;  // validator score at best_epoch
  std::vector<std::pair<int, double>> validation;  // (epoch, score)

  // Deterministic fields only unless with_timing.
  Json to_json(bool with_timing = false) const;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  TrainReport report;
};

// Higher is better. Called on a snapshot every eval_every epochs and after the last epoch.
using Validator = std::function<double(const ModelCheckpoint&)>;

// Each sequence is trained as [BOS, tokens..., EOS]. Sequences are grouped
// into batches after a shuffle that depends only on (seed, epoch); sequences
// in a batch never attend to each other. Positions whose input or target is PAD
// carry no loss.
TrainResult pretrain(const TrainConfig& config, const ModelConfig& model_config,
                     const std::vector<std::vector<int>>& corpus,
                     const Validator& validator = {});

// Same loop from an existing checkpoint. In lora mode adapters are attached when
// absent and only adapter factors are updated. Throws DataError when the corpus
// vocabulary differs from the checkpoint's.
TrainResult continual_pretrain(const ModelCheckpoint& base, const TrainConfig& config,
                               const std::vector<std::vector<int>>& corpus,
                               const Vocabulary& vocab, const Validator& validator = {});

// Batch order for one epoch: a permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// Mean next-token loss of a checkpoint over sequences (evaluation only).
double mean_loss(const ModelCheckpoint& ckpt, const std::vector<std::vector<int>>& corpus,
                 int batch_size = 32);

}  // namespace elusive
