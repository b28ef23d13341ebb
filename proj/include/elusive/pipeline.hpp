#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "elusive/attention_analysis.hpp"
#include "elusive/augmentation.hpp"
#include "elusive/corpus.hpp"
#include "elusive/evaluation.hpp"
#include "elusive/io.hpp"
#include "elusive/model.hpp"
#include "elusive/trainer.hpp"

namespace elusive {

// continual: pretrain on the background, then continue on the target biographies.
// joint: every row trains from scratch on background plus its target biographies.
enum class Protocol { continual, joint };
std::string_view protocol_name(Protocol p);

// Which checkpoints the attention contrast reads in the continual protocol.
enum class AttentionSource { pretrained, plain };

struct CorpusSection {
  int targets = 100;          // people learned only from their biographies
  int background = 300;       // people seen in pretraining, biographies and QA
  int exemplar_people = 4;    // QA pool for few-shot prompts; also in pretraining
  Layout layout = Layout::fixed;
  int qa_per_document = 5;    // QA blocks per pretraining document
  int validation_people = 0;  // target people whose QA scores checkpoint selection
  bool replay_background = false;  // continual protocol: mix the background corpus back in
};

struct AnalysisSection {
  int top_k = 10;
  QueryKind query = QueryKind::preposition;
  AttentionSource source = AttentionSource::plain;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Protocol protocol = Protocol::continual;
  CorpusSection corpus;
  ModelConfig small;  // vocab_size is filled in from the generated vocabulary
  ModelConfig large;
  TrainConfig pretrain_small;  // joint protocol: the whole training of each small row
  TrainConfig pretrain_large;
  TrainConfig finetune;  // continual protocol only
  AugmentationPolicy augmentation;  // strategy and seed are set per row
  EvalConfig eval;
  AnalysisSection analysis;

  RunConfig();
  void validate() const;  // ConfigError
  Json to_json() const;
  // Unknown keys are rejected at every level.
  static RunConfig from_json(const Json& j);
  // Reads a JSON file; ELUSIVE_SEED, when set, replaces the seed.
  static RunConfig load(const std::filesystem::path& path);
};

inline constexpr std::array<std::string_view, 5> kSummaryRows = {
    "plain", "random", "by_attention", "by_attention_diff", "by_distance"};

struct SummaryCell {
  double em = 0.0;
  double f1 = 0.0;
};

struct PipelineSummary {
  // row -> fact field -> scores
  std::map<std::string, std::map<std::string, SummaryCell>> table;
  double plain_distance_spearman = 0.0;  // NaN when undefined
  int name_top_k_diff = 0;   // name tokens in the top-k of large-minus-small at the company preposition
  int name_top_k_large = 0;  // same, raw attention of the large model
  int name_top_k_small = 0;
  // Of the two checkpoints whose attention was contrasted.
  double target_loss_small = 0.0;  // mean token loss on the target biographies
  double target_loss_large = 0.0;
  double background_em_small = 0.0;  // QA exact match on background people
  double background_em_large = 0.0;

  std::string to_csv() const;  // strategy then <field>_em,<field>_f1 per fact field
  Json to_json() const;
};

using Logger = std::function<void(std::string_view)>;

// Runs every stage into run_dir, writing artifacts as soon as they exist so a
// failure leaves the completed ones behind. Re-running over an existing run
// directory compares the new manifest with the old one (see verification.json).
PipelineSummary run_pipeline(const RunConfig& config, const std::filesystem::path& run_dir,
                             const Logger& log = {});

// Pretraining text for the background: biographies plus grouped QA blocks.
std::vector<std::string> qa_documents(const std::vector<QAPair>& qa, int per_document,
                                      std::uint64_t seed);

}  // namespace elusive
