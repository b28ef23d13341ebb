#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "elusive/document.hpp"
#include "elusive/io.hpp"
#include "elusive/tokenizer.hpp"

namespace elusive {

enum class Strategy { random, by_attention, by_attention_diff, by_distance };
std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view text);  // ConfigError

struct AugmentationPolicy {
  Strategy strategy = Strategy::by_attention_diff;
  double alpha = 0.6;
  double beta = 0.03;
  int copies = 10;
  bool protect_fields = true;
  std::uint64_t seed = 0;

  // alpha in [0, 1], beta > 0, copies >= 1.
  void validate() const;
  Json to_json() const;
  static AugmentationPolicy from_json(const Json& j);  // unknown keys rejected
};

// alpha * (1 - exp(-beta * r)).
double dropout_prob(int rank, double alpha, double beta);

// Copy 0 is the untouched original; copies 1..n are augmented.
struct AugmentedExample {
  std::string doc_id;
  int copy = 0;
  std::vector<int> token_ids;
  std::vector<int> kept_indices;  // strictly increasing document indices
};

// Rank of every document token under the policy's strategy (0 = most kept).
// Ties go to the smaller index. Empty for `random`.
std::vector<int> token_ranks(const TokenizedDocument& doc, Strategy strategy,
                             const std::vector<double>* scores);

// Per-token drop probability; zero inside field spans when protect_fields.
std::vector<double> drop_probabilities(const TokenizedDocument& doc, const AugmentationPolicy& policy,
                                       const std::vector<double>* scores);

// `scores` holds one document-level score per token and is required by the
// attention strategies. Documents handled here carry no BOS/EOS; those are
// added at training time and so can never be dropped.
std::vector<AugmentedExample> augment(const TokenizedDocument& doc, const AugmentationPolicy& policy,
                                      const std::vector<double>* scores = nullptr);

using ScoreProvider = std::function<std::vector<double>(const TokenizedDocument&)>;

// Originals followed by their copies, document by document.
std::vector<AugmentedExample> augment_corpus(const std::vector<TokenizedDocument>& docs,
                                             const AugmentationPolicy& policy,
                                             const ScoreProvider& scores = {});

void write_augmented(const std::filesystem::path& path, const std::vector<AugmentedExample>& corpus);
std::vector<AugmentedExample> read_augmented(const std::filesystem::path& path);

std::string render_example(const AugmentedExample& example, const Vocabulary& vocab);

}  // namespace elusive
