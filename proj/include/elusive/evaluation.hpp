#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elusive/corpus.hpp"
#include "elusive/io.hpp"
#include "elusive/model.hpp"
#include "elusive/tokenizer.hpp"

namespace elusive {

struct EvalConfig {
  int shots = 5;
  int max_new_tokens = 16;
  std::uint64_t seed = 0;  // exemplar selection
  int batch_size = 64;     // prompts decoded together

  void validate() const;
  Json to_json() const;
  static EvalConfig from_json(const Json& j);  // unknown keys rejected
};

struct Exemplar {
  std::string question;
  std::string answer;
};

// "Question: {q}\nAnswer: {a}\n" per exemplar, then "Question: {q}\nAnswer:".
// The `shots` exemplars are drawn without replacement by a stream keyed on
// (seed, question). DataError when the pool is too small.
std::string build_prompt(const std::string& question, const std::vector<Exemplar>& exemplars,
                         int shots, std::uint64_t seed);

// Lowercase, strip ASCII punctuation, drop a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

struct Score {
  int em = 0;
  double f1 = 0.0;
};

// Exact match and multiset token F1 over normalized answers.
Score score_answer(std::string_view prediction, std::string_view gold);

struct QuestionResult {
  std::string id;
  std::string doc_id;
  std::optional<Field> field;
  std::string question;
  std::string gold;
  std::string prediction;
  int em = 0;
  double f1 = 0.0;
};

struct FieldSummary {
  int count = 0;
  double em = 0.0;
  double f1 = 0.0;
};

struct DistanceRow {
  Field field = Field::birth_date;
  double mean_distance = 0.0;
  double em = 0.0;
  double f1 = 0.0;
};

struct EvalResult {
  std::vector<QuestionResult> questions;
  std::map<std::string, FieldSummary> per_field;  // field name, plus "overall"
  std::vector<DistanceRow> distance;              // fact fields present in the questions

  Json to_json() const;
  std::string distance_csv() const;  // field,mean_distance,em,f1
};

// Maps each prompt (BOS + prompt tokens) to its generated continuation.
using Generator = std::function<std::vector<std::vector<int>>(const std::vector<std::vector<int>>&)>;

// Greedy decoding; stops at newline or EOS (not included) or after max_new_tokens.
Generator greedy_generator(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                           const EvalConfig& config);

// Mean tail-span index minus mean name-span index (document indices).
double field_distance(const TokenizedDocument& doc, Field field);

// `docs` supplies spans for the distance table; may be empty for external corpora.
EvalResult evaluate_with(const Generator& generate, const std::vector<QAPair>& qa,
                         const std::vector<Exemplar>& exemplars, const Vocabulary& vocab,
                         const std::vector<TokenizedDocument>& docs, const EvalConfig& config);

// Closed-book evaluation of a checkpoint. DataError on vocabulary mismatch.
EvalResult evaluate(const ModelCheckpoint& ckpt, const std::vector<QAPair>& qa,
                    const std::vector<Exemplar>& exemplars, const Vocabulary& vocab,
                    const std::vector<TokenizedDocument>& docs, const EvalConfig& config);

// Rank correlation with average ranks for ties; NaN when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace elusive
