#include "elusive/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elusive/errors.hpp"
#include "elusive/rng.hpp"

namespace elusive {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::by_attention: return "by_attention";
    case Strategy::by_attention_diff: return "by_attention_diff";
    case Strategy::by_distance: return "by_distance";
  }
  return "?";
}

Strategy parse_strategy(std::string_view text) {
  for (auto s : {Strategy::random, Strategy::by_attention, Strategy::by_attention_diff,
                 Strategy::by_distance})
    if (strategy_name(s) == text) return s;
  throw ConfigError("unknown augmentation strategy \"" + std::string(text) + "\"");
}

void AugmentationPolicy::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("augmentation: alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw ConfigError("augmentation: beta must be positive");
  if (copies < 1) throw ConfigError("augmentation: copies must be at least 1");
}

Json AugmentationPolicy::to_json() const {
  Json j;
  j["strategy"] = strategy_name(strategy);
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["copies"] = copies;
  j["protect_fields"] = protect_fields;
  j["seed"] = seed;
  return j;
}

AugmentationPolicy AugmentationPolicy::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("augmentation: expected an object");
  for (const auto& item : j.items()) {
    static const std::vector<std::string> allowed = {"strategy", "alpha",          "beta",
                                                     "copies",   "protect_fields", "seed"};
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError("augmentation: unknown key \"" + item.key() + "\"");
  }
  AugmentationPolicy p;
  try {
    p.strategy = parse_strategy(j.value("strategy", std::string(strategy_name(p.strategy))));
    p.alpha = j.value("alpha", p.alpha);
    p.beta = j.value("beta", p.beta);
    p.copies = j.value("copies", p.copies);
    p.protect_fields = j.value("protect_fields", p.protect_fields);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("augmentation: ") + e.what());
  }
  p.validate();
  return p;
}

double dropout_prob(int rank, double alpha, double beta) {
  if (rank < 0) throw ContractError("dropout_prob: negative rank");
  if (rank == 0) return 0.0;
  return -alpha * std::expm1(-beta * static_cast<double>(rank));
}

std::vector<int> token_ranks(const TokenizedDocument& doc, Strategy strategy,
                             const std::vector<double>* scores) {
  const auto n = static_cast<std::size_t>(doc.size());
  std::vector<double> key(n);
  switch (strategy) {
    case Strategy::random:
      return {};
    case Strategy::by_attention:
    case Strategy::by_attention_diff:
      if (!scores) throw DataError(std::string(strategy_name(strategy)) + " needs token scores");
      if (scores->size() != n)
        throw DataError("document " + doc.doc_id + " has " + std::to_string(n) + " tokens but " +
                        std::to_string(scores->size()) + " scores");
      key = *scores;
      break;
    case Strategy::by_distance: {
      const auto* name = doc.find_field(Field::name);
      if (!name) throw DataError("by_distance needs the name span of " + doc.doc_id);
      for (std::size_t i = 0; i < n; ++i) {
        const int idx = static_cast<int>(i);
        const int d = idx < name->token_start ? name->token_start - idx
                      : idx >= name->token_end ? idx - name->token_end + 1
                                               : 0;
        key[i] = d;  // farther = higher key = lower rank
      }
      break;
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  std::vector<int> ranks(n);
  for (std::size_t r = 0; r < n; ++r) ranks[order[r]] = static_cast<int>(r);
  return ranks;
}

std::vector<double> drop_probabilities(const TokenizedDocument& doc, const AugmentationPolicy& policy,
                                       const std::vector<double>* scores) {
  policy.validate();
  if (policy.protect_fields && !doc.has_spans())
    throw DataError("protect_fields needs field spans, which " + doc.doc_id + " lacks");
  const auto n = static_cast<std::size_t>(doc.size());
  std::vector<double> p(n, policy.alpha);
  if (policy.strategy != Strategy::random) {
    const auto ranks = token_ranks(doc, policy.strategy, scores);
    for (std::size_t i = 0; i < n; ++i) p[i] = dropout_prob(ranks[i], policy.alpha, policy.beta);
  }
  if (policy.protect_fields)
    for (const auto& span : doc.fields)
      for (int i = span.token_start; i < span.token_end; ++i) p[static_cast<std::size_t>(i)] = 0.0;
  return p;
}

std::vector<AugmentedExample> augment(const TokenizedDocument& doc, const AugmentationPolicy& policy,
                                      const std::vector<double>* scores) {
  const auto p = drop_probabilities(doc, policy, scores);
  std::vector<AugmentedExample> out;
  out.reserve(static_cast<std::size_t>(policy.copies));
  for (int copy = 1; copy <= policy.copies; ++copy) {
    Rng rng(derive_seed(policy.seed, hash_string(doc.doc_id), static_cast<std::uint64_t>(copy)));
    AugmentedExample ex;
    ex.doc_id = doc.doc_id;
    ex.copy = copy;
    for (std::size_t i = 0; i < p.size(); ++i) {
      // One draw per token keeps streams aligned across policies.
      const double u = rng.uniform();
      if (u < p[i]) continue;
      ex.kept_indices.push_back(static_cast<int>(i));
      ex.token_ids.push_back(doc.ids[i]);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<AugmentedExample> augment_corpus(const std::vector<TokenizedDocument>& docs,
                                             const AugmentationPolicy& policy,
                                             const ScoreProvider& scores) {
  policy.validate();
  std::vector<AugmentedExample> out;
  out.reserve(docs.size() * static_cast<std::size_t>(policy.copies + 1));
  for (const auto& doc : docs) {
    AugmentedExample original;
    original.doc_id = doc.doc_id;
    original.token_ids = doc.ids;
    original.kept_indices.resize(doc.ids.size());
    std::iota(original.kept_indices.begin(), original.kept_indices.end(), 0);
    out.push_back(std::move(original));
    std::optional<std::vector<double>> s;
    if (scores) s = scores(doc);
    auto copies = augment(doc, policy, s ? &*s : nullptr);
    std::move(copies.begin(), copies.end(), std::back_inserter(out));
  }
  return out;
}

void write_augmented(const std::filesystem::path& path, const std::vector<AugmentedExample>& corpus) {
  std::vector<Json> rows;
  rows.reserve(corpus.size());
  for (const auto& ex : corpus) {
    Json j;
    j["doc_id"] = ex.doc_id;
    j["copy"] = ex.copy;
    j["token_ids"] = ex.token_ids;
    j["kept_indices"] = ex.kept_indices;
    rows.push_back(std::move(j));
  }
  write_jsonl(path, rows);
}

std::vector<AugmentedExample> read_augmented(const std::filesystem::path& path) {
  std::vector<AugmentedExample> out;
  int line = 0;
  for (const auto& j : read_jsonl(path)) {
    ++line;
    try {
      AugmentedExample ex;
      ex.doc_id = j.at("doc_id").get<std::string>();
      ex.copy = j.at("copy").get<int>();
      ex.token_ids = j.at("token_ids").get<std::vector<int>>();
      ex.kept_indices = j.at("kept_indices").get<std::vector<int>>();
      if (ex.token_ids.size() != ex.kept_indices.size())
        throw DataError("token_ids and kept_indices differ in length");
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ": record " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

std::string render_example(const AugmentedExample& example, const Vocabulary& vocab) {
  return detokenize(example.token_ids, vocab);
}

}  // namespace elusive
