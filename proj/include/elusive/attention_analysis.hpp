#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elusive/document.hpp"
#include "elusive/io.hpp"
#include "elusive/model.hpp"

namespace elusive {

enum class QueryKind { preposition, all_tokens };
std::string_view query_kind_name(QueryKind kind);

enum class Category { name, birth_date, birth_city, university, major, company, other_word };
inline constexpr int kCategoryCount = 7;
std::string_view category_name(Category c);
std::optional<Category> parse_category(std::string_view text);

// Scores over one causal row. Indices are sequence positions: 0 is BOS and
// document token i sits at i + 1. scores[p] covers positions 0..query_index,
// the query token included, so an unfiltered attention row sums to one.
struct QueryScores {
  std::string doc_id;
  int query_index = 0;
  QueryKind kind = QueryKind::preposition;
  std::optional<Field> field;  // set for preposition queries
  std::vector<double> scores;
};

struct AttentionProfile : QueryScores {
  std::string preset;
};

// Large minus small over the same causal row.
struct AttentionDiff : QueryScores {};

// Profiles read off an averaged capture of [BOS, doc tokens...].
std::vector<AttentionProfile> profiles_from_capture(const AttentionCapture& capture,
                                                    const TokenizedDocument& doc, QueryKind kind,
                                                    const std::string& preset = {});

// One forward per document. Preposition queries need span metadata (DataError otherwise).
std::vector<AttentionProfile> extract_profiles(const ModelCheckpoint& ckpt,
                                               const TokenizedDocument& doc, QueryKind kind);

// The rankable subset of a row: BOS, punctuation-only and whitespace-only
// tokens removed; surviving scores untouched and in position order.
struct RankableSet {
  std::string doc_id;
  int query_index = 0;
  std::vector<int> positions;
  std::vector<double> scores;

  bool unrankable() const { return positions.empty(); }
};

RankableSet filter_tokens(const QueryScores& row, const TokenizedDocument& doc);

// DataError when doc, query or row length differ.
AttentionDiff diff_profiles(const AttentionProfile& large, const AttentionProfile& small);

struct RankedToken {
  int position = 0;
  std::string token;
  Category category = Category::other_word;
  double score = 0.0;
  int rank = 0;
};

struct TokenRanking {
  std::string doc_id;
  int query_index = 0;
  std::vector<RankedToken> tokens;  // rank order
};

Category category_at(const TokenizedDocument& doc, int position);

// Score descending, ties by position ascending. DataError on an empty set.
TokenRanking rank_tokens(const RankableSet& set, const TokenizedDocument& doc);

struct ConstitutionTable {
  int k = 10;
  int documents = 0;
  std::vector<std::array<int, kCategoryCount>> counts;  // [rank][category]

  int count(int rank, Category c) const { return counts[rank][static_cast<int>(c)]; }
  int total(Category c) const;
  // rank,category,count with one row per (rank, category).
  std::string to_csv() const;
  static ConstitutionTable from_csv(std::string_view text);  // DataError naming the row
};

ConstitutionTable constitution(const std::vector<TokenRanking>& rankings, int k = 10);

// Per-document, per-query diffs between two checkpoints sharing a vocabulary.
std::vector<AttentionDiff> compare_checkpoints(const ModelCheckpoint& a, const ModelCheckpoint& b,
                                               const std::vector<TokenizedDocument>& docs,
                                               QueryKind kind);

// One score per document token (document indices): the mean of its scores over
// all rows whose causal context contains it. Tokens outside every context get
// the smallest observed score.
std::vector<double> document_scores(const std::vector<const QueryScores*>& rows, int doc_length);

Json scores_to_json(const QueryScores& row);
void write_scores_jsonl(const std::filesystem::path& path, const std::vector<const QueryScores*>& rows);

}  // namespace elusive
