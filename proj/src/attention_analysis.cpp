#include "elusive/attention_analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "elusive/errors.hpp"
#include "elusive/tokenizer.hpp"

namespace elusive {

namespace {

constexpr std::array<std::string_view, kCategoryCount> kCategoryNames = {
    "name", "birth_date", "birth_city", "university", "major", "company", "other-word"};

bool whitespace_only(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::vector<int> with_bos(const TokenizedDocument& doc) {
  std::vector<int> ids;
  ids.reserve(doc.ids.size() + 1);
  ids.push_back(Vocabulary::kBos);
  ids.insert(ids.end(), doc.ids.begin(), doc.ids.end());
  return ids;
}

}  // namespace

std::string_view query_kind_name(QueryKind kind) {
  return kind == QueryKind::preposition ? "preposition" : "all_tokens";
}

std::string_view category_name(Category c) { return kCategoryNames[static_cast<int>(c)]; }

std::optional<Category> parse_category(std::string_view text) {
  for (int i = 0; i < kCategoryCount; ++i)
    if (kCategoryNames[i] == text) return static_cast<Category>(i);
  return std::nullopt;
}

std::vector<AttentionProfile> profiles_from_capture(const AttentionCapture& capture,
                                                    const TokenizedDocument& doc, QueryKind kind,
                                                    const std::string& preset) {
  if (capture.average.rows() != doc.size() + 1)
    throw DataError("capture of " + std::to_string(capture.average.rows()) + " rows for document " +
                    doc.doc_id + " of " + std::to_string(doc.size()) + " tokens");
  auto row = [&](int q, std::optional<Field> field) {
    AttentionProfile p;
    p.doc_id = doc.doc_id;
    p.query_index = q;
    p.kind = kind;
    p.field = field;
    p.preset = preset;
    p.scores.resize(static_cast<std::size_t>(q) + 1);
    for (int c = 0; c <= q; ++c) p.scores[static_cast<std::size_t>(c)] = capture.average(q, c);
    return p;
  };
  std::vector<AttentionProfile> out;
  if (kind == QueryKind::preposition) {
    if (doc.prepositions.empty())
      throw DataError("document " + doc.doc_id + " has no preposition annotations");
    for (const auto& prep : doc.prepositions) out.push_back(row(prep.token_index + 1, prep.field));
  } else {
    for (int i = 0; i < doc.size(); ++i) out.push_back(row(i + 1, std::nullopt));
  }
  return out;
}

std::vector<AttentionProfile> extract_profiles(const ModelCheckpoint& ckpt,
                                               const TokenizedDocument& doc, QueryKind kind) {
  if (kind == QueryKind::preposition && doc.prepositions.empty())
    throw DataError("document " + doc.doc_id + " has no preposition annotations");
  const auto ids = with_bos(doc);
  auto result = forward(ckpt, ids, CaptureMode::average);
  return profiles_from_capture(result.captures.at(0), doc, kind, ckpt.config.preset);
}

RankableSet filter_tokens(const QueryScores& row, const TokenizedDocument& doc) {
  RankableSet set;
  set.doc_id = row.doc_id;
  set.query_index = row.query_index;
  for (int p = 1; p < static_cast<int>(row.scores.size()); ++p) {
    const auto& piece = doc.pieces.at(static_cast<std::size_t>(p - 1));
    if (is_punctuation_token(piece) || whitespace_only(piece)) continue;
    set.positions.push_back(p);
    set.scores.push_back(row.scores[static_cast<std::size_t>(p)]);
  }
  return set;
}

AttentionDiff diff_profiles(const AttentionProfile& large, const AttentionProfile& small) {
  if (large.doc_id != small.doc_id || large.query_index != small.query_index ||
      large.scores.size() != small.scores.size())
    throw DataError("diff_profiles: rows differ (" + large.doc_id + "@" +
                    std::to_string(large.query_index) + " vs " + small.doc_id + "@" +
                    std::to_string(small.query_index) + ")");
  AttentionDiff d;
  d.doc_id = large.doc_id;
  d.query_index = large.query_index;
  d.kind = large.kind;
  d.field = large.field;
  d.scores.resize(large.scores.size());
  for (std::size_t i = 0; i < d.scores.size(); ++i) d.scores[i] = large.scores[i] - small.scores[i];
  return d;
}

Category category_at(const TokenizedDocument& doc, int position) {
  const int index = position - 1;
  for (const auto& span : doc.fields)
    if (index >= span.token_start && index < span.token_end)
      return static_cast<Category>(static_cast<int>(span.field));
  return Category::other_word;
}

TokenRanking rank_tokens(const RankableSet& set, const TokenizedDocument& doc) {
  if (set.unrankable())
    throw DataError("no rankable tokens for " + set.doc_id + " at query " +
                    std::to_string(set.query_index));
  std::vector<std::size_t> order(set.positions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (set.scores[a] != set.scores[b]) return set.scores[a] > set.scores[b];
    return set.positions[a] < set.positions[b];
  });
  TokenRanking ranking;
  ranking.doc_id = set.doc_id;
  ranking.query_index = set.query_index;
  int rank = 0;
  for (auto i : order) {
    const int p = set.positions[i];
    ranking.tokens.push_back(
        {p, doc.pieces.at(static_cast<std::size_t>(p - 1)), category_at(doc, p), set.scores[i], rank++});
  }
  return ranking;
}

int ConstitutionTable::total(Category c) const {
  int n = 0;
  for (const auto& row : counts) n += row[static_cast<int>(c)];
  return n;
}

std::string ConstitutionTable::to_csv() const {
  std::ostringstream os;
  os << "rank,category,count\n";
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < kCategoryCount; ++c)
      os << r << ',' << kCategoryNames[c] << ',' << counts[r][c] << '\n';
  return os.str();
}

ConstitutionTable ConstitutionTable::from_csv(std::string_view text) {
  ConstitutionTable t;
  t.k = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  int row = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    if (!header) {
      if (line != "rank,category,count")
        throw DataError("constitution csv row " + std::to_string(row) + ": bad header");
      header = true;
      continue;
    }
    std::istringstream fields(line);
    std::string rank_s, cat_s, count_s;
    std::getline(fields, rank_s, ',');
    std::getline(fields, cat_s, ',');
    std::getline(fields, count_s, ',');
    const auto cat = parse_category(cat_s);
    int rank = -1, count = -1;
    try {
      std::size_t used = 0;
      rank = std::stoi(rank_s, &used);
      if (used != rank_s.size()) rank = -1;
      count = std::stoi(count_s, &used);
      if (used != count_s.size()) count = -1;
    } catch (const std::exception&) {
      rank = -1;
    }
    if (!cat || rank < 0 || count < 0 || rank > 10000)
      throw DataError("constitution csv row " + std::to_string(row) + ": malformed \"" + line + "\"");
    if (rank >= t.k) {
      t.k = rank + 1;
      t.counts.resize(static_cast<std::size_t>(t.k), std::array<int, kCategoryCount>{});
    }
    t.counts[rank][static_cast<int>(*cat)] = count;
  }
  if (t.k == 0) throw DataError("constitution csv has no data rows");
  int docs = 0;
  for (int c = 0; c < kCategoryCount; ++c) docs += t.counts[0][c];
  t.documents = docs;
  return t;
}

ConstitutionTable constitution(const std::vector<TokenRanking>& rankings, int k) {
  if (k < 1) throw ConfigError("constitution: k must be positive");
  ConstitutionTable t;
  t.k = k;
  t.documents = static_cast<int>(rankings.size());
  t.counts.assign(static_cast<std::size_t>(k), std::array<int, kCategoryCount>{});
  for (const auto& r : rankings)
    for (int i = 0; i < k && i < static_cast<int>(r.tokens.size()); ++i)
      ++t.counts[i][static_cast<int>(r.tokens[i].category)];
  return t;
}

std::vector<AttentionDiff> compare_checkpoints(const ModelCheckpoint& a, const ModelCheckpoint& b,
                                               const std::vector<TokenizedDocument>& docs,
                                               QueryKind kind) {
  if (a.config.vocab_size != b.config.vocab_size)
    throw DataError("compare_checkpoints: vocabularies differ (" +
                    std::to_string(a.config.vocab_size) + " vs " +
                    std::to_string(b.config.vocab_size) + " tokens)");
  std::vector<AttentionDiff> out;
  for (const auto& doc : docs) {
    auto pa = extract_profiles(a, doc, kind);
    auto pb = extract_profiles(b, doc, kind);
    for (std::size_t i = 0; i < pa.size(); ++i) out.push_back(diff_profiles(pa[i], pb[i]));
  }
  return out;
}

std::vector<double> document_scores(const std::vector<const QueryScores*>& rows, int doc_length) {
  std::vector<double> sum(static_cast<std::size_t>(doc_length), 0.0);
  std::vector<int> hits(static_cast<std::size_t>(doc_length), 0);
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto* row : rows) {
    for (std::size_t p = 1; p < row->scores.size(); ++p) {
      const std::size_t i = p - 1;
      if (i >= sum.size()) throw DataError("document_scores: row longer than the document");
      sum[i] += row->scores[p];
      ++hits[i];
    }
  }
  std::vector<double> out(sum.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (hits[i] == 0) continue;
    out[i] = sum[i] / hits[i];
    lowest = std::min(lowest, out[i]);
  }
  if (!std::isfinite(lowest)) lowest = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (hits[i] == 0) out[i] = lowest;
  return out;
}

Json scores_to_json(const QueryScores& row) {
  Json j;
  j["doc_id"] = row.doc_id;
  j["query_index"] = row.query_index;
  j["kind"] = query_kind_name(row.kind);
  if (row.field) j["field"] = field_name(*row.field);
  j["scores"] = row.scores;
  return j;
}

void write_scores_jsonl(const std::filesystem::path& path,
                        const std::vector<const QueryScores*>& rows) {
  std::vector<Json> out;
  out.reserve(rows.size());
  for (const auto* r : rows) out.push_back(scores_to_json(*r));
  write_jsonl(path, out);
}

}  // namespace elusive
