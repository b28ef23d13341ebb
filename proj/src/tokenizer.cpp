#include "elusive/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "elusive/errors.hpp"

namespace elusive {

namespace {

constexpr std::string_view kPunctuation = ".,!?;:\"'()";
constexpr std::array<std::string_view, 4> kReservedNames = {"<bos>", "<eos>", "<pad>", "<unk>"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; }

std::string escape(std::string_view token) {
  std::string out;
  for (char c : token) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && i + 1 < line.size()) {
      ++i;
      out += line[i] == 'n' ? '\n' : line[i];
    } else {
      out += line[i];
    }
  }
  return out;
}

bool attaches_left(std::string_view piece) {
  return piece.size() == 1 && std::string_view(".,!?;:)").find(piece[0]) != std::string_view::npos;
}

}  // namespace

bool is_punctuation_char(char c) { return kPunctuation.find(c) != std::string_view::npos; }

bool is_punctuation_token(std::string_view token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), is_punctuation_char);
}

Vocabulary::Vocabulary() {
  for (auto name : kReservedNames) push(std::string(name));
}

void Vocabulary::push(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, int min_count) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, long> counts;
  for (const auto& text : corpus)
    for (auto& piece : split_words(text)) ++counts[piece.text];
  std::vector<std::pair<std::string, long>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (auto& [token, count] : ordered) {
    if (count < min_count || vocab.index_.contains(token)) continue;
    vocab.push(token);
  }
  vocab.frozen_ = true;
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) out << escape(tokens_[i]) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string token = unescape(line);
    if (vocab.index_.contains(token)) {
      throw DataError("vocabulary " + path.string() + " line " + std::to_string(line_no) +
                      ": duplicate token");
    }
    vocab.push(std::move(token));
  }
  vocab.frozen_ = true;
  return vocab;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

std::vector<WordPiece> split_words(std::string_view text) {
  std::vector<WordPiece> pieces;
  const int n = static_cast<int>(text.size());
  int i = 0;
  while (i < n) {
    if (text[static_cast<std::size_t>(i)] == '\n') {
      pieces.push_back({std::string(Vocabulary::kNewline), {i, i + 1}});
      ++i;
      continue;
    }
    if (is_space(text[static_cast<std::size_t>(i)])) {
      ++i;
      continue;
    }
    int end = i;
    while (end < n && !is_space(text[static_cast<std::size_t>(end)])) ++end;
    int lo = i, hi = end;
    std::vector<WordPiece> trailing;
    while (lo < hi && is_punctuation_char(text[static_cast<std::size_t>(lo)])) {
      pieces.push_back({std::string(1, text[static_cast<std::size_t>(lo)]), {lo, lo + 1}});
      ++lo;
    }
    while (hi > lo && is_punctuation_char(text[static_cast<std::size_t>(hi - 1)])) {
      trailing.push_back({std::string(1, text[static_cast<std::size_t>(hi - 1)]), {hi - 1, hi}});
      --hi;
    }
    if (hi > lo) pieces.push_back({std::string(text.substr(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo))), {lo, hi}});
    pieces.insert(pieces.end(), trailing.rbegin(), trailing.rend());
    i = end;
  }
  return pieces;
}

TokenizedDocument encode(std::string_view text, const Vocabulary& vocab, std::string doc_id) {
  if (!vocab.frozen()) throw ContractError("encode: vocabulary is not frozen");
  TokenizedDocument doc;
  doc.doc_id = std::move(doc_id);
  doc.text = std::string(text);
  for (auto& piece : split_words(text)) {
    doc.ids.push_back(vocab.id(piece.text));
    doc.offsets.push_back(piece.span);
    doc.pieces.push_back(std::move(piece.text));
  }
  return doc;
}

std::string decode(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

std::string detokenize(std::span<const std::string> pieces) {
  std::string out;
  bool glue_next = true;
  for (const auto& piece : pieces) {
    if (piece == Vocabulary::kNewline) {
      out += '\n';
      glue_next = true;
      continue;
    }
    if (!glue_next && !attaches_left(piece)) out += ' ';
    out += piece;
    glue_next = piece == "(";
  }
  return out;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> pieces;
  pieces.reserve(ids.size());
  for (int id : ids) pieces.push_back(vocab.token(id));
  return detokenize(pieces);
}

FieldSpan token_span(const TokenizedDocument& doc, Field field, CharSpan span) {
  int first = -1, last = -1;
  for (int i = 0; i < doc.size(); ++i) {
    const auto& off = doc.offsets[static_cast<std::size_t>(i)];
    if (off.start >= span.start && off.end <= span.end) {
      if (first < 0) first = i;
      last = i;
    } else if (off.start < span.end && off.end > span.start) {
      throw DataError("field " + std::string(field_name(field)) + " in " + doc.doc_id +
                      " cuts through token " + std::to_string(i));
    }
  }
  if (first < 0) {
    throw DataError("field " + std::string(field_name(field)) + " in " + doc.doc_id +
                    " covers no tokens");
  }
  const auto& a = doc.offsets[static_cast<std::size_t>(first)];
  const auto& b = doc.offsets[static_cast<std::size_t>(last)];
  if (a.start != span.start || b.end != span.end) {
    throw DataError("field " + std::string(field_name(field)) + " in " + doc.doc_id +
                    " does not align with token boundaries");
  }
  return {field, first, last + 1};
}

}  // namespace elusive
