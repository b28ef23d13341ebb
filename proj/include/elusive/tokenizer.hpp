#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "elusive/document.hpp"

namespace elusive {

// Word-level vocabulary. Ids 0..3 are reserved; the rest are dense.
class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;
  static constexpr std::string_view kNewline = "\n";

  // Reserved tokens only, not frozen.
  Vocabulary();

  // Tokens ordered by (count desc, token asc); those below min_count are left out.
  static Vocabulary build(std::span<const std::string> corpus, int min_count = 1);

  // One token per line, line i holding id i + 4. Newlines and backslashes are escaped.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  bool frozen() const { return frozen_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  bool frozen_ = false;
};

struct WordPiece {
  std::string text;
  CharSpan span;
};

// Whitespace split, then leading/trailing . , ! ? ; : " ' ( ) peeled off one
// character at a time. Each newline becomes its own "\n" piece.
std::vector<WordPiece> split_words(std::string_view text);

bool is_punctuation_char(char c);
bool is_punctuation_token(std::string_view token);

// Field spans and prepositions are left empty; callers that know them fill them in.
TokenizedDocument encode(std::string_view text, const Vocabulary& vocab, std::string doc_id = {});

// Tokens joined by single spaces.
std::string decode(std::span<const int> ids, const Vocabulary& vocab);

// Human-readable rendering: closing punctuation attached to the previous word.
std::string detokenize(std::span<const std::string> pieces);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

// Token range fully covering [span.start, span.end); throws DataError when the
// character span does not align with token boundaries.
FieldSpan token_span(const TokenizedDocument& doc, Field field, CharSpan span);

}  // namespace elusive
