#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace elusive {

// Annotated biography fields. `name` is the head entity; the rest are facts.
enum class Field { name, birth_date, birth_city, university, major, company };

inline constexpr std::array<Field, 5> kFactFields = {Field::birth_date, Field::birth_city,
                                                     Field::university, Field::major,
                                                     Field::company};

std::string_view field_name(Field field);
std::optional<Field> parse_field(std::string_view text);

struct CharSpan {
  int start = 0;
  int end = 0;  // exclusive
  bool operator==(const CharSpan&) const = default;
};

// Token range [token_start, token_end) covering one annotated field.
struct FieldSpan {
  Field field = Field::name;
  int token_start = 0;
  int token_end = 0;
  bool operator==(const FieldSpan&) const = default;
};

// The word immediately preceding a fact span.
struct PrepositionPosition {
  Field field = Field::birth_date;
  int token_index = 0;
  bool operator==(const PrepositionPosition&) const = default;
};

// Token indices here are document indices (no BOS). When a document is fed to a
// model the sequence is [BOS, tokens...], so document token i sits at sequence
// position i + 1.
struct TokenizedDocument {
  std::string doc_id;
  std::string text;
  std::vector<int> ids;
  std::vector<std::string> pieces;  // surface strings, parallel to ids
  std::vector<CharSpan> offsets;    // parallel to ids
  std::vector<FieldSpan> fields;
  std::vector<PrepositionPosition> prepositions;

  int size() const { return static_cast<int>(ids.size()); }
  bool has_spans() const { return !fields.empty(); }
  const FieldSpan* find_field(Field field) const;
};

}  // namespace elusive
