#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elusive/document.hpp"
#include "elusive/tokenizer.hpp"

namespace elusive {

enum class Layout { fixed, random_position };
enum class Pronoun { he, she };

std::string_view layout_name(Layout layout);
Layout parse_layout(std::string_view text);

struct PersonName {
  std::string full;
  Pronoun pronoun = Pronoun::he;
};

// A pool entry with the city it is located in; used for collocation checks.
struct PlacedEntity {
  std::string text;
  std::string city;
};

struct EntityPools {
  std::vector<PersonName> names;
  std::vector<std::string> cities;  // "City, Country"
  std::vector<PlacedEntity> universities;
  std::vector<std::string> majors;
  std::vector<PlacedEntity> companies;
  std::chrono::sys_days first_date{std::chrono::year{1940} / 1 / 1};
  std::chrono::sys_days last_date{std::chrono::year{2005} / 12 / 31};

  // Pools compiled from data/pools. Name i pairs surname i with a rotating first name.
  static EntityPools bundled();
};

// "January 5, 1990"
std::string format_date(std::chrono::sys_days day);

struct Facts {
  std::string name;
  std::string birth_date;
  std::string birth_city;
  std::string university;
  std::string major;
  std::string company;

  const std::string& get(Field field) const;
};

struct FieldAnnotation {
  Field field = Field::name;
  CharSpan span;
  bool operator==(const FieldAnnotation&) const = default;
};

struct PrepositionAnnotation {
  Field field = Field::birth_date;
  int char_pos = 0;
  bool operator==(const PrepositionAnnotation&) const = default;
};

struct BiographyRecord {
  std::string person_id;
  Facts facts;
  Pronoun pronoun = Pronoun::he;
  Layout layout = Layout::fixed;
  int name_sentence = 0;  // which of the five sentences has the name as subject
  std::string text;
  std::vector<FieldAnnotation> fields;  // name first, then the five facts
  std::vector<PrepositionAnnotation> prepositions;
};

struct QAPair {
  std::string id;
  std::string doc_id;
  std::optional<Field> field;  // absent for external corpora
  std::string question;
  std::string answer;
};

// Renders the five-sentence template and its annotations.
BiographyRecord render_biography(std::string person_id, const Facts& facts, Pronoun pronoun,
                                 Layout layout, int name_sentence);

std::vector<BiographyRecord> generate_biographies(const EntityPools& pools, int n, Layout layout,
                                                  std::uint64_t seed);

std::string question_for(Field field, const std::string& name);

// Five pairs per record, answers carrying the terminal period of the QA format.
std::vector<QAPair> generate_qa(const std::vector<BiographyRecord>& records);

// Maps character annotations onto tokens; throws DataError when a span does not survive.
TokenizedDocument tokenize_biography(const BiographyRecord& record, const Vocabulary& vocab);

// --- persistence -----------------------------------------------------------

void write_biographies(const std::filesystem::path& path, const std::vector<BiographyRecord>& records);
std::vector<BiographyRecord> read_biographies(const std::filesystem::path& path);

void write_qa(const std::filesystem::path& path, const std::vector<QAPair>& pairs);
std::vector<QAPair> read_qa(const std::filesystem::path& path);

struct Paragraph {
  std::string id;
  std::string text;
  bool operator==(const Paragraph&) const = default;
};

void write_paragraphs(const std::filesystem::path& path, const std::vector<Paragraph>& paragraphs);
std::vector<Paragraph> read_paragraphs(const std::filesystem::path& path);

struct ExternalCorpus {
  std::vector<TokenizedDocument> documents;
  std::vector<QAPair> qa;
};

// Paragraph JSONL {"id","text"} plus QA JSONL without "field". Documents carry no spans.
ExternalCorpus ingest_external(const std::filesystem::path& paragraphs_file,
                               const std::filesystem::path& qa_file, const Vocabulary& vocab);

}  // namespace elusive
