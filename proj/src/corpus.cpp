#include "elusive/corpus.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <sstream>
#include <string_view>

#include "elusive/errors.hpp"
#include "elusive/io.hpp"
#include "elusive/rng.hpp"

namespace elusive {

namespace pool_data {
extern const std::string_view first_names;
extern const std::string_view last_names;
extern const std::string_view cities;
extern const std::string_view universities;
extern const std::string_view majors;
extern const std::string_view companies;
}  // namespace pool_data

namespace {

std::vector<std::vector<std::string>> parse_pool(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(cols));
  }
  return rows;
}

std::string city_key(const std::string& city) { return city.substr(0, city.find(',')); }

constexpr std::array<std::string_view, 12> kMonths = {
    "January", "February", "March",     "April",   "May",      "June",
    "July",    "August",   "September", "October", "November", "December"};

std::string_view subject_pronoun(Pronoun p) { return p == Pronoun::he ? "He" : "She"; }
std::string_view possessive(Pronoun p) { return p == Pronoun::he ? "his" : "her"; }

// Assembles text while recording where annotated pieces land.
class TextBuilder {
 public:
  void put(std::string_view s) { text_ += s; }
  CharSpan put_span(std::string_view s) {
    const int start = static_cast<int>(text_.size());
    text_ += s;
    return {start, static_cast<int>(text_.size())};
  }
  int cursor() const { return static_cast<int>(text_.size()); }
  std::string take() { return std::move(text_); }

 private:
  std::string text_;
};

}  // namespace

std::string_view layout_name(Layout layout) {
  return layout == Layout::fixed ? "fixed" : "random_position";
}

Layout parse_layout(std::string_view text) {
  if (text == "fixed") return Layout::fixed;
  if (text == "random_position") return Layout::random_position;
  throw ConfigError("unknown layout '" + std::string(text) + "' (expected fixed or random_position)");
}

EntityPools EntityPools::bundled() {
  EntityPools pools;
  const auto firsts = parse_pool(pool_data::first_names);
  const auto lasts = parse_pool(pool_data::last_names);
  for (std::size_t i = 0; i < lasts.size(); ++i) {
    const auto& first = firsts[(i * 7) % firsts.size()];
    pools.names.push_back({first[0] + " " + lasts[i][0],
                           first.size() > 1 && first[1] == "she" ? Pronoun::she : Pronoun::he});
  }
  for (auto& row : parse_pool(pool_data::cities)) pools.cities.push_back(row[0]);
  for (auto& row : parse_pool(pool_data::universities))
    pools.universities.push_back({row[0], row.size() > 1 ? row[1] : ""});
  for (auto& row : parse_pool(pool_data::majors)) pools.majors.push_back(row[0]);
  for (auto& row : parse_pool(pool_data::companies))
    pools.companies.push_back({row[0], row.size() > 1 ? row[1] : ""});
  return pools;
}

std::string format_date(std::chrono::sys_days day) {
  const std::chrono::year_month_day ymd{day};
  std::ostringstream os;
  os << kMonths[static_cast<unsigned>(ymd.month()) - 1] << ' ' << static_cast<unsigned>(ymd.day())
     << ", " << static_cast<int>(ymd.year());
  return os.str();
}

const std::string& Facts::get(Field field) const {
  switch (field) {
    case Field::name: return name;
    case Field::birth_date: return birth_date;
    case Field::birth_city: return birth_city;
    case Field::university: return university;
    case Field::major: return major;
    case Field::company: return company;
  }
  return name;
}

BiographyRecord render_biography(std::string person_id, const Facts& facts, Pronoun pronoun,
                                 Layout layout, int name_sentence) {
  if (name_sentence < 0 || name_sentence > 4) throw ContractError("name_sentence must be in 0..4");
  if (layout == Layout::fixed && name_sentence != 0)
    throw ContractError("fixed layout puts the name in the first sentence");

  BiographyRecord rec;
  rec.person_id = std::move(person_id);
  rec.facts = facts;
  rec.pronoun = pronoun;
  rec.layout = layout;
  rec.name_sentence = name_sentence;

  TextBuilder tb;
  CharSpan name_span;
  auto subject = [&](int sentence) {
    if (sentence == name_sentence) {
      name_span = tb.put_span(facts.name);
    } else {
      tb.put(subject_pronoun(pronoun));
    }
  };
  auto fact = [&](std::string_view prep, Field field) {
    rec.prepositions.push_back({field, tb.cursor()});
    tb.put(prep);
    tb.put(" ");
    rec.fields.push_back({field, tb.put_span(facts.get(field))});
    tb.put(".");
  };

  subject(0);
  tb.put(" was born ");
  fact("on", Field::birth_date);
  tb.put(" ");
  subject(1);
  tb.put(" spent ");
  tb.put(possessive(pronoun));
  tb.put(" early years ");
  fact("in", Field::birth_city);
  tb.put(" ");
  subject(2);
  tb.put(" received mentorship and guidance from faculty members ");
  fact("at", Field::university);
  tb.put(" ");
  subject(3);
  tb.put(" completed ");
  tb.put(possessive(pronoun));
  tb.put(" education with a focus ");
  fact("on", Field::major);
  tb.put(" ");
  subject(4);
  tb.put(" had a professional role ");
  fact("at", Field::company);

  rec.fields.insert(rec.fields.begin(), {Field::name, name_span});
  rec.text = tb.take();
  return rec;
}

std::vector<BiographyRecord> generate_biographies(const EntityPools& pools, int n, Layout layout,
                                                  std::uint64_t seed) {
  if (n < 0) throw ConfigError("generate_biographies: n must be non-negative");
  if (static_cast<std::size_t>(n) > pools.names.size()) {
    throw DataError("name pool exhausted: requested " + std::to_string(n) + " names, pool holds " +
                    std::to_string(pools.names.size()));
  }
  auto require = [](bool ok, const char* pool) {
    if (!ok) throw DataError(std::string(pool) + " pool is empty");
  };
  require(!pools.cities.empty(), "cities");
  require(!pools.universities.empty(), "universities");
  require(!pools.majors.empty(), "majors");
  require(!pools.companies.empty(), "companies");
  if (pools.last_date < pools.first_date) throw ConfigError("date range is empty");

  std::vector<std::size_t> order(pools.names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng name_rng(derive_seed(seed, hash_string("names")));
  name_rng.shuffle(order);

  const auto day_span =
      static_cast<std::uint64_t>((pools.last_date - pools.first_date).count()) + 1;
  constexpr int kMaxDraws = 10000;

  std::vector<BiographyRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i) + 1));
    const PersonName& person = pools.names[order[static_cast<std::size_t>(i)]];
    Facts facts;
    facts.name = person.full;
    facts.birth_date =
        format_date(pools.first_date + std::chrono::days{static_cast<int>(rng.below(day_span))});
    facts.birth_city = pools.cities[rng.below(pools.cities.size())];
    const std::string home = city_key(facts.birth_city);

    // Birth city, university and company must not share a city.
    const PlacedEntity* university = nullptr;
    for (int draw = 0; draw < kMaxDraws && !university; ++draw) {
      const auto& u = pools.universities[rng.below(pools.universities.size())];
      if (u.city != home) university = &u;
    }
    if (!university) throw DataError("universities pool exhausted: every entry collocates with " + home);
    const PlacedEntity* company = nullptr;
    for (int draw = 0; draw < kMaxDraws && !company; ++draw) {
      const auto& c = pools.companies[rng.below(pools.companies.size())];
      if (c.city != home && c.city != university->city) company = &c;
    }
    if (!company) throw DataError("companies pool exhausted: every entry collocates with " + home);
    facts.university = university->text;
    facts.company = company->text;
    facts.major = pools.majors[rng.below(pools.majors.size())];
    const int name_sentence = static_cast<int>(rng.below(5));

    char id[32];
    std::snprintf(id, sizeof(id), "bio-%05d", i);
    records.push_back(render_biography(id, facts, person.pronoun, layout,
                                       layout == Layout::fixed ? 0 : name_sentence));
  }
  return records;
}

std::string question_for(Field field, const std::string& name) {
  switch (field) {
    case Field::birth_date: return "When was " + name + " born?";
    case Field::birth_city: return "Where was " + name + " born?";
    case Field::university: return "Which university did " + name + " graduate from?";
    case Field::major: return "What did " + name + " study?";
    case Field::company: return "Where did " + name + " work?";
    case Field::name: break;
  }
  throw ContractError("no question template for the name field");
}

std::vector<QAPair> generate_qa(const std::vector<BiographyRecord>& records) {
  std::vector<QAPair> pairs;
  pairs.reserve(records.size() * kFactFields.size());
  for (const auto& rec : records) {
    for (Field field : kFactFields) {
      pairs.push_back({rec.person_id + "-" + std::string(field_name(field)), rec.person_id, field,
                       question_for(field, rec.facts.name), rec.facts.get(field) + "."});
    }
  }
  return pairs;
}

TokenizedDocument tokenize_biography(const BiographyRecord& record, const Vocabulary& vocab) {
  TokenizedDocument doc = encode(record.text, vocab, record.person_id);
  for (const auto& f : record.fields) doc.fields.push_back(token_span(doc, f.field, f.span));
  for (const auto& p : record.prepositions) {
    auto it = std::find_if(doc.offsets.begin(), doc.offsets.end(),
                           [&](const CharSpan& s) { return s.start == p.char_pos; });
    if (it == doc.offsets.end())
      throw DataError("preposition at char " + std::to_string(p.char_pos) + " in " +
                      record.person_id + " is not a token start");
    const int index = static_cast<int>(it - doc.offsets.begin());
    const FieldSpan* span = doc.find_field(p.field);
    if (!span || index >= span->token_start)
      throw DataError("preposition for " + std::string(field_name(p.field)) + " in " +
                      record.person_id + " does not precede its field");
    doc.prepositions.push_back({p.field, index});
  }
  return doc;
}

// --- persistence -----------------------------------------------------------

void write_biographies(const std::filesystem::path& path,
                       const std::vector<BiographyRecord>& records) {
  std::vector<Json> rows;
  for (const auto& rec : records) {
    Json row;
    row["id"] = rec.person_id;
    row["text"] = rec.text;
    Json fields = Json::array();
    for (const auto& f : rec.fields)
      fields.push_back({{"name", field_name(f.field)}, {"char_start", f.span.start}, {"char_end", f.span.end}});
    row["fields"] = std::move(fields);
    Json preps = Json::array();
    for (const auto& p : rec.prepositions)
      preps.push_back({{"field", field_name(p.field)}, {"char_pos", p.char_pos}});
    row["prepositions"] = std::move(preps);
    row["layout"] = layout_name(rec.layout);
    rows.push_back(std::move(row));
  }
  write_jsonl(path, rows);
}

std::vector<BiographyRecord> read_biographies(const std::filesystem::path& path) {
  std::vector<BiographyRecord> records;
  int line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    try {
      BiographyRecord rec;
      rec.person_id = row.at("id").get<std::string>();
      rec.text = row.at("text").get<std::string>();
      rec.layout = parse_layout(row.at("layout").get<std::string>());
      const int len = static_cast<int>(rec.text.size());
      for (const auto& f : row.at("fields")) {
        auto field = parse_field(f.at("name").get<std::string>());
        if (!field) throw DataError("unknown field " + f.at("name").dump());
        CharSpan span{f.at("char_start").get<int>(), f.at("char_end").get<int>()};
        if (span.start < 0 || span.end > len || span.start >= span.end)
          throw DataError("field span out of range");
        rec.fields.push_back({*field, span});
        const std::string value = rec.text.substr(static_cast<std::size_t>(span.start),
                                                  static_cast<std::size_t>(span.end - span.start));
        switch (*field) {
          case Field::name: rec.facts.name = value; break;
          case Field::birth_date: rec.facts.birth_date = value; break;
          case Field::birth_city: rec.facts.birth_city = value; break;
          case Field::university: rec.facts.university = value; break;
          case Field::major: rec.facts.major = value; break;
          case Field::company: rec.facts.company = value; break;
        }
        if (*field == Field::name) {
          // Sentences end with ". "; count the ones before the name.
          int sentence = 0;
          for (auto pos = rec.text.find(". "); pos != std::string::npos && static_cast<int>(pos) < span.start;
               pos = rec.text.find(". ", pos + 1))
            ++sentence;
          rec.name_sentence = sentence;
        }
      }
      for (const auto& p : row.at("prepositions")) {
        auto field = parse_field(p.at("field").get<std::string>());
        if (!field) throw DataError("unknown field " + p.at("field").dump());
        rec.prepositions.push_back({*field, p.at("char_pos").get<int>()});
      }
      rec.pronoun = rec.text.find("She ") != std::string::npos ? Pronoun::she : Pronoun::he;
      records.push_back(std::move(rec));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": record " + std::to_string(line) + ": " + e.what());
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ": record " + std::to_string(line) + ": " + e.what());
    }
  }
  return records;
}

void write_qa(const std::filesystem::path& path, const std::vector<QAPair>& pairs) {
  std::vector<Json> rows;
  for (const auto& qa : pairs) {
    Json row;
    row["id"] = qa.id;
    row["doc_id"] = qa.doc_id;
    if (qa.field) row["field"] = field_name(*qa.field);
    row["question"] = qa.question;
    row["answer"] = qa.answer;
    rows.push_back(std::move(row));
  }
  write_jsonl(path, rows);
}

std::vector<QAPair> read_qa(const std::filesystem::path& path) {
  std::vector<QAPair> pairs;
  int line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    try {
      QAPair qa;
      qa.id = row.at("id").get<std::string>();
      qa.doc_id = row.at("doc_id").get<std::string>();
      if (row.contains("field")) {
        qa.field = parse_field(row.at("field").get<std::string>());
        if (!qa.field) throw DataError("unknown field " + row.at("field").dump());
      }
      qa.question = row.at("question").get<std::string>();
      qa.answer = row.at("answer").get<std::string>();
      pairs.push_back(std::move(qa));
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
  }
  return pairs;
}

void write_paragraphs(const std::filesystem::path& path, const std::vector<Paragraph>& paragraphs) {
  std::vector<Json> rows;
  for (const auto& p : paragraphs) {
    Json row;
    row["id"] = p.id;
    row["text"] = p.text;
    rows.push_back(std::move(row));
  }
  write_jsonl(path, rows);
}

std::vector<Paragraph> read_paragraphs(const std::filesystem::path& path) {
  std::vector<Paragraph> paragraphs;
  int line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    try {
      paragraphs.push_back({row.at("id").get<std::string>(), row.at("text").get<std::string>()});
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
  }
  return paragraphs;
}

ExternalCorpus ingest_external(const std::filesystem::path& paragraphs_file,
                               const std::filesystem::path& qa_file, const Vocabulary& vocab) {
  const auto paragraphs = read_paragraphs(paragraphs_file);
  if (paragraphs.empty()) throw DataError(paragraphs_file.string() + ": no paragraphs");
  ExternalCorpus corpus;
  std::set<std::string> ids;
  for (const auto& p : paragraphs) {
    if (!ids.insert(p.id).second) throw DataError("duplicate paragraph id " + p.id);
    corpus.documents.push_back(encode(p.text, vocab, p.id));
  }
  corpus.qa = read_qa(qa_file);
  for (std::size_t i = 0; i < corpus.qa.size(); ++i) {
    if (!ids.contains(corpus.qa[i].doc_id)) {
      throw DataError(qa_file.string() + ": line " + std::to_string(i + 1) +
                      ": question references missing document " + corpus.qa[i].doc_id);
    }
  }
  return corpus;
}

}  // namespace elusive
