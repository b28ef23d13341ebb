#include "elusive/document.hpp"

namespace elusive {

std::string_view field_name(Field field) {
  switch (field) {
    case Field::name: return "name";
    case Field::birth_date: return "birth_date";
    case Field::birth_city: return "birth_city";
    case Field::university: return "university";
    case Field::major: return "major";
    case Field::company: return "company";
  }
  return "unknown";
}

std::optional<Field> parse_field(std::string_view text) {
  for (Field f : {Field::name, Field::birth_date, Field::birth_city, Field::university,
                  Field::major, Field::company}) {
    if (field_name(f) == text) return f;
  }
  return std::nullopt;
}

const FieldSpan* TokenizedDocument::find_field(Field field) const {
  for (const auto& span : fields)
    if (span.field == field) return &span;
  return nullptr;
}

}  // namespace elusive
