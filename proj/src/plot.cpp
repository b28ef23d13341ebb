#include "elusive/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "elusive/errors.hpp"

namespace elusive {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 420;
constexpr int kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;

constexpr std::array<std::string_view, kCategoryCount> kColors = {
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#c7c7c7"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void open_svg(std::ostringstream& os, std::string_view title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    os << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
       << escape(title) << "</text>\n";
}

void axes(std::ostringstream& os) {
  const int x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - kRight;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << kTop << "\" x2=\"" << x0 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

std::string first_line(std::string_view text) {
  std::string line(text.substr(0, text.find('\n')));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

std::vector<DistanceRow> parse_distance_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<DistanceRow> rows;
  bool header = false;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header) {
      if (line != "field,mean_distance,em,f1")
        throw DataError("distance csv row " + std::to_string(row) + ": bad header");
      header = true;
      continue;
    }
    const auto cells = split_csv_line(line);
    DistanceRow r;
    const auto field = cells.size() == 4 ? parse_field(cells[0]) : std::nullopt;
    if (!field || *field == Field::name || !parse_double(cells[1], r.mean_distance) ||
        !parse_double(cells[2], r.em) || !parse_double(cells[3], r.f1))
      throw DataError("distance csv row " + std::to_string(row) + ": malformed \"" + line + "\"");
    r.field = *field;
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("distance csv has no data rows");
  return rows;
}

std::string constitution_svg(const ConstitutionTable& table, std::string_view title) {
  if (table.k < 1) throw DataError("constitution table is empty");
  std::ostringstream os;
  open_svg(os, title);
  axes(os);
  int tallest = 1;
  for (const auto& row : table.counts) {
    int s = 0;
    for (int c : row) s += c;
    tallest = std::max(tallest, s);
  }
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  const double slot = plot_w / table.k;
  const double bar = slot * 0.7;
  for (int r = 0; r < table.k; ++r) {
    const double x = kLeft + r * slot + (slot - bar) / 2;
    double y = kHeight - kBottom;
    os << "<g class=\"bar\" data-rank=\"" << r << "\">\n";
    for (int c = 0; c < kCategoryCount; ++c) {
      const int n = table.counts[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (n == 0) continue;
      const double h = plot_h * n / tallest;
      y -= h;
      os << "  <rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar)
         << "\" height=\"" << num(h) << "\" fill=\"" << kColors[static_cast<std::size_t>(c)]
         << "\"><title>" << category_name(static_cast<Category>(c)) << ": " << n
         << "</title></rect>\n";
    }
    os << "</g>\n";
    os << "<text x=\"" << num(x + bar / 2) << "\" y=\"" << kHeight - kBottom + 15
       << "\" text-anchor=\"middle\">" << r + 1 << "</text>\n";
  }
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 12
     << "\" text-anchor=\"middle\">rank</text>\n";
  os << "<text x=\"" << kLeft - 8 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\">" << tallest
     << "</text>\n";
  for (int c = 0; c < kCategoryCount; ++c) {
    const int y = kTop + 18 * c;
    os << "<rect x=\"" << kWidth - kRight + 15 << "\" y=\"" << y << "\" width=\"12\" height=\"12\" fill=\""
       << kColors[static_cast<std::size_t>(c)] << "\"/>";
    os << "<text x=\"" << kWidth - kRight + 32 << "\" y=\"" << y + 10 << "\">"
       << category_name(static_cast<Category>(c)) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string distance_svg(const std::vector<DistanceRow>& rows, std::string_view title) {
  if (rows.empty()) throw DataError("distance table is empty");
  auto sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const DistanceRow& a, const DistanceRow& b) {
    return a.mean_distance < b.mean_distance;
  });
  const double lo = sorted.front().mean_distance, hi = sorted.back().mean_distance;
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  auto px = [&](std::size_t i) {
    if (hi == lo) return kLeft + plot_w * (static_cast<double>(i) + 0.5) / static_cast<double>(sorted.size());
    return kLeft + plot_w * (0.05 + 0.9 * (sorted[i].mean_distance - lo) / (hi - lo));
  };
  auto py = [&](double v) { return kHeight - kBottom - plot_h * std::clamp(v, 0.0, 1.0); };

  std::ostringstream os;
  open_svg(os, title);
  axes(os);
  for (double t : {0.0, 0.5, 1.0})
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(py(t) + 4) << "\" text-anchor=\"end\">"
       << num(t) << "</text>\n";
  const std::array<std::pair<const char*, const char*>, 2> series = {{{"em", "#1f77b4"}, {"f1", "#ff7f0e"}}};
  for (const auto& [name, color] : series) {
    const bool em = std::string_view(name) == "em";
    os << "<polyline class=\"" << name << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < sorted.size(); ++i)
      os << (i ? " " : "") << num(px(i)) << ',' << num(py(em ? sorted[i].em : sorted[i].f1));
    os << "\"/>\n";
    for (std::size_t i = 0; i < sorted.size(); ++i)
      os << "<circle cx=\"" << num(px(i)) << "\" cy=\"" << num(py(em ? sorted[i].em : sorted[i].f1))
         << "\" r=\"3\" fill=\"" << color << "\"/>\n";
  }
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    os << "<text class=\"field\" x=\"" << num(px(i)) << "\" y=\"" << kHeight - kBottom + 15
       << "\" text-anchor=\"middle\">" << field_name(sorted[i].field) << "</text>\n";
    os << "<text x=\"" << num(px(i)) << "\" y=\"" << kHeight - kBottom + 28
       << "\" text-anchor=\"middle\" fill=\"#555\">" << num(sorted[i].mean_distance) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 8
     << "\" text-anchor=\"middle\">mean distance to name (tokens)</text>\n";
  os << "<text x=\"" << kWidth - kRight + 15 << "\" y=\"" << kTop + 10 << "\" fill=\"#1f77b4\">EM</text>\n";
  os << "<text x=\"" << kWidth - kRight + 15 << "\" y=\"" << kTop + 28 << "\" fill=\"#ff7f0e\">F1</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string plot_csv(std::string_view csv, std::string_view title) {
  const auto header = first_line(csv);
  if (header.empty()) throw DataError("csv is empty");
  if (header == "rank,category,count") return constitution_svg(ConstitutionTable::from_csv(csv), title);
  if (header == "field,mean_distance,em,f1") return distance_svg(parse_distance_csv(csv), title);
  throw DataError("csv row 1: unrecognized header \"" + header + "\"");
}

}  // namespace elusive
