#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "elusive/attention_analysis.hpp"
#include "elusive/evaluation.hpp"

namespace elusive {

// Parses "field,mean_distance,em,f1". DataError names the offending row.
std::vector<DistanceRow> parse_distance_csv(std::string_view text);

// One stacked bar per rank, segments ordered by category.
std::string constitution_svg(const ConstitutionTable& table, std::string_view title = {});

// EM and F1 against mean distance; fields sorted by distance along x.
std::string distance_svg(const std::vector<DistanceRow>& rows, std::string_view title = {});

// Picks the chart from the CSV header. DataError for empty or unknown input.
std::string plot_csv(std::string_view csv, std::string_view title = {});

}  // namespace elusive
