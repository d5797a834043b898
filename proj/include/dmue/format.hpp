#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dmue {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
/// Fixed-point with the given number of decimals.
std::string format_fixed(double v, int decimals);

/// Whole-token parses; throw std::invalid_argument on junk.
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view text, char delim);
std::string_view trim(std::string_view text);

}  // namespace dmue
