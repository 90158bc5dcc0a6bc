#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace va3 {

std::string_view trim(std::string_view s);
std::string to_lower(std::string_view s);
// Answer tokens compare after whitespace trim and ASCII case-folding.
std::string normalize_answer(std::string_view answer);
std::vector<std::string> split_lines(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

// Half-to-even rounding at `decimals` places, as used in every report.
double round_half_even(double value, int decimals);
// Fixed two-decimal rendering of an already rounded value.
std::string format_fixed2(double value);

}  // namespace va3
