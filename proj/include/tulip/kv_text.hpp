#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tulip::kv {

std::string trim(std::string_view s);
int parse_int(const std::string& key, const std::string& v);
std::uint64_t parse_u64(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);
// Shortest round-trip form.
std::string format_double(double v);

// key=value lines; blank lines and '#' comments skipped. Throws
// InvalidArgument on a line without '='.
std::vector<std::pair<std::string, std::string>> parse_lines(std::string_view text);

}  // namespace tulip::kv
