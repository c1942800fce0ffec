#include "tulip/kv_text.hpp"

#include <charconv>
#include <sstream>

#include "tulip/error.hpp"

namespace tulip::kv {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && end == v.data() + v.size() && !v.empty(),
          Errc::kInvalidArgument, std::string("bad ") + what + " for " + key + ": " + v);
  return out;
}

}  // namespace

int parse_int(const std::string& key, const std::string& v) {
  return parse_number<int>(key, v, "integer");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_number<std::uint64_t>(key, v, "integer");
}

double parse_double(const std::string& key, const std::string& v) {
  return parse_number<double>(key, v, "number");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  fail(Errc::kInvalidArgument, "bad boolean for " + key + ": " + v);
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<std::pair<std::string, std::string>> parse_lines(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, Errc::kInvalidArgument, "expected key=value: " + t);
    out.emplace_back(trim(std::string_view(t).substr(0, eq)),
                     trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

}  // namespace tulip::kv
