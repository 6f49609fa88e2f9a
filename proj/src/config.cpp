#include "agentalign/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "agentalign/errors.hpp"

namespace agentalign {

namespace {

std::string trim(std::string_view s) {
  const auto not_space = [](char c) { return !std::isspace(static_cast<unsigned char>(c)); };
  const auto b = std::find_if(s.begin(), s.end(), not_space);
  const auto e = std::find_if(s.rbegin(), s.rend(), not_space).base();
  return b < e ? std::string(b, e) : std::string();
}

template <typename T>
std::optional<T> parse_number(const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (text.empty() || res.ec != std::errc() || res.ptr != end) return std::nullopt;
  return value;
}

}  // namespace

Config Config::parse(std::string_view text) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw SchemaViolation(number, "<line>", "expected 'key = value'");
    std::string key = trim(std::string_view(content).substr(0, eq));
    if (key.empty()) throw SchemaViolation(number, "<line>", "empty key");
    cfg.origins_[key] = {number};
    cfg.values_[std::move(key)] = trim(std::string_view(content).substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void Config::set(std::string key, std::string value) {
  origins_[key] = {0};
  values_[std::move(key)] = std::move(value);
}

bool Config::contains(std::string_view key) const { return values_.find(key) != values_.end(); }

std::optional<std::string> Config::get(std::string_view key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::get_string(std::string_view key, std::string fallback) const {
  return get(key).value_or(std::move(fallback));
}

double Config::get_double(std::string_view key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  const auto parsed = parse_number<double>(*v);
  if (!parsed) reject(key, "expected a number, got '" + *v + "'");
  return *parsed;
}

std::int64_t Config::get_int(std::string_view key, std::int64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  const auto parsed = parse_number<std::int64_t>(*v);
  if (!parsed) reject(key, "expected an integer, got '" + *v + "'");
  return *parsed;
}

std::uint64_t Config::get_uint(std::string_view key, std::uint64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  const auto parsed = parse_number<std::uint64_t>(*v);
  if (!parsed) reject(key, "expected a non-negative integer, got '" + *v + "'");
  return *parsed;
}

bool Config::get_bool(std::string_view key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  reject(key, "expected true or false, got '" + *v + "'");
}

void Config::reject(std::string_view key, const std::string& detail) const {
  const auto it = origins_.find(key);
  throw SchemaViolation(it == origins_.end() ? 0 : it->second.line, std::string(key), detail);
}

}  // namespace agentalign
