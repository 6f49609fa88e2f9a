#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace agentalign {

// Key-value text configuration shared by training, orchestration and the CLI:
//   # comment
//   beta = 0.1
//   max_retries = 3
// Keys are case-sensitive; later assignments win. Typed getters throw
// SchemaViolation naming the line and key of a malformed value.
class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text);
  // Throws IoFailure when the file cannot be read.
  static Config load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  bool contains(std::string_view key) const;

  std::optional<std::string> get(std::string_view key) const;
  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  std::uint64_t get_uint(std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  const std::map<std::string, std::string, std::less<>>& entries() const noexcept { return values_; }

  // Throws SchemaViolation pointing at the line that set `key`.
  [[noreturn]] void reject(std::string_view key, const std::string& detail) const;

 private:
  struct Origin {
    std::size_t line = 0;
  };

  std::map<std::string, std::string, std::less<>> values_;
  std::map<std::string, Origin, std::less<>> origins_;
};

}  // namespace agentalign
