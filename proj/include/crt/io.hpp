#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace crt::io {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      hash_ ^= c;
      hash_ *= 0x100000001B3ULL;
    }
  }
  void update_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      hash_ ^= (v >> (8 * i)) & 0xFF;
      hash_ *= 0x100000001B3ULL;
    }
  }
  void update_double(double v) { update_u64(std::bit_cast<std::uint64_t>(v)); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);

/// Lower-case 16-digit hex.
std::string hex64(std::uint64_t v);
/// Throws FormatError on anything but exactly 16 hex digits.
std::uint64_t parse_hex64(std::string_view text);

std::vector<std::string_view> split(std::string_view text, char sep);
std::string_view trim(std::string_view text);

// Strict whole-string number parsing; FormatError mentions `what`.
double parse_double(std::string_view text, std::string_view what);
std::uint64_t parse_uint(std::string_view text, std::string_view what);
std::int64_t parse_int(std::string_view text, std::string_view what);

/// Reads a whole file; throws FormatError if it cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes `contents` to a temporary sibling and renames it over `path`, so a
/// crash never leaves a truncated file under the final name.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace crt::io
