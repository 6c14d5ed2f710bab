#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace attnaudit {

/// Shortest decimal form that reads back to the same double.
std::string format_double(double value);

/// Writes bytes verbatim, creating parent directories.
void write_text_file(const std::filesystem::path& path, std::string_view contents);
std::string read_text_file(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
/// FNV-1a rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace attnaudit
