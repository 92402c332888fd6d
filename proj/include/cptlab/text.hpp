// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cptlab {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// Byte escape used by the plain-text file formats: printable ASCII except
/// the backslash stays literal, every other byte becomes `\xHH`.
std::string escape_bytes(std::string_view bytes);
/// Inverse of `escape_bytes`; throws FormatError on malformed input.
std::string unescape_bytes(std::string_view escaped);

bool is_space_byte(unsigned char c);
/// Maximal runs of non-whitespace bytes.
std::vector<std::string_view> split_words(std::string_view text);
bool is_valid_utf8(std::string_view text);

std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace cptlab
