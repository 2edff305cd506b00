#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cplm {

/// Splits on runs of ASCII whitespace; never yields empty tokens.
std::vector<std::string> split_whitespace(std::string_view text);

std::string join_tokens(const std::vector<std::string>& tokens);

/// ASCII-only lowercasing; multibyte UTF-8 sequences pass through untouched.
std::string ascii_lower(std::string_view text);

bool has_ascii_upper(std::string_view text);

/// Byte offset of the first invalid UTF-8 sequence, or npos if the text is valid.
std::size_t find_invalid_utf8(std::string_view text);

/// Reads a whole text file split into lines. Accepts LF and CRLF endings;
/// a trailing newline does not produce a final empty line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, std::string_view content);

std::string read_text_file(const std::filesystem::path& path);

/// FNV-1a 64-bit. Used for deterministic corpus splits and manifest hashes.
std::uint64_t fnv1a64(std::string_view bytes);

/// Fixed-point decimal formatting (printf %.Nf); keeps emitted CSVs
/// byte-stable across runs.
std::string format_fixed(double value, int decimals);

std::string to_hex(std::uint64_t value);

}  // namespace cplm
