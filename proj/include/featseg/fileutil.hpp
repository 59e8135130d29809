#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace featseg {

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
/// Parent directories are created as needed. Throws IoError.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes);

void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text);

/// Reads a whole file. Throws IoError if it cannot be opened.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

std::string read_file_text(const std::filesystem::path& path);

}  // namespace featseg
