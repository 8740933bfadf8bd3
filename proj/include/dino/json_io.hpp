#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace dino {

/// Throws IoError when the file cannot be read and ParseError, carrying the
/// byte offset, when it is not valid JSON.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames it into place, creating
/// parent directories as needed.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dino
