#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace zsq {

std::string read_file(const std::filesystem::path& path);
// Writes through a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace zsq
