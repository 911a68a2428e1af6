#pragma once

#include <string>
#include <string_view>

namespace cdm::io {

std::string read_file(const std::string& path);

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe partial content.
void write_file_atomic(const std::string& path, std::string_view content);

/// %.17g, with "inf" / "-inf" / "nan" spelled out.
std::string format_double(double v);

}  // namespace cdm::io
