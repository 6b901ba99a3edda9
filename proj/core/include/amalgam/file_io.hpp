#pragma once

#include <string>
#include <vector>

namespace amalgam {

/// Whole-file readers. Throw IoError when the file cannot be opened or read.
std::string read_text_file(const std::string& path);
std::vector<unsigned char> read_binary_file(const std::string& path);

/// Atomic whole-file writers: the content lands in a sibling temp file that
/// is renamed over the destination, so a crash mid-write never leaves a
/// partial file under the final name. Parent directories are created.
void write_file_atomic(const std::string& path, const std::string& content);
void write_file_atomic(const std::string& path, const std::vector<unsigned char>& content);

}  // namespace amalgam
