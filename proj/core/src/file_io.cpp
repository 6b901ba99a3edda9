#include "amalgam/file_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "amalgam/errors.hpp"

namespace amalgam {

namespace fs = std::filesystem;

namespace {

std::ifstream open_for_read(const std::string& path, std::ios::openmode mode) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

void write_atomic_impl(const std::string& path, const char* data, size_t n) {
  const fs::path target(path);
  std::error_code ec;
  if (target.has_parent_path()) {
    fs::create_directories(target.parent_path(), ec);
    if (ec)
      throw IoError("cannot create directory '" + target.parent_path().string() +
                    "': " + ec.message());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(data, static_cast<std::streamsize>(n));
    out.flush();
    if (!out) {
      std::remove(tmp.string().c_str());
      throw IoError("failed while writing '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, target, ec);
  if (ec) {
    std::remove(tmp.string().c_str());
    throw IoError("cannot rename '" + tmp.string() + "' to '" + path + "': " + ec.message());
  }
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in = open_for_read(path, std::ios::in | std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed while reading '" + path + "'");
  return content;
}

std::vector<unsigned char> read_binary_file(const std::string& path) {
  std::ifstream in = open_for_read(path, std::ios::in | std::ios::binary);
  std::vector<unsigned char> content((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed while reading '" + path + "'");
  return content;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  write_atomic_impl(path, content.data(), content.size());
}

void write_file_atomic(const std::string& path, const std::vector<unsigned char>& content) {
  write_atomic_impl(path, reinterpret_cast<const char*>(content.data()), content.size());
}

}  // namespace amalgam
