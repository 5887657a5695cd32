#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace mmt::io {

// I/O failure that names the file and the byte offset where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::filesystem::path& path, uint64_t offset, const std::string& what)
      : std::runtime_error(path.string() + ": byte " + std::to_string(offset) + ": " + what), path_(path), offset_(offset) {}
  const std::filesystem::path& path() const { return path_; }
  uint64_t offset() const { return offset_; }

 private:
  std::filesystem::path path_;
  uint64_t offset_;
};

}  // namespace mmt::io
