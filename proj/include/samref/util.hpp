#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace samref {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
inline std::string sha256_hex(const std::string& s) {
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}
std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::string base64_encode(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to `<path>.tmp.<pid>.<n>` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
inline void write_file_atomic(const std::filesystem::path& path, const std::string& s) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

/// Little-endian byte appender / reader for the binary record formats.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);
  void raw(const void* p, std::size_t n);
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : b_(bytes) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  void raw(void* p, std::size_t n);
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

/// Warning sink shared by the library (stderr by default).
void log_warning(const std::string& msg);

}  // namespace samref
