#pragma once

// Little-endian binary encoding shared by the checkpoint, datastore and
// index file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace tknn {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

/// A file could not be decoded; the message names the reason.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Whole file as bytes; throws std::runtime_error if it cannot be opened.
std::string read_file(const std::filesystem::path& path);

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_span(std::span<const T> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  void put_bytes(std::string_view s) { buf_.append(s); }

  const std::string& bytes() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}
  static ByteReader from_file(const std::filesystem::path& path, std::string what);

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(std::string_view field) {
    T v;
    std::memcpy(&v, take(sizeof(T), field), sizeof(T));
    return v;
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_span(std::span<T> out, std::string_view field) {
    std::memcpy(out.data(), take(out.size_bytes(), field), out.size_bytes());
  }
  std::string get_bytes(std::size_t n, std::string_view field) { return std::string(take(n, field), n); }

  /// Checks a 4-byte magic tag.
  void expect_magic(std::string_view magic);
  void expect_version(std::uint32_t supported);
  void expect_end();
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  [[noreturn]] void fail(const std::string& why) const;

 private:
  const char* take(std::size_t n, std::string_view field);

  std::string data_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace tknn
