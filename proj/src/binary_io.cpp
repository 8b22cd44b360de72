#include "tknn/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace tknn {

void ByteWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

ByteReader ByteReader::from_file(const std::filesystem::path& path, std::string what) {
  return ByteReader(read_file(path), std::move(what) + " " + path.string());
}

void ByteReader::fail(const std::string& why) const { throw FormatError(what_ + ": " + why); }

const char* ByteReader::take(std::size_t n, std::string_view field) {
  if (data_.size() - pos_ < n) {
    fail("truncated at offset " + std::to_string(pos_) + " while reading " + std::string(field) + " (need " +
         std::to_string(n) + " bytes, " + std::to_string(data_.size() - pos_) + " left)");
  }
  const char* p = data_.data() + pos_;
  pos_ += n;
  return p;
}

void ByteReader::expect_magic(std::string_view magic) {
  const std::string got = get_bytes(magic.size(), "magic");
  if (got != magic) fail("bad magic '" + got + "', expected '" + std::string(magic) + "'");
}

void ByteReader::expect_version(std::uint32_t supported) {
  const auto v = get<std::uint32_t>("version");
  if (v != supported) {
    fail("unsupported version " + std::to_string(v) + " (this build reads version " + std::to_string(supported) + ")");
  }
}

void ByteReader::expect_end() {
  if (pos_ != data_.size()) {
    fail("trailing " + std::to_string(data_.size() - pos_) + " bytes at offset " + std::to_string(pos_));
  }
}

}  // namespace tknn
