#include "omniflux/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "omniflux/errors.hpp"

namespace omniflux {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

namespace {

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

}  // namespace

void ByteWriter::u32(std::uint32_t v) { put(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put(buf_, v); }
void ByteWriter::f32(float v) { put(buf_, v); }
void ByteWriter::f64(double v) { put(buf_, v); }
void ByteWriter::bytes(std::string_view s) { buf_.append(s); }
void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void ByteReader::fail(const std::string& what) const {
  throw FormatError(context_ + ": " + what + " at byte offset " + std::to_string(pos_));
}

std::string_view ByteReader::bytes(std::size_t n) {
  if (n > data_.size() - pos_) fail("unexpected end of data reading " + std::to_string(n) + " bytes");
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

namespace {

template <typename T>
T take(ByteReader& r) {
  auto raw = r.bytes(sizeof(T));
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

}  // namespace

std::uint32_t ByteReader::u32() { return take<std::uint32_t>(*this); }
std::uint64_t ByteReader::u64() { return take<std::uint64_t>(*this); }
float ByteReader::f32() { return take<float>(*this); }
double ByteReader::f64() { return take<double>(*this); }
std::string ByteReader::str() {
  const auto n = u32();
  return std::string(bytes(n));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace omniflux
