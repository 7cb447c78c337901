#include "ueforge/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <system_error>
#include <thread>

#include "ueforge/errors.hpp"

namespace ueforge::io {

void ByteWriter::u16(std::uint16_t v) {
  buf_.push_back(static_cast<char>(v & 0xff));
  buf_.push_back(static_cast<char>((v >> 8) & 0xff));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f64(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

void ByteWriter::f64s(std::span<const double> values) {
  buf_.reserve(buf_.size() + 8 * values.size());
  for (double v : values) f64(v);
}

void ByteWriter::tensor(const std::string& name, const Shape& shape, std::span<const double> values) {
  u32(static_cast<std::uint32_t>(name.size()));
  bytes(name);
  u32(static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) u32(static_cast<std::uint32_t>(e));
  f64s(values);
}

void ByteReader::need(std::size_t n) {
  if (data_.size() - pos_ < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
}

void ByteReader::expect_magic(std::string_view magic) {
  need(magic.size());
  if (std::string_view(data_).substr(pos_, magic.size()) != magic) {
    throw FormatError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
  }
  pos_ += magic.size();
}

std::uint16_t ByteReader::u16() {
  need(2);
  const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
  pos_ += 2;
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t ByteReader::u32() {
  need(4);
  const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
  pos_ += 4;
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double ByteReader::f64() {
  need(8);
  const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
  pos_ += 8;
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return std::bit_cast<double>(v);
}

void ByteReader::f64s(std::span<double> out) {
  need(8 * out.size());
  for (auto& v : out) v = f64();
}

TensorRecord ByteReader::tensor() {
  TensorRecord rec;
  const auto name_len = u32();
  need(name_len);
  rec.name = data_.substr(pos_, name_len);
  pos_ += name_len;
  const auto rank = u32();
  if (rank > 8) throw FormatError(what_ + ": tensor '" + rec.name + "' has implausible rank " + std::to_string(rank));
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto e = u32();
    if (e == 0) throw FormatError(what_ + ": tensor '" + rec.name + "' has a zero extent");
    rec.shape.push_back(e);
    n *= e;
  }
  need(8 * n);
  rec.values.resize(n);
  f64s(rec.values);
  return rec;
}

void ByteReader::expect_end() {
  if (!at_end()) throw FormatError(what_ + ": " + std::to_string(data_.size() - pos_) + " trailing bytes");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::ostringstream tmp_name;
  tmp_name << path << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id());
  const std::string tmp = tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw InputError("cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

}  // namespace ueforge::io
