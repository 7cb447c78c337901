#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ueforge/tensor.hpp"

// Little-endian binary helpers shared by the UEWT/UEPD/UEDS formats.
namespace ueforge::io {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  // name length u32 + UTF-8 name, rank u32, extents u32 each, f64 payload.
  void tensor(const std::string& name, const Shape& shape, std::span<const double> values);

  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// Bounds-checked reader; every overrun throws FormatError mentioning `what_`.
class ByteReader {
 public:
  ByteReader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  void expect_magic(std::string_view magic);
  std::uint16_t u16();
  std::uint32_t u32();
  double f64();
  void f64s(std::span<double> out);
  TensorRecord tensor();
  bool at_end() const { return pos_ == data_.size(); }
  void expect_end();

 private:
  void need(std::size_t n);
  std::string data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace ueforge::io
