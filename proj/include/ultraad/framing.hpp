#pragma once

// Binary framing shared by every on-disk artifact:
//
//   magic (4 bytes) | header length (u32 LE) | UTF-8 JSON header | payload
//
// Payload values are little-endian regardless of host byte order.

#include "json.hpp"
#include "ultraad/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ultraad::framing {

using Json = nlohmann::json;

struct Frame {
  Json header;
  std::string payload;
};

void write_frame(const std::filesystem::path& path, std::string_view magic, const Json& header,
                 std::string_view payload);
Frame read_frame(const std::filesystem::path& path, std::string_view magic);

void put_f32(std::string& out, std::span<const float> values);
void put_f64(std::string& out, std::span<const double> values);
void put_u8(std::string& out, std::span<const std::uint8_t> values);

// Sequential decoder over a payload. Every read throws FormatError
// "truncated payload" when fewer bytes remain than requested.
class PayloadReader {
 public:
  explicit PayloadReader(std::string_view payload) : data_(payload) {}

  std::vector<float> f32(std::size_t count);
  std::vector<double> f64(std::size_t count);
  std::vector<std::uint8_t> u8(std::size_t count);

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view take(std::size_t bytes);

  std::string_view data_;
  std::size_t pos_ = 0;
};

enum class DType { f32, f64 };

struct NamedTensor {
  std::string name;
  Matrix value;
};

// Named-tensor archive: header is {"meta": ..., "tensors": [{name, dtype, shape}]}
// with tensors stored back to back in header order, row-major.
void write_tensor_file(const std::filesystem::path& path, std::string_view magic, const Json& meta,
                       const std::vector<NamedTensor>& tensors, DType dtype);

struct TensorFile {
  Json meta;
  std::vector<NamedTensor> tensors;

  // Throws FormatError if the tensor is absent.
  const Matrix& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view magic);

}  // namespace ultraad::framing
