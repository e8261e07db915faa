#include "ultraad/framing.hpp"

#include "ultraad/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace ultraad::framing {
namespace {

void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

std::uint64_t get_le(std::string_view in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void write_frame(const std::filesystem::path& path, std::string_view magic, const Json& header,
                 std::string_view payload) {
  if (magic.size() != 4) throw ValidationError("magic must be 4 bytes");
  const std::string text = header.dump();
  if (text.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ValidationError("header too large for u32 length field");
  }
  std::string head(magic);
  put_le(head, text.size(), 4);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

Frame read_frame(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  if (bytes.size() < 4 || std::string_view(bytes).substr(0, 4) != magic) {
    throw FormatError("bad magic");
  }
  if (bytes.size() < 8) throw FormatError("truncated header");
  const std::size_t len = get_le(std::string_view(bytes).substr(4, 4), 4);
  if (bytes.size() < 8 + len) throw FormatError("truncated header");

  Frame frame;
  try {
    frame.header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad header: ") + e.what());
  }
  frame.payload = bytes.substr(8 + len);
  return frame;
}

void put_f32(std::string& out, std::span<const float> values) {
  out.reserve(out.size() + 4 * values.size());
  for (float v : values) put_le(out, std::bit_cast<std::uint32_t>(v), 4);
}

void put_f64(std::string& out, std::span<const double> values) {
  out.reserve(out.size() + 8 * values.size());
  for (double v : values) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
}

void put_u8(std::string& out, std::span<const std::uint8_t> values) {
  out.append(reinterpret_cast<const char*>(values.data()), values.size());
}

std::string_view PayloadReader::take(std::size_t bytes) {
  if (bytes > remaining()) throw FormatError("truncated payload");
  auto view = data_.substr(pos_, bytes);
  pos_ += bytes;
  return view;
}

std::vector<float> PayloadReader::f32(std::size_t count) {
  if (count > remaining() / 4) throw FormatError("truncated payload");
  auto bytes = take(4 * count);
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes.substr(4 * i), 4)));
  }
  return out;
}

std::vector<double> PayloadReader::f64(std::size_t count) {
  if (count > remaining() / 8) throw FormatError("truncated payload");
  auto bytes = take(8 * count);
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<double>(get_le(bytes.substr(8 * i), 8));
  return out;
}

std::vector<std::uint8_t> PayloadReader::u8(std::size_t count) {
  auto bytes = take(count);
  return {bytes.begin(), bytes.end()};
}

void write_tensor_file(const std::filesystem::path& path, std::string_view magic, const Json& meta,
                       const std::vector<NamedTensor>& tensors, DType dtype) {
  Json header;
  header["meta"] = meta;
  header["tensors"] = Json::array();
  std::string payload;
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", dtype == DType::f32 ? "f32" : "f64"},
                                 {"shape", {t.value.rows(), t.value.cols()}}});
    std::span<const double> values(t.value.data(), static_cast<std::size_t>(t.value.size()));
    if (dtype == DType::f64) {
      put_f64(payload, values);
    } else {
      std::vector<float> narrow(values.begin(), values.end());
      put_f32(payload, narrow);
    }
  }
  write_frame(path, magic, header, payload);
}

TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view magic) {
  Frame frame = read_frame(path, magic);
  TensorFile out;
  try {
    out.meta = frame.header.value("meta", Json::object());
    PayloadReader reader(frame.payload);
    for (const auto& entry : frame.header.at("tensors")) {
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw FormatError("negative tensor shape");
      const auto count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
      Matrix m(rows, cols);
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype == "f64") {
        auto v = reader.f64(count);
        std::memcpy(m.data(), v.data(), count * sizeof(double));
      } else if (dtype == "f32") {
        auto v = reader.f32(count);
        for (std::size_t i = 0; i < count; ++i) m.data()[i] = v[i];
      } else {
        throw FormatError("unknown dtype " + dtype);
      }
      out.tensors.push_back({entry.at("name").get<std::string>(), std::move(m)});
    }
    if (reader.remaining() != 0) throw FormatError("trailing bytes after payload");
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad tensor header: ") + e.what());
  }
  return out;
}

const Matrix& TensorFile::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw FormatError("missing tensor " + std::string(name));
}

bool TensorFile::contains(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

}  // namespace ultraad::framing
