#include "nls/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include <json.hpp>

#include "nls/errors.hpp"

namespace nls {

namespace {

constexpr char kMagic[4] = {'N', 'L', 'T', '1'};

std::size_t shape_product(std::span<const std::int64_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw FormatError("tensor shape has a negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void put_u32le(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::size_t Tensor::element_count() const { return shape_product(shape); }

std::string tensor_header(std::span<const std::int64_t> shape) {
  nlohmann::ordered_json h;
  h["dtype"] = "f32";
  h["shape"] = std::vector<std::int64_t>(shape.begin(), shape.end());
  h["order"] = "row-major";
  return h.dump();
}

void write_tensor(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                  std::span<const float> payload) {
  if (shape_product(shape) != payload.size()) {
    throw FormatError("payload length " + std::to_string(payload.size()) + " does not match shape product " +
                      std::to_string(shape_product(shape)));
  }
  const std::string header = tensor_header(shape);
  std::string bytes(kMagic, 4);
  put_u32le(bytes, static_cast<std::uint32_t>(header.size()));
  bytes += header;
  const std::size_t offset = bytes.size();
  bytes.resize(offset + payload.size() * 4);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(payload[i]);
    for (int b = 0; b < 4; ++b) bytes[offset + 4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("failed writing " + path.string());
}

void write_tensor(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                  std::span<const double> payload) {
  std::vector<float> narrowed(payload.begin(), payload.end());
  write_tensor(path, shape, std::span<const float>(narrowed));
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open tensor file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic (not an NLT1 file)");
  }
  const std::uint32_t header_len = get_u32le(bytes.data() + 4);
  if (bytes.size() < 8ull + header_len) throw FormatError(path.string() + ": truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (h.value("dtype", "") != "f32" || h.value("order", "") != "row-major" || !h.contains("shape")) {
    throw FormatError(path.string() + ": unsupported header " + h.dump());
  }
  Tensor t;
  try {
    t.shape = h.at("shape").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad shape: " + e.what());
  }
  const std::size_t count = shape_product(t.shape);
  const std::size_t payload_bytes = bytes.size() - 8 - header_len;
  if (payload_bytes != count * 4) {
    throw FormatError(path.string() + ": payload has " + std::to_string(payload_bytes) + " bytes, shape needs " +
                      std::to_string(count * 4));
  }
  t.data.resize(count);
  const unsigned char* p = bytes.data() + 8 + header_len;
  for (std::size_t i = 0; i < count; ++i) t.data[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  return t;
}

}  // namespace nls
