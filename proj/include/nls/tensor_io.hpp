#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace nls {

/// NLT container, version 1:
///   "NLT1" | u32 little-endian header length | UTF-8 JSON header | payload
/// The header is {"dtype":"f32","shape":[...],"order":"row-major"} and the
/// payload holds prod(shape) little-endian float32 values.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t element_count() const;
};

std::string tensor_header(std::span<const std::int64_t> shape);

void write_tensor(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                  std::span<const float> payload);
Tensor read_tensor(const std::filesystem::path& path);

/// Convenience overload narrowing 64-bit values to the persisted float32.
void write_tensor(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                  std::span<const double> payload);

}  // namespace nls
