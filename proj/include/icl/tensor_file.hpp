#pragma once

// "ICLT" tensor container: magic, u32 version, u32 tensor count, then per
// tensor: u32 name length + UTF-8 name, u32 ndim, u64 dims, u8 dtype
// (0 = f32, 1 = f64), little-endian row-major payload. A u64-length-prefixed
// JSON metadata blob trails the tensors.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace icl::io {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint32_t kTensorFileVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  Dtype dtype = Dtype::F64;
  std::vector<double> values;  // widened to f64 on read

  std::uint64_t element_count() const;
};

struct TensorFile {
  std::vector<Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const TensorFile& file);
TensorFile deserialize(const std::vector<std::uint8_t>& bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace icl::io
