#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

// Binary tensor container:
//   "VADT" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 rank | u64 dims[rank] | 4-byte LE elements, row-major
//   JSON trailer | u64 trailer length
// All integers little-endian. Elements are f32 unless the trailer's
// "dtypes" object marks the tensor "u32".
namespace vocadt::tensor_io {

enum class DType { kF32, kU32 };

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::vector<std::uint32_t> u32;

  std::uint64_t numel() const;
  bool operator==(const Tensor&) const = default;
};

struct TensorFile {
  std::vector<Tensor> tensors;
  nlohmann::json trailer = nlohmann::json::object();

  bool has(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& add(Tensor t);
};

inline constexpr std::uint32_t kVersion = 1;

std::string serialize(const TensorFile& file);
/// Throws FormatError on bad magic, version mismatch, or truncation.
TensorFile deserialize(std::string_view bytes);

void save(const std::filesystem::path& path, const TensorFile& file);
TensorFile load(const std::filesystem::path& path);

}  // namespace vocadt::tensor_io
