#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace qkscope {

// Element types of the safetensors container.
enum class DType { F64, F32, F16, BF16, I64, I32, I16, I8, U8, BOOL };

std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);  // throws UnsupportedDtype
std::size_t dtype_size(DType dtype) noexcept;
bool is_float(DType dtype) noexcept;

float half_to_float(std::uint16_t bits) noexcept;
float bfloat16_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_half(float value) noexcept;

struct TensorEntry {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::size_t begin = 0;  // offsets relative to the start of the data buffer
  std::size_t end = 0;

  std::size_t element_count() const noexcept;
};

/// Parsed tensor container: entry table plus the raw data buffer.
class TensorContainer {
 public:
  TensorContainer() = default;
  TensorContainer(std::map<std::string, TensorEntry> entries, std::vector<std::byte> buffer,
                  std::map<std::string, std::string> metadata);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const TensorEntry& entry(const std::string& name) const;  // throws MissingTensor
  const std::map<std::string, TensorEntry>& entries() const noexcept { return entries_; }
  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
  std::span<const std::byte> raw(const std::string& name) const;

  /// Reads a floating-point tensor widened to f32 (f64 is narrowed).
  std::vector<float> read_f32(const std::string& name) const;

 private:
  std::map<std::string, TensorEntry> entries_;
  std::vector<std::byte> buffer_;
  std::map<std::string, std::string> metadata_;
};

TensorContainer parse_container(const std::filesystem::path& path);
TensorContainer parse_container_bytes(std::span<const std::byte> file_bytes);

/// A tensor to be written; `data` holds little-endian element bytes.
struct TensorBlob {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> data;
};

TensorBlob make_f32_blob(std::vector<std::int64_t> shape, std::span<const float> values);

/// Serializes tensors in name order with a space-padded header (8-byte aligned).
std::vector<std::byte> serialize_container(const std::map<std::string, TensorBlob>& tensors,
                                           const std::map<std::string, std::string>& metadata = {});
void write_container(const std::filesystem::path& path,
                     const std::map<std::string, TensorBlob>& tensors,
                     const std::map<std::string, std::string>& metadata = {});

}  // namespace qkscope
