#include "qkscope/tensor_container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include "json.hpp"

#include "qkscope/error.hpp"
#include "qkscope/io.hpp"

namespace qkscope {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

struct DTypeInfo {
  DType dtype;
  const char* name;
  std::size_t size;
};

constexpr DTypeInfo kDTypes[] = {
    {DType::F64, "F64", 8}, {DType::F32, "F32", 4}, {DType::F16, "F16", 2},
    {DType::BF16, "BF16", 2}, {DType::I64, "I64", 8}, {DType::I32, "I32", 4},
    {DType::I16, "I16", 2}, {DType::I8, "I8", 1}, {DType::U8, "U8", 1},
    {DType::BOOL, "BOOL", 1},
};

[[noreturn]] void malformed(const std::string& why) {
  throw Error(ErrorKind::MalformedHeader, "malformed tensor container: " + why);
}

}  // namespace

std::string dtype_name(DType dtype) {
  for (const auto& info : kDTypes)
    if (info.dtype == dtype) return info.name;
  return "?";
}

DType parse_dtype(const std::string& name) {
  for (const auto& info : kDTypes)
    if (name == info.name) return info.dtype;
  throw Error(ErrorKind::UnsupportedDtype, "unsupported tensor dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) noexcept {
  for (const auto& info : kDTypes)
    if (info.dtype == dtype) return info.size;
  return 0;
}

bool is_float(DType dtype) noexcept {
  return dtype == DType::F64 || dtype == DType::F32 || dtype == DType::F16 ||
         dtype == DType::BF16;
}

float half_to_float(std::uint16_t bits) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  std::uint32_t exponent = (bits >> 10) & 0x1fu;
  std::uint32_t mantissa = bits & 0x3ffu;
  std::uint32_t out;
  if (exponent == 0) {
    if (mantissa == 0) {
      out = sign;
    } else {
      // subnormal: renormalize
      int shift = 0;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        ++shift;
      }
      mantissa &= 0x3ffu;
      out = sign | static_cast<std::uint32_t>(127 - 15 - shift + 1) << 23 | mantissa << 13;
    }
  } else if (exponent == 0x1f) {
    out = sign | 0x7f800000u | mantissa << 13;
  } else {
    out = sign | (exponent + 127 - 15) << 23 | mantissa << 13;
  }
  return std::bit_cast<float>(out);
}

float bfloat16_to_float(std::uint16_t bits) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_half(float value) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs >= 0x7f800000u) {
    return static_cast<std::uint16_t>(sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u));
  }
  if (abs >= 0x477ff000u) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow
  if (abs < 0x33000001u) return sign;                                          // underflow
  std::uint32_t exponent = abs >> 23;
  std::uint32_t mantissa = abs & 0x7fffffu;
  if (exponent < 113) {
    // subnormal half
    mantissa |= 0x800000u;
    const std::uint32_t shift = 126 - exponent;
    std::uint32_t half = mantissa >> shift;
    const std::uint32_t rem = mantissa & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = ((exponent - 112) << 10) | (mantissa >> 13);
  const std::uint32_t rem = mantissa & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

std::size_t TensorEntry::element_count() const noexcept {
  std::size_t count = 1;
  for (auto d : shape) count *= static_cast<std::size_t>(d);
  return count;
}

TensorContainer::TensorContainer(std::map<std::string, TensorEntry> entries,
                                 std::vector<std::byte> buffer,
                                 std::map<std::string, std::string> metadata)
    : entries_(std::move(entries)), buffer_(std::move(buffer)), metadata_(std::move(metadata)) {}

const TensorEntry& TensorContainer::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw Error(ErrorKind::MissingTensor, "missing tensor '" + name + "'");
  }
  return it->second;
}

std::span<const std::byte> TensorContainer::raw(const std::string& name) const {
  const auto& e = entry(name);
  return std::span<const std::byte>(buffer_).subspan(e.begin, e.end - e.begin);
}

std::vector<float> TensorContainer::read_f32(const std::string& name) const {
  const auto& e = entry(name);
  const auto bytes = raw(name);
  const std::size_t n = e.element_count();
  std::vector<float> out(n);
  switch (e.dtype) {
    case DType::F32:
      std::memcpy(out.data(), bytes.data(), n * 4);
      break;
    case DType::F64:
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, bytes.data() + i * 8, 8);
        out[i] = static_cast<float>(v);
      }
      break;
    case DType::F16:
    case DType::BF16:
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t bits;
        std::memcpy(&bits, bytes.data() + i * 2, 2);
        out[i] = e.dtype == DType::F16 ? half_to_float(bits) : bfloat16_to_float(bits);
      }
      break;
    default:
      throw Error(ErrorKind::UnsupportedDtype,
                  "tensor '" + name + "' has non-float dtype " + dtype_name(e.dtype));
  }
  return out;
}

TensorContainer parse_container_bytes(std::span<const std::byte> file) {
  if (file.size() < 8) malformed("file shorter than the 8-byte header length");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, file.data(), 8);
  if (header_len > file.size() - 8) {
    malformed("header length " + std::to_string(header_len) + " exceeds file size " +
              std::to_string(file.size()));
  }
  const char* header_begin = reinterpret_cast<const char*>(file.data() + 8);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_begin, header_begin + header_len);
  } catch (const nlohmann::json::exception& e) {
    malformed(std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) malformed("header is not a JSON object");

  const std::size_t buffer_size = file.size() - 8 - header_len;
  std::map<std::string, TensorEntry> entries;
  std::map<std::string, std::string> metadata;
  for (const auto& [name, value] : header.items()) {
    if (name == "__metadata__") {
      if (!value.is_object()) malformed("__metadata__ must be an object");
      for (const auto& [k, v] : value.items()) {
        if (!v.is_string()) malformed("__metadata__ values must be strings");
        metadata[k] = v.get<std::string>();
      }
      continue;
    }
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
        !value.contains("data_offsets")) {
      malformed("entry '" + name + "' lacks dtype/shape/data_offsets");
    }
    const auto& dtype = value["dtype"];
    const auto& shape = value["shape"];
    const auto& offsets = value["data_offsets"];
    if (!dtype.is_string() || !shape.is_array() || !offsets.is_array() || offsets.size() != 2) {
      malformed("entry '" + name + "' has ill-typed fields");
    }
    TensorEntry e;
    e.dtype = parse_dtype(dtype.get<std::string>());
    for (const auto& d : shape) {
      if (!d.is_number_unsigned()) malformed("entry '" + name + "' has a negative or non-integer dim");
      e.shape.push_back(d.get<std::int64_t>());
    }
    if (!offsets[0].is_number_unsigned() || !offsets[1].is_number_unsigned()) {
      malformed("entry '" + name + "' has invalid data_offsets");
    }
    e.begin = offsets[0].get<std::size_t>();
    e.end = offsets[1].get<std::size_t>();
    if (e.end < e.begin || e.end > buffer_size) {
      malformed("entry '" + name + "' byte range lies outside the data buffer");
    }
    if (e.element_count() * dtype_size(e.dtype) != e.end - e.begin) {
      malformed("entry '" + name + "' byte length does not match shape x dtype size");
    }
    entries.emplace(name, std::move(e));
  }

  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& [name, e] : entries)
    if (e.end > e.begin) ranges.emplace_back(e.begin, e.end);
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw Error(ErrorKind::OverlappingRanges,
                  "tensor byte ranges overlap at offset " + std::to_string(ranges[i].first));
    }
  }

  const auto data = file.subspan(8 + header_len);
  return TensorContainer(std::move(entries), std::vector<std::byte>(data.begin(), data.end()),
                         std::move(metadata));
}

TensorContainer parse_container(const std::filesystem::path& path) {
  return parse_container_bytes(read_file_bytes(path));
}

TensorBlob make_f32_blob(std::vector<std::int64_t> shape, std::span<const float> values) {
  TensorBlob blob;
  blob.dtype = DType::F32;
  blob.shape = std::move(shape);
  blob.data.resize(values.size() * 4);
  std::memcpy(blob.data.data(), values.data(), blob.data.size());
  return blob;
}

std::vector<std::byte> serialize_container(const std::map<std::string, TensorBlob>& tensors,
                                           const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!metadata.empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : metadata) meta[k] = v;
    header["__metadata__"] = std::move(meta);
  }
  std::size_t offset = 0;
  for (const auto& [name, blob] : tensors) {
    std::size_t count = 1;
    for (auto d : blob.shape) count *= static_cast<std::size_t>(d);
    if (count * dtype_size(blob.dtype) != blob.data.size()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor '" + name + "' data size does not match its shape");
    }
    header[name] = {{"dtype", dtype_name(blob.dtype)},
                    {"shape", blob.shape},
                    {"data_offsets", {offset, offset + blob.data.size()}}};
    offset += blob.data.size();
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  std::memcpy(out.data(), &len, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::size_t pos = 8 + text.size();
  for (const auto& [name, blob] : tensors) {
    std::memcpy(out.data() + pos, blob.data.data(), blob.data.size());
    pos += blob.data.size();
  }
  return out;
}

void write_container(const std::filesystem::path& path,
                     const std::map<std::string, TensorBlob>& tensors,
                     const std::map<std::string, std::string>& metadata) {
  write_file_bytes(path, serialize_container(tensors, metadata));
}

}  // namespace qkscope
