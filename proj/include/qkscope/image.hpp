#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qkscope/checkpoint.hpp"
#include "qkscope/matrix.hpp"

namespace qkscope {

/// 8-bit interleaved RGB.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  bool operator==(const RgbImage&) const = default;
};

/// Decodes PNG or JPEG (detected from the file signature) to RGB.
RgbImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);
std::vector<std::uint8_t> encode_png(const RgbImage& image);

/// Single-channel PNG samples scaled to [0, 1]; multi-channel input uses the channel maximum.
MatrixD read_mask(const std::filesystem::path& path);
/// Raw integer samples of a single-channel (gray or palette) PNG.
Matrix<std::int32_t> read_label_png(const std::filesystem::path& path);
void write_gray_png(const std::filesystem::path& path, const Matrix<std::uint16_t>& samples,
                    int bit_depth);

/// Resized RGB image in [0, 1], HWC, before per-channel normalization.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;
  std::string id;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

/// Bilinear resize with half-pixel centers (no antialiasing).
ImageTensor resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width);
ImageTensor make_image_tensor(const RgbImage& image, const MappingConfig& config, std::string id);

}  // namespace qkscope
