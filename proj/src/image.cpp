#include "qkscope/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

#include "qkscope/error.hpp"
#include "qkscope/io.hpp"

namespace qkscope {

namespace {

[[noreturn]] void io_error(const std::filesystem::path& path, const std::string& why) {
  throw Error(ErrorKind::Io, "image '" + path.string() + "': " + why);
}

struct PngReadState {
  const std::vector<std::byte>* bytes = nullptr;
  std::size_t offset = 0;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t count) {
  auto* state = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (state->offset + count > state->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, state->bytes->data() + state->offset, count);
  state->offset += count;
}

void png_error_fn(png_structp png, png_const_charp message) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = message;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

enum class PngMode { Rgb8, RawSamples };

struct PngPixels {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

// Decodes a PNG. Rgb8 expands palette/gray to 8-bit RGB and drops alpha; RawSamples
// keeps channel values as stored (palette indices stay indices).
PngPixels decode_png(const std::vector<std::byte>& bytes, const std::filesystem::path& path,
                     PngMode mode) {
  std::string what;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn, png_warning_fn);
  if (!png) io_error(path, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    io_error(path, "libpng init failed");
  }
  PngPixels out;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  PngReadState state{&bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    io_error(path, "PNG decode failed: " + what);
  }
  png_set_read_fn(png, &state, png_read_from_memory);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (mode == PngMode::Rgb8) {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
  } else {
    if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
    png_set_swap(png);  // 16-bit samples arrive little-endian
  }
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  const int stored_depth = out.bit_depth;
  out.bit_depth = mode == PngMode::RawSamples && color != PNG_COLOR_TYPE_PALETTE
                      ? png_get_bit_depth(png, info)
                      : stored_depth;
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = out.width * out.height * out.channels;
  out.samples.resize(n);
  if (stored_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v;
      std::memcpy(&v, raw.data() + i * 2, 2);
      out.samples[i] = v;
    }
  } else {
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t i = 0; i < out.width * out.channels; ++i)
        out.samples[y * out.width * out.channels + i] = raw[y * rowbytes + i];
  }
  return out;
}

struct JpegErrorState {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* state = reinterpret_cast<JpegErrorState*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, state->message);
  std::longjmp(state->jump, 1);
}

RgbImage decode_jpeg(const std::vector<std::byte>& bytes, const std::filesystem::path& path) {
  jpeg_decompress_struct cinfo{};
  JpegErrorState err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RgbImage img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    io_error(path, std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.pixels.resize(img.width * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

bool is_png(const std::vector<std::byte>& bytes) {
  static constexpr std::array<unsigned char, 8> sig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::memcmp(bytes.data(), sig.data(), 8) == 0;
}

bool is_jpeg(const std::vector<std::byte>& bytes) {
  return bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xff &&
         static_cast<unsigned char>(bytes[1]) == 0xd8 && static_cast<unsigned char>(bytes[2]) == 0xff;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

std::vector<std::uint8_t> encode_png_raw(std::size_t width, std::size_t height, int color_type,
                                         int bit_depth, const std::vector<std::uint8_t>& rowdata,
                                         std::size_t rowbytes) {
  std::string what;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn, png_warning_fn);
  if (!png) throw Error(ErrorKind::Io, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows(height);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::Io, "PNG encode failed: " + what);
  }
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(rowdata.data() + y * rowbytes);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

RgbImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (is_png(bytes)) {
    auto px = decode_png(bytes, path, PngMode::Rgb8);
    RgbImage img;
    img.width = px.width;
    img.height = px.height;
    img.pixels.resize(px.samples.size());
    std::transform(px.samples.begin(), px.samples.end(), img.pixels.begin(),
                   [](std::uint16_t v) { return static_cast<std::uint8_t>(v); });
    return img;
  }
  if (is_jpeg(bytes)) return decode_jpeg(bytes, path);
  io_error(path, "unrecognized image format (expected PNG or JPEG)");
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  return encode_png_raw(image.width, image.height, PNG_COLOR_TYPE_RGB, 8, image.pixels,
                        image.width * 3);
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  const auto data = encode_png(image);
  write_file_bytes(path, std::as_bytes(std::span(data.data(), data.size())));
}

void write_gray_png(const std::filesystem::path& path, const Matrix<std::uint16_t>& samples,
                    int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) {
    throw Error(ErrorKind::InvalidArgument, "write_gray_png: bit depth must be 8 or 16");
  }
  const std::size_t bytes_per = bit_depth / 8;
  const std::size_t rowbytes = samples.cols() * bytes_per;
  std::vector<std::uint8_t> rowdata(rowbytes * samples.rows());
  for (std::size_t y = 0; y < samples.rows(); ++y) {
    for (std::size_t x = 0; x < samples.cols(); ++x) {
      const std::uint16_t v = samples(y, x);
      if (bit_depth == 8) {
        rowdata[y * rowbytes + x] = static_cast<std::uint8_t>(v);
      } else {
        rowdata[y * rowbytes + 2 * x] = static_cast<std::uint8_t>(v >> 8);
        rowdata[y * rowbytes + 2 * x + 1] = static_cast<std::uint8_t>(v & 0xff);
      }
    }
  }
  const auto data = encode_png_raw(samples.cols(), samples.rows(), PNG_COLOR_TYPE_GRAY, bit_depth,
                                   rowdata, rowbytes);
  write_file_bytes(path, std::as_bytes(std::span(data.data(), data.size())));
}

MatrixD read_mask(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (!is_png(bytes)) io_error(path, "masks must be PNG");
  const auto px = decode_png(bytes, path, PngMode::Rgb8);
  MatrixD mask(px.height, px.width);
  for (std::size_t i = 0; i < px.height * px.width; ++i) {
    std::uint16_t best = 0;
    for (std::size_t c = 0; c < px.channels; ++c) best = std::max(best, px.samples[i * px.channels + c]);
    mask.data()[i] = static_cast<double>(best) / 255.0;
  }
  return mask;
}

Matrix<std::int32_t> read_label_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (!is_png(bytes)) io_error(path, "label maps must be PNG");
  const auto px = decode_png(bytes, path, PngMode::RawSamples);
  if (px.channels != 1) io_error(path, "label maps must be single-channel (gray or palette)");
  Matrix<std::int32_t> labels(px.height, px.width);
  for (std::size_t i = 0; i < px.samples.size(); ++i) labels.data()[i] = px.samples[i];
  return labels;
}

ImageTensor resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width) {
  if (image.width == 0 || image.height == 0 || height == 0 || width == 0) {
    throw Error(ErrorKind::ShapeMismatch, "resize_bilinear: empty image or target");
  }
  ImageTensor out;
  out.height = height;
  out.width = width;
  out.rgb.resize(height * width * 3);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bottom = (1.0 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        out.rgb[(y * width + x) * 3 + c] =
            static_cast<float>(((1.0 - wy) * top + wy * bottom) / 255.0);
      }
    }
  }
  return out;
}

ImageTensor make_image_tensor(const RgbImage& image, const MappingConfig& config, std::string id) {
  ImageTensor t = resize_bilinear(image, config.image_size, config.image_size);
  t.id = std::move(id);
  return t;
}

}  // namespace qkscope
