#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <system_error>
#include <vector>

#include "usamnet/errors.hpp"

namespace usam::png {

// Interleaved 8-bit image (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Single-channel 16-bit image, host byte order.
struct Image16 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> pixels;
};

namespace detail {

struct File {
  std::FILE* fp = nullptr;
  File(const std::filesystem::path& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
  ~File() {
    if (fp) std::fclose(fp);
  }
  File(const File&) = delete;
  File& operator=(const File&) = delete;
};

inline bool host_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

// Decodes into `bytes` with the requested channel count and bit depth.
// Returns false on a libpng error (the caller raises a DataError).
inline bool decode(std::FILE* fp, std::size_t want_channels, int want_depth, std::size_t& width,
                   std::size_t& height, std::vector<std::uint8_t>& bytes, std::string& problem) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);

  if (want_depth == 16) {
    if (depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
      problem = "expected 16-bit grayscale";
      png_destroy_read_struct(&png, &info, nullptr);
      return false;
    }
    if (host_little_endian()) png_set_swap(png);
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const bool is_gray = !(color & PNG_COLOR_MASK_COLOR);
    if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
    if (want_channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  const std::size_t expected = width * want_channels * (want_depth / 8);
  if (row_bytes != expected) {
    problem = "unexpected pixel layout";
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  bytes.resize(row_bytes * height);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = bytes.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool encode(std::FILE* fp, std::size_t width, std::size_t height, int color_type, int depth,
                   const std::uint8_t* bytes, std::size_t row_bytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (depth == 16 && host_little_endian()) png_set_swap(png);
  for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<std::uint8_t*>(bytes + y * row_bytes);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

// Writes through "<path>.tmp" and renames, so readers never see a partial file.
template <typename Encode>
void write_atomically(const std::filesystem::path& path, Encode&& encode_to) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    File file(tmp, "wb");
    if (!file.fp) throw IoError("cannot open " + tmp.string() + " for writing");
    if (!encode_to(file.fp)) throw IoError("failed to encode " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

/// Reads an 8-bit PNG, converting to `channels` (1 or 3).
inline Image8 read8(const std::filesystem::path& path, std::size_t channels) {
  detail::File file(path, "rb");
  if (!file.fp) throw IoError("cannot open " + path.string());
  Image8 img;
  img.channels = channels;
  std::string problem;
  if (!detail::decode(file.fp, channels, 8, img.width, img.height, img.pixels, problem))
    throw DataError("cannot decode " + path.string() + (problem.empty() ? "" : ": " + problem));
  return img;
}

/// Reads a 16-bit grayscale PNG.
inline Image16 read16(const std::filesystem::path& path) {
  detail::File file(path, "rb");
  if (!file.fp) throw IoError("cannot open " + path.string());
  Image16 img;
  std::vector<std::uint8_t> bytes;
  std::string problem;
  if (!detail::decode(file.fp, 1, 16, img.width, img.height, bytes, problem))
    throw DataError("cannot decode " + path.string() + (problem.empty() ? "" : ": " + problem));
  img.pixels.resize(img.width * img.height);
  std::memcpy(img.pixels.data(), bytes.data(), bytes.size());
  return img;
}

inline void write8(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("write8: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels) throw UsageError("write8: pixel count mismatch");
  const int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  detail::write_atomically(path, [&](std::FILE* fp) {
    return detail::encode(fp, img.width, img.height, color, 8, img.pixels.data(), img.width * img.channels);
  });
}

inline void write16(const std::filesystem::path& path, const Image16& img) {
  if (img.pixels.size() != img.width * img.height) throw UsageError("write16: pixel count mismatch");
  detail::write_atomically(path, [&](std::FILE* fp) {
    return detail::encode(fp, img.width, img.height, PNG_COLOR_TYPE_GRAY, 16,
                          reinterpret_cast<const std::uint8_t*>(img.pixels.data()), img.width * 2);
  });
}

}  // namespace usam::png
