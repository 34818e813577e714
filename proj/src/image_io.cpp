/* Copyright 2026 The cxrnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "cxr/image_io.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <array>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <memory>

namespace cxr {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

// Decoded 8-bit interleaved pixels.
struct Decoded {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<unsigned char> data;
};

Decoded decode_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng: out of memory");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng: out of memory");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_read_update_info(png, info);
  out.cols = static_cast<int>(png_get_image_width(png, info));
  out.rows = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.data.resize(stride * static_cast<std::size_t>(out.rows));
  rows.resize(static_cast<std::size_t>(out.rows));
  for (int y = 0; y < out.rows; ++y) rows[static_cast<std::size_t>(y)] = out.data.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Decoded decode_jpeg(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  Decoded out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("corrupt JPEG '" + path.string() + "'");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  jpeg_start_decompress(&cinfo);
  out.cols = static_cast<int>(cinfo.output_width);
  out.rows = static_cast<int>(cinfo.output_height);
  out.channels = cinfo.output_components;
  const std::size_t stride = static_cast<std::size_t>(out.cols) * out.channels;
  out.data.resize(stride * static_cast<std::size_t>(out.rows));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.data.data() + stride * cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

void encode_png(const std::filesystem::path& path, int rows, int cols, int channels,
                const std::vector<unsigned char>& data) {
  ensure_directory(path.parent_path());
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng: out of memory");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(cols) * channels;
  for (int y = 0; y < rows; ++y)
    png_write_row(png, const_cast<png_bytep>(data.data() + stride * y));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated tensor file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

ImageBuffer read_image(const std::filesystem::path& path) {
  std::array<unsigned char, 8> magic{};
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    in.read(reinterpret_cast<char*>(magic.data()), magic.size());
  }
  Decoded d;
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G') {
    d = decode_png(path);
  } else if (magic[0] == 0xFF && magic[1] == 0xD8) {
    d = decode_jpeg(path);
  } else {
    throw IoError("unsupported image format '" + path.string() + "' (expected PNG or JPEG)");
  }
  // Gray, gray+alpha, RGB, RGBA.
  const int colour = (d.channels >= 3) ? 3 : 1;
  ImageBuffer img(d.rows, d.cols);
  for (int y = 0; y < d.rows; ++y) {
    for (int x = 0; x < d.cols; ++x) {
      const unsigned char* px =
          d.data.data() + (static_cast<std::size_t>(y) * d.cols + x) * d.channels;
      float sum = 0.0f;
      for (int c = 0; c < colour; ++c) sum += px[c];
      img(y, x) = sum / static_cast<float>(colour);
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  std::vector<unsigned char> data(static_cast<std::size_t>(img.size()));
  for (Eigen::Index i = 0; i < img.size(); ++i) data[static_cast<std::size_t>(i)] = to_byte(img.data()[i]);
  encode_png(path, static_cast<int>(img.rows()), static_cast<int>(img.cols()), 1, data);
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  if (img.g.rows() != img.r.rows() || img.b.rows() != img.r.rows() ||
      img.g.cols() != img.r.cols() || img.b.cols() != img.r.cols())
    throw ArgumentError("write_png: RGB planes differ in shape");
  std::vector<unsigned char> data(static_cast<std::size_t>(img.r.size()) * 3);
  for (Eigen::Index i = 0; i < img.r.size(); ++i) {
    data[static_cast<std::size_t>(3 * i)] = to_byte(img.r.data()[i]);
    data[static_cast<std::size_t>(3 * i + 1)] = to_byte(img.g.data()[i]);
    data[static_cast<std::size_t>(3 * i + 2)] = to_byte(img.b.data()[i]);
  }
  encode_png(path, static_cast<int>(img.r.rows()), static_cast<int>(img.r.cols()), 3, data);
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
  const Decoded d = decode_png(path);
  RgbImage out{ImageBuffer(d.rows, d.cols), ImageBuffer(d.rows, d.cols),
               ImageBuffer(d.rows, d.cols)};
  ImageBuffer* planes[3] = {&out.r, &out.g, &out.b};
  for (int y = 0; y < d.rows; ++y) {
    for (int x = 0; x < d.cols; ++x) {
      const unsigned char* px =
          d.data.data() + (static_cast<std::size_t>(y) * d.cols + x) * d.channels;
      for (int c = 0; c < 3; ++c) {
        const int src = d.channels >= 3 ? c : 0;
        (*planes[c])(y, x) = px[src] / 255.0f;
      }
    }
  }
  return out;
}

void write_tensors(const std::filesystem::path& path, const std::vector<ImageBuffer>& images) {
  std::uint32_t rows = 0, cols = 0;
  if (!images.empty()) {
    rows = static_cast<std::uint32_t>(images.front().rows());
    cols = static_cast<std::uint32_t>(images.front().cols());
  }
  for (const auto& img : images)
    if (img.rows() != rows || img.cols() != cols)
      throw ArgumentError("write_tensors: images differ in shape");
  ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(kTensorMagic, 4);
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(images.size()));
  put_u32(out, rows);
  put_u32(out, cols);
  for (const auto& img : images) {
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      std::uint32_t bits;
      const float v = img.data()[i];
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<ImageBuffer> read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw IoError("'" + path.string() + "' is not a tensor container");
  if (get_u32(in) != kTensorVersion) throw IoError("unsupported tensor container version");
  const std::uint32_t count = get_u32(in);
  const std::uint32_t rows = get_u32(in);
  const std::uint32_t cols = get_u32(in);
  std::vector<ImageBuffer> images;
  images.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    ImageBuffer img(rows, cols);
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      const std::uint32_t bits = get_u32(in);
      float v;
      std::memcpy(&v, &bits, 4);
      img.data()[i] = v;
    }
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace cxr
