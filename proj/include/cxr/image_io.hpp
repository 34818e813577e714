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
#ifndef CXR_IMAGE_IO_HPP_
#define CXR_IMAGE_IO_HPP_

#include <filesystem>
#include <vector>

#include "cxr/pixelpipe.hpp"

namespace cxr {

/// Three planes of [0, 1] intensities.
struct RgbImage {
  ImageBuffer r, g, b;
};

/// Reads an 8-bit PNG or JPEG (detected by magic bytes) as grayscale
/// intensities in [0, 255]. Colour inputs are converted by channel mean;
/// alpha is ignored. 16-bit PNGs are reduced to 8 bits.
ImageBuffer read_image(const std::filesystem::path& path);

/// Writes [0, 1] intensities as an 8-bit grayscale PNG.
void write_png(const std::filesystem::path& path, const ImageBuffer& img);
/// Writes [0, 1] planes as an 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const RgbImage& img);
/// Reads a PNG as RGB planes in [0, 1] (grayscale is replicated).
RgbImage read_png_rgb(const std::filesystem::path& path);

// Tensor container: "CXRT" magic, u32 version (1), u32 count, u32 height,
// u32 width, then count*height*width little-endian float32, row-major per
// image.
inline constexpr char kTensorMagic[4] = {'C', 'X', 'R', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

void write_tensors(const std::filesystem::path& path, const std::vector<ImageBuffer>& images);
std::vector<ImageBuffer> read_tensors(const std::filesystem::path& path);

}  // namespace cxr

#endif  // CXR_IMAGE_IO_HPP_
