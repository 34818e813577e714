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
#ifndef CXR_PIXELPIPE_HPP_
#define CXR_PIXELPIPE_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "cxr/common.hpp"

namespace cxr {

/// Single-channel image, row-major, height x width.
template <typename Scalar>
using ImageT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageBuffer = ImageT<float>;

inline constexpr int kInputSide = 480;
inline constexpr double kCropTopFraction = 0.08;

/// Removes the top floor(fraction * height) rows.
template <typename Scalar>
ImageT<Scalar> crop_top(const ImageT<Scalar>& img, double fraction = kCropTopFraction) {
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw ArgumentError("crop_top: fraction must lie in [0, 1)");
  const auto rows = static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(img.rows())));
  return img.bottomRows(img.rows() - rows);
}

/// Bilinear resampling with half-pixel centres, edge-clamped. No anti-aliasing.
template <typename Scalar>
ImageT<Scalar> resize(const ImageT<Scalar>& img, int out_rows, int out_cols) {
  if (out_rows < 1 || out_cols < 1) throw ArgumentError("resize: side must be >= 1");
  if (img.size() == 0) throw ArgumentError("resize: empty image");
  const double sy = static_cast<double>(img.rows()) / out_rows;
  const double sx = static_cast<double>(img.cols()) / out_cols;
  const auto last_r = static_cast<double>(img.rows() - 1);
  const auto last_c = static_cast<double>(img.cols() - 1);
  ImageT<Scalar> out(out_rows, out_cols);
  for (int y = 0; y < out_rows; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, last_r);
    const auto y0 = static_cast<Eigen::Index>(fy);
    const auto y1 = std::min<Eigen::Index>(y0 + 1, img.rows() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int x = 0; x < out_cols; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, last_c);
      const auto x0 = static_cast<Eigen::Index>(fx);
      const auto x1 = std::min<Eigen::Index>(x0 + 1, img.cols() - 1);
      const double wx = fx - static_cast<double>(x0);
      // a + w * (b - a) keeps constant regions exactly constant.
      const double top = img(y0, x0) + wx * (double(img(y0, x1)) - img(y0, x0));
      const double bot = img(y1, x0) + wx * (double(img(y1, x1)) - img(y1, x0));
      out(y, x) = static_cast<Scalar>(top + wy * (bot - top));
    }
  }
  return out;
}

template <typename Scalar>
ImageT<Scalar> resize(const ImageT<Scalar>& img, int side = kInputSide) {
  return resize(img, side, side);
}

/// Maps 8-bit range intensities to [0, 1] by division by 255. Throws on
/// values outside [0, 255] or non-finite values.
template <typename Scalar>
ImageT<Scalar> normalize(const ImageT<Scalar>& img) {
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const Scalar v = img.data()[i];
    if (!(v >= Scalar(0) && v <= Scalar(255)))
      throw ArgumentError("normalize: intensity outside [0, 255] (corrupt image?)");
  }
  return img / Scalar(255);
}

template <typename Scalar>
ImageT<Scalar> hflip(const ImageT<Scalar>& img) {
  return img.rowwise().reverse();
}

/// Additive shift in normalized units, clamped to [0, 1].
template <typename Scalar>
ImageT<Scalar> shift_intensity(const ImageT<Scalar>& img, double delta) {
  return (img.array() + Scalar(delta)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1)).matrix();
}

struct PreprocessConfig {
  double crop_fraction = kCropTopFraction;
  int side = kInputSide;
};

/// crop -> resize -> normalize on an 8-bit-range grayscale image.
template <typename Scalar>
ImageT<Scalar> preprocess(const ImageT<Scalar>& raw, const PreprocessConfig& cfg = {}) {
  return normalize(resize(crop_top(raw, cfg.crop_fraction), cfg.side, cfg.side));
}

// ------------------------------------------------------------------ augmentation

struct AugmentConfig {
  double translate_frac = 0.10;
  double rotate_deg = 10.0;
  bool hflip = true;
  double zoom_frac = 0.15;
  double intensity_frac = 0.10;
  std::uint64_t seed = 0;

  static AugmentConfig disabled() { return {0.0, 0.0, false, 0.0, 0.0, 0}; }
  void validate() const;
};

/// One concrete draw of augmentation parameters.
struct AugmentParams {
  double translate_x = 0.0;  // fraction of width
  double translate_y = 0.0;  // fraction of height
  double rotate_deg = 0.0;
  bool flip = false;
  double zoom = 0.0;         // scale = 1 + zoom
  double intensity = 0.0;

  bool geometric_identity() const {
    return translate_x == 0.0 && translate_y == 0.0 && rotate_deg == 0.0 && !flip && zoom == 0.0;
  }
};

inline void AugmentConfig::validate() const {
  auto frac = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0))
      throw ArgumentError(std::string("augment: ") + name + " must lie in [0, 1)");
  };
  frac(translate_frac, "translate_frac");
  frac(zoom_frac, "zoom_frac");
  frac(intensity_frac, "intensity_frac");
  if (!(rotate_deg >= 0.0 && rotate_deg < 180.0))
    throw ArgumentError("augment: rotate_deg must lie in [0, 180)");
}

/// Draws all six parameters in a fixed order, whether or not a range is zero,
/// so the stream position after a draw never depends on the config.
inline AugmentParams draw_augment_params(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentParams p;
  p.translate_x = rng.uniform(-cfg.translate_frac, cfg.translate_frac);
  p.translate_y = rng.uniform(-cfg.translate_frac, cfg.translate_frac);
  p.rotate_deg = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg);
  const bool coin = rng.bernoulli(0.5);
  p.flip = cfg.hflip && coin;
  p.zoom = rng.uniform(-cfg.zoom_frac, cfg.zoom_frac);
  p.intensity = rng.uniform(-cfg.intensity_frac, cfg.intensity_frac);
  return p;
}

namespace detail {

template <typename Scalar>
double sample_zero_padded(const ImageT<Scalar>& img, double y, double x) {
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  const auto y0 = static_cast<Eigen::Index>(fy);
  const auto x0 = static_cast<Eigen::Index>(fx);
  const double wy = y - fy;
  const double wx = x - fx;
  auto at = [&](Eigen::Index r, Eigen::Index c) -> double {
    if (r < 0 || c < 0 || r >= img.rows() || c >= img.cols()) return 0.0;
    return img(r, c);
  };
  const double top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
  const double bot = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
  return top * (1.0 - wy) + bot * wy;
}

}  // namespace detail

/// Applies translation, rotation, flip and zoom as one inverse-mapped bilinear
/// resampling about the image centre (uncovered pixels become 0), followed by
/// the clamped intensity shift. Output shape equals input shape.
template <typename Scalar>
ImageT<Scalar> apply_augment(const ImageT<Scalar>& img, const AugmentParams& p) {
  ImageT<Scalar> geo;
  if (p.geometric_identity()) {
    geo = img;
  } else {
    const double cy = (img.rows() - 1) / 2.0;
    const double cx = (img.cols() - 1) / 2.0;
    const double ty = p.translate_y * img.rows();
    const double tx = p.translate_x * img.cols();
    const double theta = p.rotate_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double scale = 1.0 + p.zoom;
    geo.resize(img.rows(), img.cols());
    // Forward map: out = centre + t + scale * R * F * (src - centre).
    for (Eigen::Index y = 0; y < img.rows(); ++y) {
      for (Eigen::Index x = 0; x < img.cols(); ++x) {
        const double dy = (static_cast<double>(y) - cy - ty) / scale;
        const double dx = (static_cast<double>(x) - cx - tx) / scale;
        // R^-1
        double sx = c * dx + s * dy;
        const double sy = -s * dx + c * dy;
        if (p.flip) sx = -sx;
        geo(y, x) = static_cast<Scalar>(detail::sample_zero_padded(img, cy + sy, cx + sx));
      }
    }
  }
  if (p.intensity == 0.0) return geo;
  return shift_intensity(geo, p.intensity);
}

template <typename Scalar>
ImageT<Scalar> augment(const ImageT<Scalar>& img, const AugmentConfig& cfg, Rng& draw) {
  return apply_augment(img, draw_augment_params(cfg, draw));
}

/// Augmentation for the draw_index-th image under cfg.seed.
template <typename Scalar>
ImageT<Scalar> augment(const ImageT<Scalar>& img, const AugmentConfig& cfg,
                       std::uint64_t draw_index) {
  Rng rng = Rng::derive(cfg.seed, draw_index);
  return augment(img, cfg, rng);
}

}  // namespace cxr

#endif  // CXR_PIXELPIPE_HPP_
