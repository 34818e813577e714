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
#ifndef CXR_FACTORSCOPE_HPP_
#define CXR_FACTORSCOPE_HPP_

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cxr/image_io.hpp"
#include "cxr/network.hpp"

namespace cxr {

// Critical factors by greedy occlusion search over a square grid of cells.
// A cell is suppressed by filling it with the image mean. The score of an
// image is the probability of the class the model predicts for it, so a drop
// always moves towards the opposite decision.

inline constexpr int kDefaultCells = 12;
inline constexpr double kDefaultDropThreshold = 0.5;

struct CriticalFactorMask {
  int cells = 0;
  std::vector<std::vector<bool>> grid;     // [row][col]
  std::vector<std::vector<double>> impact;  // score drop with that cell alone suppressed
  bool decision_flipped = false;
  bool target_reached = false;  // flipped or score <= drop_threshold * base
  double base_probability = 0.0;  // model output for the untouched image
  double base_score = 0.0;
  double final_score = 0.0;     // with the whole mask suppressed
  double selection_threshold = 0.0;  // smallest impact among selected cells
  std::vector<double> cumulative_drop;  // after each accepted cell

  std::size_t selected() const;
};

/// Half-open [begin, end) pixel range of cell `i` along a side of length `n`.
inline std::pair<int, int> cell_range(int i, int cells, int n) {
  return {static_cast<int>(std::int64_t(i) * n / cells),
          static_cast<int>(std::int64_t(i + 1) * n / cells)};
}

/// Copy of `img` with every cell set in `grid` filled with `fill`.
ImageBuffer suppress(const ImageBuffer& img, const std::vector<std::vector<bool>>& grid,
                     float fill);

using Scorer = std::function<double(const ImageBuffer&)>;

/// `model` maps an image to a positive-class probability.
CriticalFactorMask identify_critical_factors(const Scorer& model, const ImageBuffer& img,
                                             int cells_per_side = kDefaultCells,
                                             double drop_threshold = kDefaultDropThreshold);
CriticalFactorMask identify_critical_factors(const Model& model, const ImageBuffer& img,
                                             int cells_per_side = kDefaultCells,
                                             double drop_threshold = kDefaultDropThreshold);

inline constexpr double kOverlayAlpha = 0.5;

/// Grayscale image as RGB with selected cells blended towards red.
RgbImage overlay(const ImageBuffer& img, const CriticalFactorMask& mask,
                 double alpha = kOverlayAlpha);
void render_overlay(const ImageBuffer& img, const CriticalFactorMask& mask,
                    const std::filesystem::path& out);

/// Header plus one "row,col,impact,selected" line per cell.
std::string mask_to_text(const CriticalFactorMask& mask);

}  // namespace cxr

#endif  // CXR_FACTORSCOPE_HPP_
