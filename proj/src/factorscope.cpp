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
#include "cxr/factorscope.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace cxr {

std::size_t CriticalFactorMask::selected() const {
  std::size_t n = 0;
  for (const auto& row : grid) n += std::size_t(std::count(row.begin(), row.end(), true));
  return n;
}

ImageBuffer suppress(const ImageBuffer& img, const std::vector<std::vector<bool>>& grid,
                     float fill) {
  const int cells = static_cast<int>(grid.size());
  ImageBuffer out = img;
  for (int r = 0; r < cells; ++r) {
    const auto [y0, y1] = cell_range(r, cells, static_cast<int>(img.rows()));
    for (int c = 0; c < cells; ++c) {
      if (!grid[std::size_t(r)][std::size_t(c)]) continue;
      const auto [x0, x1] = cell_range(c, cells, static_cast<int>(img.cols()));
      out.block(y0, x0, y1 - y0, x1 - x0).setConstant(fill);
    }
  }
  return out;
}

CriticalFactorMask identify_critical_factors(const Scorer& model, const ImageBuffer& img,
                                             int cells, double drop_threshold) {
  if (cells < 1 || cells > img.rows() || cells > img.cols())
    throw ArgumentError("cells per side must be in [1, min(height, width)], got " +
                        std::to_string(cells));
  if (!(drop_threshold >= 0.0 && drop_threshold < 1.0))
    throw ArgumentError("drop threshold must be in [0, 1)");
  auto prob = [&](const ImageBuffer& x) {
    const double p = model(x);
    if (!std::isfinite(p)) throw Error("model output is not finite");
    return p;
  };

  CriticalFactorMask m;
  m.cells = cells;
  const std::size_t n = std::size_t(cells);
  m.grid.assign(n, std::vector<bool>(n, false));
  m.impact.assign(n, std::vector<double>(n, 0.0));
  const float fill = img.mean();
  m.base_probability = prob(img);
  const bool positive = m.base_probability >= 0.5;
  auto score = [&](double p) { return positive ? p : 1.0 - p; };
  m.base_score = score(m.base_probability);
  m.final_score = m.base_score;

  std::vector<std::vector<bool>> one(n, std::vector<bool>(n, false));
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      one[r][c] = true;
      m.impact[r][c] = m.base_score - score(prob(suppress(img, one, fill)));
      one[r][c] = false;
      if (m.impact[r][c] > 0.0) order.emplace_back(m.impact[r][c], r * n + c);
    }
  }
  // Highest impact first, row-major order among ties.
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  const double target = drop_threshold * m.base_score;
  double drop = 0.0;
  for (const auto& [imp, idx] : order) {
    const std::size_t r = idx / n, c = idx % n;
    m.grid[r][c] = true;
    const double p = prob(suppress(img, m.grid, fill));
    const double s = score(p);
    const double d = m.base_score - s;
    if (d < drop) {
      m.grid[r][c] = false;
      continue;
    }
    drop = d;
    m.final_score = s;
    m.selection_threshold = imp;
    m.cumulative_drop.push_back(d);
    if ((p >= 0.5) != positive) m.decision_flipped = true;
    if (m.decision_flipped || s <= target) {
      m.target_reached = true;
      break;
    }
  }
  return m;
}

CriticalFactorMask identify_critical_factors(const Model& model, const ImageBuffer& img,
                                             int cells, double drop_threshold) {
  return identify_critical_factors(
      Scorer([&model](const ImageBuffer& x) { return double(model.predict(x)); }), img, cells,
      drop_threshold);
}

RgbImage overlay(const ImageBuffer& img, const CriticalFactorMask& mask, double alpha) {
  RgbImage out{img, img, img};
  const int cells = mask.cells;
  const float a = static_cast<float>(alpha);
  for (int r = 0; r < cells; ++r) {
    const auto [y0, y1] = cell_range(r, cells, static_cast<int>(img.rows()));
    for (int c = 0; c < cells; ++c) {
      if (!mask.grid[std::size_t(r)][std::size_t(c)]) continue;
      const auto [x0, x1] = cell_range(c, cells, static_cast<int>(img.cols()));
      auto rb = out.r.block(y0, x0, y1 - y0, x1 - x0);
      rb = (rb.array() * (1 - a) + a).matrix();
      out.g.block(y0, x0, y1 - y0, x1 - x0) *= (1 - a);
      out.b.block(y0, x0, y1 - y0, x1 - x0) *= (1 - a);
    }
  }
  return out;
}

void render_overlay(const ImageBuffer& img, const CriticalFactorMask& mask,
                    const std::filesystem::path& out) {
  if (mask.cells < 1 || static_cast<int>(mask.grid.size()) != mask.cells ||
      mask.cells > img.rows() || mask.cells > img.cols())
    throw ArgumentError("mask grid does not fit the image");
  write_png(out, overlay(img, mask));
}

std::string mask_to_text(const CriticalFactorMask& m) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "# cells=" << m.cells << " selected=" << m.selected()
      << " base_probability=" << m.base_probability << " base_score=" << m.base_score
      << " final_score=" << m.final_score << " decision_flipped=" << (m.decision_flipped ? 1 : 0)
      << " target_reached=" << (m.target_reached ? 1 : 0) << "\n";
  out << "row,col,impact,selected\n";
  for (int r = 0; r < m.cells; ++r)
    for (int c = 0; c < m.cells; ++c)
      out << r << "," << c << "," << m.impact[std::size_t(r)][std::size_t(c)] << ","
          << (m.grid[std::size_t(r)][std::size_t(c)] ? 1 : 0) << "\n";
  return out.str();
}

}  // namespace cxr
