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
#ifndef CXR_COMPLEXITY_HPP_
#define CXR_COMPLEXITY_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "cxr/arch_spec.hpp"

namespace cxr {

// One MAC is one multiply plus one accumulate. Biases, activations and pooling
// cost no MACs; channel adapters on long-range edges and the head are counted.

struct LayerCost {
  int layer_index = 0;  // adapters carry the index of the edge's `to` layer;
                        // the head uses layers.size()
  std::string label;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  Shape3 output_shape;
};

struct ComplexityReport {
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::vector<LayerCost> per_layer;
};

/// Parameters and MACs for `spec` at its own input shape.
ComplexityReport analyze(const ArchSpec& spec);
/// Parameter counts only; MACs are left at 0.
ComplexityReport count_params(const ArchSpec& spec);
/// Costs with the spec evaluated at `input_shape`.
ComplexityReport count_macs(const ArchSpec& spec, const Shape3& input_shape);

/// Parses "480x480" or "1x480x480".
Shape3 parse_input_shape(const std::string& text);

enum class ReportFormat { table, json };
ReportFormat parse_report_format(const std::string& s);
std::string render_complexity(const ComplexityReport& report, ReportFormat format);

}  // namespace cxr

#endif  // CXR_COMPLEXITY_HPP_
