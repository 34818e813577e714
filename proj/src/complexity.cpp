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
#include "cxr/complexity.hpp"

#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace cxr {

namespace {

std::int64_t hw(const Shape3& s) { return std::int64_t(s.height) * s.width; }

LayerCost layer_cost(const LayerSpec& l, int index, const Shape3& in, const Shape3& out) {
  LayerCost c;
  c.layer_index = index;
  c.label = std::string(to_string(l.kind));
  c.output_shape = out;
  const std::int64_t k2 = std::int64_t(l.kernel) * l.kernel;
  switch (l.kind) {
    case LayerKind::conv_standard:
    case LayerKind::conv_pointwise:
      c.params = k2 * l.in_channels * l.out_channels + l.out_channels;
      c.macs = k2 * l.in_channels * l.out_channels * hw(out);
      break;
    case LayerKind::conv_depthwise:
      c.params = k2 * l.in_channels * l.multiplier + std::int64_t(l.in_channels) * l.multiplier;
      c.macs = k2 * l.in_channels * l.multiplier * hw(out);
      break;
    case LayerKind::prpe_block: {
      const PRPEBlockSpec& b = l.prpe;
      const std::int64_t m = b.internal_channels();
      const std::int64_t r = b.replicas;
      const std::int64_t kk = std::int64_t(b.kernel) * b.kernel;
      const std::int64_t merged = b.merged_channels();
      c.params = (b.in_channels * m + m) + r * (kk * m + m) + (merged * m + m) +
                 (m * b.expand_channels + b.expand_channels);
      c.macs = (b.in_channels * m + r * kk * m + merged * m + m * b.expand_channels) * hw(out);
      break;
    }
    case LayerKind::dense:
      c.params = in.elements() * l.out_channels + l.out_channels;
      c.macs = in.elements() * l.out_channels;
      break;
    case LayerKind::pool:
    case LayerKind::global_pool:
    case LayerKind::activation:
      break;
  }
  return c;
}

}  // namespace

ComplexityReport count_macs(const ArchSpec& spec, const Shape3& input_shape) {
  ArchSpec s = spec;
  s.input = input_shape;
  const ShapePlan plan = plan_shapes(s);
  ComplexityReport report;
  const auto& layers = plan.spec.layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    report.per_layer.push_back(
        layer_cost(layers[i], static_cast<int>(i), plan.input_of(i), plan.outputs[i]));
    for (std::size_t e = 0; e < plan.spec.long_range_edges.size(); ++e) {
      const SkipEdge& edge = plan.spec.long_range_edges[e];
      if (std::size_t(edge.to) != i || !plan.needs_adapter[e]) continue;
      const Shape3& from = plan.outputs[std::size_t(edge.from)];
      const Shape3& to = plan.outputs[i];
      LayerCost a;
      a.layer_index = edge.to;
      a.label = "adapter " + std::to_string(edge.from) + "->" + std::to_string(edge.to);
      a.params = std::int64_t(from.channels) * to.channels + to.channels;
      a.macs = std::int64_t(from.channels) * to.channels * hw(to);
      a.output_shape = to;
      report.per_layer.push_back(a);
    }
  }
  if (plan.spec.head) {
    LayerCost h;
    h.layer_index = static_cast<int>(layers.size());
    h.label = "head";
    h.params = plan.final_shape.elements() + 1;
    h.macs = plan.final_shape.elements();
    h.output_shape = {1, 1, 1};
    report.per_layer.push_back(h);
  }
  for (const auto& c : report.per_layer) {
    report.total_params += c.params;
    report.total_macs += c.macs;
  }
  return report;
}

ComplexityReport analyze(const ArchSpec& spec) { return count_macs(spec, spec.input); }

ComplexityReport count_params(const ArchSpec& spec) {
  ComplexityReport r = analyze(spec);
  r.total_macs = 0;
  for (auto& c : r.per_layer) c.macs = 0;
  return r;
}

Shape3 parse_input_shape(const std::string& text) {
  std::vector<int> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw ArgumentError("bad input shape '" + text + "' (expected HxW or CxHxW)");
    }
  }
  if (dims.size() == 2) return {1, dims[0], dims[1]};
  if (dims.size() == 3) return {dims[0], dims[1], dims[2]};
  throw ArgumentError("bad input shape '" + text + "' (expected HxW or CxHxW)");
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "table") return ReportFormat::table;
  if (s == "json") return ReportFormat::json;
  throw ArgumentError("unknown format '" + s + "' (table|json)");
}

std::string render_complexity(const ComplexityReport& report, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::ordered_json j;
    j["total_params"] = report.total_params;
    j["total_macs"] = report.total_macs;
    j["per_layer"] = nlohmann::ordered_json::array();
    for (const auto& c : report.per_layer) {
      j["per_layer"].push_back({{"layer_index", c.layer_index},
                                {"label", c.label},
                                {"params", c.params},
                                {"macs", c.macs},
                                {"output_shape", to_string(c.output_shape)}});
    }
    return j.dump(2) + "\n";
  }
  std::ostringstream out;
  out << std::left << std::setw(7) << "layer" << std::setw(22) << "kind" << std::right
      << std::setw(12) << "params" << std::setw(16) << "macs" << "  output\n";
  for (const auto& c : report.per_layer) {
    out << std::left << std::setw(7) << c.layer_index << std::setw(22) << c.label << std::right
        << std::setw(12) << c.params << std::setw(16) << c.macs << "  "
        << to_string(c.output_shape) << "\n";
  }
  out << std::left << std::setw(29) << "total" << std::right << std::setw(12)
      << report.total_params << std::setw(16) << report.total_macs << "\n";
  std::ostringstream summary;
  summary << std::fixed << std::setprecision(4) << "parameters (M): "
          << double(report.total_params) / 1e6 << "  MACs (G): " << double(report.total_macs) / 1e9
          << "\n";
  return out.str() + summary.str();
}

}  // namespace cxr
