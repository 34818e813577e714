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
#ifndef CXR_METRICS_HPP_
#define CXR_METRICS_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "cxr/complexity.hpp"

namespace cxr {

inline constexpr double kDefaultThreshold = 0.5;

/// Rows are ground truth: tn/fp are negatives, fn/tp are positives.
struct ConfusionMatrix {
  std::uint64_t tn = 0, fp = 0, fn = 0, tp = 0;

  std::uint64_t total() const { return tn + fp + fn + tp; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Exact num/den with den > 0.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

/// A metric whose denominator is zero is std::nullopt and renders as "n/a".
struct MetricsReport {
  std::optional<Ratio> sensitivity;
  std::optional<Ratio> ppv;
  std::optional<Ratio> accuracy;
  ConfusionMatrix matrix;
  double threshold = kDefaultThreshold;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Predicted positive iff probability >= threshold.
ConfusionMatrix confusion(std::span<const double> probabilities, std::span<const int> labels,
                          double threshold = kDefaultThreshold);
ConfusionMatrix confusion(std::span<const float> probabilities, std::span<const int> labels,
                          double threshold = kDefaultThreshold);

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm,
                                     double threshold = kDefaultThreshold);

/// One-decimal percentage, half-up, or "n/a".
std::string render_percent(const std::optional<Ratio>& r);
/// "sensitivity / ppv / accuracy", e.g. "95.5 / 97.0 / 96.3".
std::string headline(const MetricsReport& report);

std::string render_report(const MetricsReport& report, ReportFormat format);
MetricsReport report_from_json(const std::string& text);

}  // namespace cxr

#endif  // CXR_METRICS_HPP_
