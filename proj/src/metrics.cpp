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
#include "cxr/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace cxr {

namespace {

template <typename T>
ConfusionMatrix confusion_impl(std::span<const T> p, std::span<const int> y, double threshold) {
  if (p.size() != y.size())
    throw ArgumentError("confusion: " + std::to_string(p.size()) + " predictions vs " +
                        std::to_string(y.size()) + " labels");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 0 && y[i] != 1)
      throw ArgumentError("confusion: label " + std::to_string(y[i]) + " at index " +
                          std::to_string(i) + " is not binary");
    if (!std::isfinite(static_cast<double>(p[i])))
      throw ArgumentError("confusion: non-finite prediction at index " + std::to_string(i));
    const bool pred = static_cast<double>(p[i]) >= threshold;
    if (y[i]) {
      ++(pred ? cm.tp : cm.fn);
    } else {
      ++(pred ? cm.fp : cm.tn);
    }
  }
  return cm;
}

std::optional<Ratio> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return Ratio{num, den};
}

nlohmann::ordered_json ratio_json(const std::optional<Ratio>& r) {
  if (!r) return nullptr;
  return {{"num", r->num}, {"den", r->den}, {"value", r->value()}};
}

std::optional<Ratio> ratio_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return Ratio{j.at("num").get<std::uint64_t>(), j.at("den").get<std::uint64_t>()};
}

}  // namespace

ConfusionMatrix confusion(std::span<const double> p, std::span<const int> y, double threshold) {
  return confusion_impl(p, y, threshold);
}

ConfusionMatrix confusion(std::span<const float> p, std::span<const int> y, double threshold) {
  return confusion_impl(p, y, threshold);
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm, double threshold) {
  MetricsReport r;
  r.matrix = cm;
  r.threshold = threshold;
  r.sensitivity = ratio(cm.tp, cm.tp + cm.fn);
  r.ppv = ratio(cm.tp, cm.tp + cm.fp);
  r.accuracy = ratio(cm.tp + cm.tn, cm.total());
  return r;
}

std::string render_percent(const std::optional<Ratio>& r) {
  return r ? percent_one_decimal(r->num, r->den) : "n/a";
}

std::string headline(const MetricsReport& r) {
  return render_percent(r.sensitivity) + " / " + render_percent(r.ppv) + " / " +
         render_percent(r.accuracy);
}

std::string render_report(const MetricsReport& r, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::ordered_json j;
    j["sensitivity"] = ratio_json(r.sensitivity);
    j["ppv"] = ratio_json(r.ppv);
    j["accuracy"] = ratio_json(r.accuracy);
    j["matrix"] = {{"tn", r.matrix.tn}, {"fp", r.matrix.fp}, {"fn", r.matrix.fn},
                   {"tp", r.matrix.tp}};
    j["threshold"] = r.threshold;
    return j.dump(2) + "\n";
  }
  std::ostringstream out;
  out << "Sensitivity (%) / PPV (%) / Accuracy (%)\n" << headline(r) << "\n\n";
  out << "Confusion matrix (rows: ground truth, columns: prediction)\n";
  out << "                 negative  positive\n";
  out << "negative  " << std::setw(15) << r.matrix.tn << std::setw(10) << r.matrix.fp << "\n";
  out << "positive  " << std::setw(15) << r.matrix.fn << std::setw(10) << r.matrix.tp << "\n";
  std::ostringstream thr;
  thr.precision(17);
  thr << r.threshold;
  out << "threshold " << thr.str() << "\n";
  return out.str();
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.sensitivity = ratio_from(j.at("sensitivity"));
    r.ppv = ratio_from(j.at("ppv"));
    r.accuracy = ratio_from(j.at("accuracy"));
    const auto& m = j.at("matrix");
    r.matrix = {m.at("tn").get<std::uint64_t>(), m.at("fp").get<std::uint64_t>(),
                m.at("fn").get<std::uint64_t>(), m.at("tp").get<std::uint64_t>()};
    r.threshold = j.at("threshold").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("metrics json: ") + e.what());
  }
}

}  // namespace cxr
