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
#ifndef CXR_CLI_HPP_
#define CXR_CLI_HPP_

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cxr/complexity.hpp"
#include "cxr/dataman.hpp"
#include "cxr/metrics.hpp"
#include "cxr/trainer.hpp"

namespace cxr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command. `args` excludes the program name. Failures print a
/// single `error: code=<code> message=<text>` line on `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Run directory layout written by `train` and `evaluate`.
namespace run_files {
inline constexpr const char* kManifest = "manifest.csv";
inline constexpr const char* kSpec = "spec.json";
inline constexpr const char* kHistory = "history.jsonl";
inline constexpr const char* kHistoryChecksum = "history.checksum";
inline constexpr const char* kModel = "model.ckpt";
inline constexpr const char* kMetrics = "metrics.json";
inline constexpr const char* kPredictions = "predictions.csv";
inline constexpr const char* kLog = "log.txt";
}  // namespace run_files

/// Consolidated view of a run directory. Every section is recomputed from
/// the raw artifacts; missing or unreadable ones are listed in `gaps`.
struct RunReport {
  std::optional<DistributionReport> dataset;
  std::optional<TrainHistory> history;
  std::optional<MetricsReport> metrics;
  std::optional<ConstraintVerdict> verdict;
  std::optional<ComplexityReport> complexity;
  std::vector<std::string> gaps;
  std::vector<std::string> warnings;
};

RunReport build_report(const std::filesystem::path& run_dir);
std::string render_run_report(const RunReport& report, ReportFormat format);

/// Hex FNV-1a of the history log, as stored next to it.
std::string history_checksum(const std::string& history_text);

}  // namespace cxr

#endif  // CXR_CLI_HPP_
