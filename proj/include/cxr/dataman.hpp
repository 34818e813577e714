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
#ifndef CXR_DATAMAN_HPP_
#define CXR_DATAMAN_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cxr/common.hpp"

namespace cxr {

enum class Label { negative, positive };
enum class Finding { none, pneumonia_non_sars2, sars2 };
enum class View { pa, ap, unknown };
enum class Sex { male, female, unknown };
enum class Split { train, val, test };

std::string_view to_string(Label v);
std::string_view to_string(Finding v);
std::string_view to_string(View v);  // unknown -> ""
std::string_view to_string(Sex v);   // unknown -> ""
std::string_view to_string(Split v);

Label parse_label(std::string_view s);
Finding parse_finding(std::string_view s);
View parse_view(std::string_view s);
Sex parse_sex(std::string_view s);
Split parse_split(std::string_view s);

/// Source cohort identifier: lowercase [a-z0-9_-]+.
std::string validate_source_id(std::string_view id);

struct ImageRecord {
  std::string image_id;
  std::string patient_id;
  std::string source;
  Finding finding = Finding::none;
  View view = View::unknown;
  std::optional<int> age;
  Sex sex = Sex::unknown;
  std::optional<std::string> country;
  std::string file_path;

  // The label is a function of the finding, so the two can never disagree.
  Label label() const {
    return finding == Finding::sars2 ? Label::positive : Label::negative;
  }

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::map<std::string, Split> split_assignment;
  std::map<std::string, std::size_t> provenance;

  std::size_t size() const { return records.size(); }
  std::optional<Split> split_of(const std::string& image_id) const;
  std::vector<const ImageRecord*> records_in(Split split) const;
};

/// Recomputes provenance counts from the records' source fields.
std::map<std::string, std::size_t> count_provenance(std::span<const ImageRecord> records);

// ---------------------------------------------------------------- ingestion

/// Maps canonical field names onto a source file's own column headers.
/// Canonical fields: image_id, patient_id, finding, label, view, age, sex,
/// country, file_path. image_id, patient_id and finding are required.
struct ColumnSchema {
  char delimiter = ',';
  std::map<std::string, std::string> columns;
  /// Lowercased source vocabulary -> finding. Defaults cover the usual cohort
  /// spellings ("covid-19", "normal", "pneumonia", ...).
  std::map<std::string, Finding> finding_vocabulary;

  static ColumnSchema canonical();
  /// key=value lines: `delimiter=;`, `column.<canonical>=<header>`,
  /// `finding.<source value>=<none|pneumonia_non_sars2|sars2>`.
  static ColumnSchema from_file(const std::filesystem::path& path);
  std::string column_for(const std::string& canonical) const;
};

struct Rejection {
  std::size_t line = 0;  // 1-based line in the source file
  std::string image_id;
  std::string reason;
};

struct IngestResult {
  std::vector<ImageRecord> records;
  std::vector<Rejection> rejections;
};

/// Every data row yields either one record or one rejection entry.
/// Throws SchemaError when a required column is missing.
IngestResult ingest_source(const std::filesystem::path& manifest_file,
                           std::string_view source_id, const ColumnSchema& schema);
IngestResult ingest_source_text(std::string_view text, std::string_view source_id,
                                const ColumnSchema& schema);

struct UnifyResult {
  DatasetManifest manifest;
  std::vector<std::string> conflicts;
};

/// Merges per-source record lists. Cross-source duplicate image ids keep the
/// first occurrence and log a conflict; duplicates with different labels throw
/// DataIntegrityError.
UnifyResult unify(std::span<const std::vector<ImageRecord>> sources);

// ---------------------------------------------------------------- splitting

/// Per-class test image targets. When negative_no_pneumonia_images is set the
/// negative target is further divided into no-pneumonia and non-SARS-CoV-2
/// pneumonia images (the remainder).
struct TestTargets {
  std::size_t positive_images = 200;
  std::size_t negative_images = 200;
  std::optional<std::size_t> negative_no_pneumonia_images = 100;
};

inline constexpr double kDefaultValFraction = 0.10;

/// Patient-level train/val/test assignment. Test images meet the targets
/// exactly; all images of a patient share one split. Patients whose images
/// carry more than one finding are never drawn into test. Deterministic in
/// (manifest, targets, val_fraction, seed). Throws UnsatisfiableError naming
/// the deficient class.
DatasetManifest split_patient_level(DatasetManifest manifest, const TestTargets& targets,
                                    double val_fraction, std::uint64_t seed);

// ---------------------------------------------------------------- reporting

struct CountBin {
  std::string name;
  std::size_t count = 0;
};

struct DemographicSummary {
  std::size_t patient_total = 0;
  std::size_t image_total = 0;
  std::optional<double> age_mean;
  std::optional<double> age_std;  // population standard deviation
  std::vector<CountBin> age_bins;  // <20, 20-29, ..., 80-89, 90+, Unknown
  std::vector<CountBin> sex_counts;   // Male, Female, Unknown (patients)
  std::vector<CountBin> view_counts;  // PA, AP, Unknown (images)
  std::vector<std::string> conflicts;
};

std::vector<std::string> age_bin_names();
/// Decade bin for an age, e.g. 34 -> "30-39", 17 -> "<20", 93 -> "90+".
std::string age_bin(std::optional<int> age);

/// Patient-level age/sex statistics (first record of each patient wins) and
/// image-level view statistics.
DemographicSummary demographic_summary(const DatasetManifest& manifest);
/// Renders the demographics table with "count (pct%)" cells.
std::string render_demographics(const DemographicSummary& summary);

struct DistributionRow {
  std::string split;  // train, val, test, unassigned, all
  std::string group;  // positive, negative, no_pneumonia, pneumonia
  std::size_t images = 0;
  std::size_t patients = 0;
};

struct DistributionReport {
  std::vector<DistributionRow> rows;
  const DistributionRow* find(std::string_view split, std::string_view group) const;
  std::string to_csv() const;
};

DistributionReport distribution_report(const DatasetManifest& manifest);

// ---------------------------------------------------------------- persistence

inline constexpr std::string_view kManifestHeader =
    "image_id,patient_id,source,label,finding,view,age,sex,country,file_path";

/// Writes the manifest CSV; a non-empty split assignment goes to
/// `<path>.splits.csv` (image_id,split).
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
std::string manifest_to_csv(const DatasetManifest& manifest);
/// Reads a manifest and, when present, its split sidecar.
DatasetManifest read_manifest(const std::filesystem::path& path);
DatasetManifest manifest_from_csv(std::string_view text);
std::filesystem::path splits_sidecar_path(const std::filesystem::path& manifest_path);

/// key=value summary sidecar (counts, provenance, split sizes, demographics).
std::string summary_key_values(const DatasetManifest& manifest);

namespace csv {
std::vector<std::string> split_row(std::string_view line, char delimiter = ',');
std::string quote(std::string_view field, char delimiter = ',');
/// Splits text into lines, dropping a trailing '\r' on each.
std::vector<std::string> lines(std::string_view text);
}  // namespace csv

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace cxr

#endif  // CXR_DATAMAN_HPP_
