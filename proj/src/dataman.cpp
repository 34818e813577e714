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
#include "cxr/dataman.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace cxr {

// ------------------------------------------------------------------ enums

std::string_view to_string(Label v) {
  return v == Label::positive ? "positive" : "negative";
}

std::string_view to_string(Finding v) {
  switch (v) {
    case Finding::none: return "none";
    case Finding::pneumonia_non_sars2: return "pneumonia_non_sars2";
    case Finding::sars2: return "sars2";
  }
  return "none";
}

std::string_view to_string(View v) {
  switch (v) {
    case View::pa: return "PA";
    case View::ap: return "AP";
    case View::unknown: return "";
  }
  return "";
}

std::string_view to_string(Sex v) {
  switch (v) {
    case Sex::male: return "male";
    case Sex::female: return "female";
    case Sex::unknown: return "";
  }
  return "";
}

std::string_view to_string(Split v) {
  switch (v) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Label parse_label(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v == "positive" || v == "pos" || v == "1") return Label::positive;
  if (v == "negative" || v == "neg" || v == "0") return Label::negative;
  throw ArgumentError("unparseable label '" + std::string(s) + "'");
}

Finding parse_finding(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v == "none") return Finding::none;
  if (v == "pneumonia_non_sars2") return Finding::pneumonia_non_sars2;
  if (v == "sars2") return Finding::sars2;
  throw ArgumentError("unparseable finding '" + std::string(s) + "'");
}

View parse_view(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v.rfind("pa", 0) == 0) return View::pa;
  if (v.rfind("ap", 0) == 0) return View::ap;
  return View::unknown;
}

Sex parse_sex(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v == "m" || v == "male") return Sex::male;
  if (v == "f" || v == "female") return Sex::female;
  return Sex::unknown;
}

Split parse_split(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v == "train") return Split::train;
  if (v == "val" || v == "validation") return Split::val;
  if (v == "test") return Split::test;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

std::string validate_source_id(std::string_view id) {
  if (id.empty()) throw ArgumentError("empty source id");
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (!ok) throw ArgumentError("invalid source id '" + std::string(id) + "'");
  }
  return std::string(id);
}

std::optional<Split> DatasetManifest::split_of(const std::string& image_id) const {
  auto it = split_assignment.find(image_id);
  if (it == split_assignment.end()) return std::nullopt;
  return it->second;
}

std::vector<const ImageRecord*> DatasetManifest::records_in(Split split) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records) {
    auto s = split_of(r.image_id);
    if (s && *s == split) out.push_back(&r);
  }
  return out;
}

std::map<std::string, std::size_t> count_provenance(std::span<const ImageRecord> records) {
  std::map<std::string, std::size_t> out;
  for (const auto& r : records) ++out[r.source];
  return out;
}

// ------------------------------------------------------------------ csv

namespace csv {

std::vector<std::string> split_row(std::string_view line, char delimiter) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delimiter) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string quote(std::string_view field, char delimiter) {
  if (field.find_first_of(std::string{delimiter, '"', '\n', '\r'}) == std::string_view::npos)
    return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::vector<std::string> lines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.emplace_back(line);
    start = end + 1;
  }
  return out;
}

}  // namespace csv

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ------------------------------------------------------------------ ingestion

namespace {

const std::vector<std::string>& canonical_fields() {
  static const std::vector<std::string> kFields = {
      "image_id", "patient_id", "finding", "label", "view",
      "age",      "sex",        "country", "file_path"};
  return kFields;
}

bool parse_int(std::string_view s, int& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace

ColumnSchema ColumnSchema::canonical() {
  ColumnSchema schema;
  for (const auto& f : canonical_fields()) schema.columns[f] = f;
  const std::pair<const char*, Finding> vocab[] = {
      {"covid-19", Finding::sars2},
      {"covid19", Finding::sars2},
      {"covid", Finding::sars2},
      {"sars-cov-2", Finding::sars2},
      {"sars2", Finding::sars2},
      {"positive", Finding::sars2},
      {"normal", Finding::none},
      {"none", Finding::none},
      {"no finding", Finding::none},
      {"no_pneumonia", Finding::none},
      {"negative", Finding::none},
      {"pneumonia", Finding::pneumonia_non_sars2},
      {"pneumonia_non_sars2", Finding::pneumonia_non_sars2},
      {"non-covid pneumonia", Finding::pneumonia_non_sars2},
      {"viral pneumonia", Finding::pneumonia_non_sars2},
      {"bacterial pneumonia", Finding::pneumonia_non_sars2},
      {"lung opacity", Finding::pneumonia_non_sars2},
  };
  for (const auto& [k, v] : vocab) schema.finding_vocabulary[k] = v;
  return schema;
}

ColumnSchema ColumnSchema::from_file(const std::filesystem::path& path) {
  ColumnSchema schema = canonical();
  const std::string text = read_text_file(path);
  std::size_t n = 0;
  for (const auto& raw : csv::lines(text)) {
    ++n;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw SchemaError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = line.substr(eq + 1);
    if (key == "delimiter") {
      if (value == "\\t" || value == "tab") {
        schema.delimiter = '\t';
      } else if (value.size() == 1) {
        schema.delimiter = value[0];
      } else {
        throw SchemaError("delimiter must be a single character");
      }
    } else if (key.rfind("column.", 0) == 0) {
      const std::string field = key.substr(7);
      if (std::find(canonical_fields().begin(), canonical_fields().end(), field) ==
          canonical_fields().end())
        throw SchemaError("unknown canonical field '" + field + "'");
      schema.columns[field] = trim(value);
    } else if (key.rfind("finding.", 0) == 0) {
      try {
        schema.finding_vocabulary[to_lower(key.substr(8))] = parse_finding(value);
      } catch (const ArgumentError& e) {
        throw SchemaError(e.what());
      }
    } else {
      throw SchemaError("unknown schema key '" + key + "'");
    }
  }
  return schema;
}

std::string ColumnSchema::column_for(const std::string& canonical) const {
  auto it = columns.find(canonical);
  return it == columns.end() ? std::string() : it->second;
}

IngestResult ingest_source_text(std::string_view text, std::string_view source_id,
                                const ColumnSchema& schema) {
  const std::string source = validate_source_id(source_id);
  const auto rows = csv::lines(text);
  if (rows.empty()) throw SchemaError("source '" + source + "': empty manifest");

  const auto header = csv::split_row(rows[0], schema.delimiter);
  std::map<std::string, std::size_t> col_index;
  for (const auto& field : canonical_fields()) {
    const std::string name = schema.column_for(field);
    if (name.empty()) continue;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) {
        col_index[field] = i;
        break;
      }
    }
  }
  for (const char* required : {"image_id", "patient_id", "finding"}) {
    if (!col_index.count(required))
      throw SchemaError("source '" + source + "': missing required column '" +
                        schema.column_for(required) + "' (" + required + ")");
  }

  IngestResult result;
  std::unordered_set<std::string> seen;
  for (std::size_t line_no = 1; line_no < rows.size(); ++line_no) {
    if (trim(rows[line_no]).empty()) continue;
    const auto fields = csv::split_row(rows[line_no], schema.delimiter);
    auto get = [&](const char* field) -> std::string {
      auto it = col_index.find(field);
      if (it == col_index.end() || it->second >= fields.size()) return {};
      return trim(fields[it->second]);
    };
    auto reject = [&](std::string id, std::string reason) {
      result.rejections.push_back({line_no + 1, std::move(id), std::move(reason)});
    };

    if (fields.size() != header.size()) {
      reject(get("image_id"), "field count mismatch");
      continue;
    }
    ImageRecord rec;
    rec.image_id = get("image_id");
    rec.patient_id = get("patient_id");
    rec.source = source;
    if (rec.image_id.empty()) {
      reject("", "missing image_id");
      continue;
    }
    if (rec.patient_id.empty()) {
      reject(rec.image_id, "missing patient_id");
      continue;
    }
    const std::string finding = get("finding");
    auto vocab = schema.finding_vocabulary.find(to_lower(finding));
    if (vocab == schema.finding_vocabulary.end()) {
      reject(rec.image_id, "unparseable finding '" + finding + "'");
      continue;
    }
    rec.finding = vocab->second;
    const std::string label = get("label");
    if (!label.empty()) {
      Label parsed;
      try {
        parsed = parse_label(label);
      } catch (const ArgumentError&) {
        reject(rec.image_id, "unparseable label '" + label + "'");
        continue;
      }
      if (parsed != rec.label()) {
        reject(rec.image_id, "label contradicts finding");
        continue;
      }
    }
    const std::string age = get("age");
    if (!age.empty()) {
      int years = 0;
      if (!parse_int(age, years) || years < 0) {
        reject(rec.image_id, "invalid age '" + age + "'");
        continue;
      }
      rec.age = years;
    }
    rec.view = parse_view(get("view"));
    rec.sex = parse_sex(get("sex"));
    if (auto country = get("country"); !country.empty()) rec.country = country;
    rec.file_path = get("file_path");
    if (rec.file_path.empty()) rec.file_path = rec.image_id;
    if (!seen.insert(rec.image_id).second) {
      reject(rec.image_id, "duplicate image_id");
      continue;
    }
    result.records.push_back(std::move(rec));
  }
  return result;
}

IngestResult ingest_source(const std::filesystem::path& manifest_file,
                           std::string_view source_id, const ColumnSchema& schema) {
  if (!std::filesystem::exists(manifest_file))
    throw IoError("manifest '" + manifest_file.string() + "' does not exist");
  return ingest_source_text(read_text_file(manifest_file), source_id, schema);
}

UnifyResult unify(std::span<const std::vector<ImageRecord>> sources) {
  UnifyResult out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& list : sources) {
    for (const auto& rec : list) {
      auto it = index.find(rec.image_id);
      if (it == index.end()) {
        index.emplace(rec.image_id, out.manifest.records.size());
        out.manifest.records.push_back(rec);
        continue;
      }
      const ImageRecord& kept = out.manifest.records[it->second];
      if (kept.label() != rec.label()) {
        throw DataIntegrityError("image '" + rec.image_id + "' labelled " +
                                 std::string(to_string(kept.label())) + " in source '" +
                                 kept.source + "' but " + std::string(to_string(rec.label())) +
                                 " in source '" + rec.source + "'");
      }
      out.conflicts.push_back("duplicate image '" + rec.image_id + "' from source '" +
                              rec.source + "' ignored; kept source '" + kept.source + "'");
    }
  }
  out.manifest.provenance = count_provenance(out.manifest.records);
  return out;
}

// ------------------------------------------------------------------ splitting

namespace {

enum class PatientGroup { positive, no_pneumonia, pneumonia, mixed };

struct PatientEntry {
  std::string id;
  std::vector<std::size_t> records;
  PatientGroup group = PatientGroup::mixed;
};

// Chooses patients (in the given order preference) whose image counts sum to
// exactly `target`. Returns nullopt when no subset reaches the target.
std::optional<std::vector<std::size_t>> exact_subset(const std::vector<std::size_t>& counts,
                                                     std::size_t target) {
  const std::size_t n = counts.size();
  // reach[i][t]: some subset of items i..n-1 sums to t.
  std::vector<std::vector<char>> reach(n + 1, std::vector<char>(target + 1, 0));
  reach[n][0] = 1;
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t t = 0; t <= target; ++t) {
      reach[i][t] = reach[i + 1][t] || (counts[i] <= t && reach[i + 1][t - counts[i]]);
    }
  }
  if (!reach[0][target]) return std::nullopt;
  std::vector<std::size_t> chosen;
  std::size_t t = target;
  for (std::size_t i = 0; i < n && t > 0; ++i) {
    if (counts[i] <= t && reach[i + 1][t - counts[i]]) {
      chosen.push_back(i);
      t -= counts[i];
    }
  }
  return chosen;
}

}  // namespace

DatasetManifest split_patient_level(DatasetManifest manifest, const TestTargets& targets,
                                    double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw ArgumentError("val_fraction must lie in [0, 1)");
  if (targets.negative_no_pneumonia_images &&
      *targets.negative_no_pneumonia_images > targets.negative_images)
    throw ArgumentError("no-pneumonia test target exceeds the negative target");

  std::map<std::string, PatientEntry> patients;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    auto& p = patients[manifest.records[i].patient_id];
    p.id = manifest.records[i].patient_id;
    p.records.push_back(i);
  }
  for (auto& [id, p] : patients) {
    std::set<Finding> findings;
    for (auto i : p.records) findings.insert(manifest.records[i].finding);
    if (findings.size() != 1) {
      p.group = PatientGroup::mixed;
    } else if (*findings.begin() == Finding::sars2) {
      p.group = PatientGroup::positive;
    } else if (*findings.begin() == Finding::none) {
      p.group = PatientGroup::no_pneumonia;
    } else {
      p.group = PatientGroup::pneumonia;
    }
  }

  auto pool_of = [&](std::initializer_list<PatientGroup> groups) {
    std::vector<PatientEntry*> pool;
    for (auto& [id, p] : patients)
      if (std::find(groups.begin(), groups.end(), p.group) != groups.end()) pool.push_back(&p);
    return pool;
  };

  struct Draw {
    std::string name;
    std::vector<PatientEntry*> pool;
    std::size_t target;
  };
  std::vector<Draw> draws;
  draws.push_back({"positive", pool_of({PatientGroup::positive}), targets.positive_images});
  if (targets.negative_no_pneumonia_images) {
    const std::size_t none = *targets.negative_no_pneumonia_images;
    draws.push_back({"negative/no_pneumonia", pool_of({PatientGroup::no_pneumonia}), none});
    draws.push_back({"negative/pneumonia", pool_of({PatientGroup::pneumonia}),
                     targets.negative_images - none});
  } else {
    draws.push_back({"negative",
                     pool_of({PatientGroup::no_pneumonia, PatientGroup::pneumonia}),
                     targets.negative_images});
  }

  std::set<std::string> test_patients;
  std::uint64_t stream = 0;
  for (auto& d : draws) {
    Rng rng = Rng::derive(seed, 0x7e57, stream++);
    rng.shuffle(d.pool);
    std::vector<std::size_t> counts;
    std::size_t available = 0;
    for (auto* p : d.pool) {
      counts.push_back(p->records.size());
      available += p->records.size();
    }
    auto chosen = exact_subset(counts, d.target);
    if (!chosen) {
      throw UnsatisfiableError("cannot select exactly " + std::to_string(d.target) +
                               " test images for class '" + d.name + "' (available: " +
                               std::to_string(available) + " images from " +
                               std::to_string(d.pool.size()) + " patients)");
    }
    for (auto i : *chosen) test_patients.insert(d.pool[i]->id);
  }

  // Validation patients are drawn per group so both classes are represented.
  std::set<std::string> val_patients;
  for (auto group : {PatientGroup::positive, PatientGroup::no_pneumonia,
                     PatientGroup::pneumonia, PatientGroup::mixed}) {
    std::vector<std::string> remaining;
    for (auto& [id, p] : patients)
      if (p.group == group && !test_patients.count(id)) remaining.push_back(id);
    Rng rng = Rng::derive(seed, 0x7a1, static_cast<std::uint64_t>(group));
    rng.shuffle(remaining);
    const auto take = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(remaining.size())));
    for (std::size_t i = 0; i < take && i < remaining.size(); ++i)
      val_patients.insert(remaining[i]);
  }

  manifest.split_assignment.clear();
  for (const auto& rec : manifest.records) {
    Split s = Split::train;
    if (test_patients.count(rec.patient_id)) {
      s = Split::test;
    } else if (val_patients.count(rec.patient_id)) {
      s = Split::val;
    }
    manifest.split_assignment[rec.image_id] = s;
  }
  return manifest;
}

// ------------------------------------------------------------------ reporting

std::vector<std::string> age_bin_names() {
  return {"<20", "20-29", "30-39", "40-49", "50-59", "60-69",
          "70-79", "80-89", "90+", "Unknown"};
}

std::string age_bin(std::optional<int> age) {
  if (!age) return "Unknown";
  if (*age < 20) return "<20";
  if (*age >= 90) return "90+";
  const int lo = (*age / 10) * 10;
  return std::to_string(lo) + "-" + std::to_string(lo + 9);
}

DemographicSummary demographic_summary(const DatasetManifest& manifest) {
  DemographicSummary s;
  s.image_total = manifest.records.size();
  for (const auto& name : age_bin_names()) s.age_bins.push_back({name, 0});
  s.sex_counts = {{"Male", 0}, {"Female", 0}, {"Unknown", 0}};
  s.view_counts = {{"PA", 0}, {"AP", 0}, {"Unknown", 0}};

  std::unordered_map<std::string, const ImageRecord*> first;
  std::vector<const ImageRecord*> patients;
  for (const auto& rec : manifest.records) {
    auto [it, inserted] = first.emplace(rec.patient_id, &rec);
    if (inserted) {
      patients.push_back(&rec);
    } else if (it->second->age != rec.age || it->second->sex != rec.sex) {
      s.conflicts.push_back("patient '" + rec.patient_id + "': demographics differ on image '" +
                            rec.image_id + "'; using image '" + it->second->image_id + "'");
    }
    const std::size_t view_slot = rec.view == View::pa ? 0 : rec.view == View::ap ? 1 : 2;
    ++s.view_counts[view_slot].count;
  }
  s.patient_total = patients.size();

  double sum = 0.0;
  std::size_t n_age = 0;
  for (const auto* p : patients) {
    const std::string bin = age_bin(p->age);
    for (auto& b : s.age_bins)
      if (b.name == bin) ++b.count;
    const std::size_t sex_slot = p->sex == Sex::male ? 0 : p->sex == Sex::female ? 1 : 2;
    ++s.sex_counts[sex_slot].count;
    if (p->age) {
      sum += *p->age;
      ++n_age;
    }
  }
  if (n_age > 0) {
    const double mean = sum / static_cast<double>(n_age);
    double sq = 0.0;
    for (const auto* p : patients)
      if (p->age) sq += (*p->age - mean) * (*p->age - mean);
    s.age_mean = mean;
    s.age_std = std::sqrt(sq / static_cast<double>(n_age));
  }
  return s;
}

std::string render_demographics(const DemographicSummary& summary) {
  auto cell = [](std::size_t count, std::size_t total) {
    return total == 0 ? std::to_string(count) + " (n/a)" : count_with_percent(count, total);
  };
  std::ostringstream out;
  auto row = [&](std::string_view section, std::string_view name, const std::string& value) {
    out << std::left << std::setw(14) << section << std::setw(12) << name << value << "\n";
  };
  std::string age = "n/a";
  if (summary.age_mean) {
    std::ostringstream v;
    v << std::fixed << std::setprecision(2) << *summary.age_mean << " ± " << *summary.age_std;
    age = v.str();
  }
  row("Age", "mean ± std", age);
  for (const auto& b : summary.age_bins) row("", b.name, cell(b.count, summary.patient_total));
  bool first = true;
  for (const auto& b : summary.sex_counts) {
    row(first ? "Sex" : "", b.name, cell(b.count, summary.patient_total));
    first = false;
  }
  first = true;
  for (const auto& b : summary.view_counts) {
    row(first ? "Imaging view" : "", b.name, cell(b.count, summary.image_total));
    first = false;
  }
  return out.str();
}

const DistributionRow* DistributionReport::find(std::string_view split,
                                                std::string_view group) const {
  for (const auto& r : rows)
    if (r.split == split && r.group == group) return &r;
  return nullptr;
}

std::string DistributionReport::to_csv() const {
  std::ostringstream out;
  out << "split,group,images,patients\n";
  for (const auto& r : rows)
    out << r.split << "," << r.group << "," << r.images << "," << r.patients << "\n";
  return out.str();
}

DistributionReport distribution_report(const DatasetManifest& manifest) {
  static const char* kSplits[] = {"train", "val", "test", "unassigned", "all"};
  static const char* kGroups[] = {"positive", "negative", "no_pneumonia", "pneumonia"};
  DistributionReport report;
  std::map<std::pair<std::string, std::string>, std::set<std::string>> patients;
  for (const char* s : kSplits)
    for (const char* g : kGroups) report.rows.push_back({s, g, 0, 0});

  auto bump = [&](const std::string& split, const std::string& group, const ImageRecord& r) {
    for (auto& row : report.rows) {
      if (row.split == split && row.group == group) {
        ++row.images;
        if (patients[{split, group}].insert(r.patient_id).second) ++row.patients;
      }
    }
  };
  for (const auto& r : manifest.records) {
    const auto split = manifest.split_of(r.image_id);
    const std::string s = split ? std::string(to_string(*split)) : "unassigned";
    std::vector<std::string> groups;
    if (r.label() == Label::positive) {
      groups = {"positive"};
    } else if (r.finding == Finding::none) {
      groups = {"negative", "no_pneumonia"};
    } else {
      groups = {"negative", "pneumonia"};
    }
    for (const auto& g : groups) {
      bump(s, g, r);
      bump("all", g, r);
    }
  }
  return report;
}

// ------------------------------------------------------------------ persistence

std::filesystem::path splits_sidecar_path(const std::filesystem::path& manifest_path) {
  return std::filesystem::path(manifest_path.string() + ".splits.csv");
}

std::string manifest_to_csv(const DatasetManifest& manifest) {
  std::ostringstream out;
  out << kManifestHeader << "\n";
  for (const auto& r : manifest.records) {
    out << csv::quote(r.image_id) << "," << csv::quote(r.patient_id) << "," << r.source << ","
        << to_string(r.label()) << "," << to_string(r.finding) << "," << to_string(r.view)
        << "," << (r.age ? std::to_string(*r.age) : "") << "," << to_string(r.sex) << ","
        << csv::quote(r.country.value_or("")) << "," << csv::quote(r.file_path) << "\n";
  }
  return out.str();
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  write_text_file(path, manifest_to_csv(manifest));
  if (!manifest.split_assignment.empty()) {
    std::ostringstream out;
    out << "image_id,split\n";
    for (const auto& r : manifest.records) {
      if (auto s = manifest.split_of(r.image_id))
        out << csv::quote(r.image_id) << "," << to_string(*s) << "\n";
    }
    write_text_file(splits_sidecar_path(path), out.str());
  }
}

DatasetManifest manifest_from_csv(std::string_view text) {
  const auto rows = csv::lines(text);
  if (rows.empty() || rows[0] != kManifestHeader)
    throw SchemaError("manifest header must be '" + std::string(kManifestHeader) + "'");
  DatasetManifest m;
  std::unordered_set<std::string> ids;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].empty()) continue;
    const auto f = csv::split_row(rows[i]);
    const std::string where = "manifest line " + std::to_string(i + 1);
    if (f.size() != 10) throw SchemaError(where + ": expected 10 fields");
    ImageRecord r;
    r.image_id = f[0];
    r.patient_id = f[1];
    try {
      r.source = validate_source_id(f[2]);
      r.finding = parse_finding(f[4]);
      if (parse_label(f[3]) != r.label())
        throw DataIntegrityError(where + ": label contradicts finding");
    } catch (const ArgumentError& e) {
      throw SchemaError(where + ": " + e.what());
    }
    r.view = parse_view(f[5]);
    if (!f[6].empty()) {
      int age = 0;
      if (!parse_int(f[6], age) || age < 0) throw SchemaError(where + ": invalid age");
      r.age = age;
    }
    r.sex = parse_sex(f[7]);
    if (!f[8].empty()) r.country = f[8];
    r.file_path = f[9];
    if (r.image_id.empty() || r.patient_id.empty())
      throw SchemaError(where + ": empty image_id or patient_id");
    if (!ids.insert(r.image_id).second)
      throw DataIntegrityError(where + ": duplicate image_id '" + r.image_id + "'");
    m.records.push_back(std::move(r));
  }
  m.provenance = count_provenance(m.records);
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m = manifest_from_csv(read_text_file(path));
  const auto sidecar = splits_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    std::unordered_set<std::string> ids;
    for (const auto& r : m.records) ids.insert(r.image_id);
    const auto rows = csv::lines(read_text_file(sidecar));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].empty()) continue;
      const auto f = csv::split_row(rows[i]);
      if (f.size() != 2 || !ids.count(f[0]))
        throw SchemaError("split sidecar line " + std::to_string(i + 1) + " is invalid");
      m.split_assignment[f[0]] = parse_split(f[1]);
    }
  }
  return m;
}

std::string summary_key_values(const DatasetManifest& manifest) {
  std::ostringstream out;
  const auto demo = demographic_summary(manifest);
  out << "images=" << manifest.records.size() << "\n";
  out << "patients=" << demo.patient_total << "\n";
  for (const auto& [source, count] : manifest.provenance)
    out << "provenance." << source << "=" << count << "\n";
  const auto dist = distribution_report(manifest);
  for (const auto& r : dist.rows) {
    if (r.images == 0 && r.split != "all") continue;
    out << "split." << r.split << "." << r.group << ".images=" << r.images << "\n";
    out << "split." << r.split << "." << r.group << ".patients=" << r.patients << "\n";
  }
  if (demo.age_mean) {
    std::ostringstream v;
    v << std::fixed << std::setprecision(2) << *demo.age_mean;
    out << "age.mean=" << v.str() << "\n";
    v.str("");
    v << *demo.age_std;
    out << "age.std=" << v.str() << "\n";
  }
  for (const auto& b : demo.age_bins) out << "age.bin." << b.name << "=" << b.count << "\n";
  for (const auto& b : demo.sex_counts) out << "sex." << b.name << "=" << b.count << "\n";
  for (const auto& b : demo.view_counts) out << "view." << b.name << "=" << b.count << "\n";
  out << "demographic_conflicts=" << demo.conflicts.size() << "\n";
  return out.str();
}

}  // namespace cxr
