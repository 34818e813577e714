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

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "temp_dir.hpp"

namespace cxr {
namespace {

using cxr_test::record;

const ColumnSchema kCanon = ColumnSchema::canonical();

TEST(IngestTest, CovidFindingMapsToPositive) {
  const auto r = ingest_source_text("image_id,patient_id,finding\na1,p1,COVID-19\n", "s1", kCanon);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].finding, Finding::sars2);
  EXPECT_EQ(r.records[0].label(), Label::positive);
  EXPECT_EQ(r.records[0].source, "s1");
  EXPECT_EQ(r.records[0].file_path, "a1");
}

TEST(IngestTest, MissingPatientIsRejected) {
  const auto r = ingest_source_text("image_id,patient_id,finding\na1,,normal\n", "s1", kCanon);
  EXPECT_TRUE(r.records.empty());
  ASSERT_EQ(r.rejections.size(), 1u);
  EXPECT_EQ(r.rejections[0].reason, "missing patient_id");
  EXPECT_EQ(r.rejections[0].line, 2u);
}

TEST(IngestTest, DuplicateImageIdYieldsOneRejection) {
  const auto r = ingest_source_text(
      "image_id,patient_id,finding\na1,p1,normal\na2,p2,pneumonia\na1,p3,normal\n", "s1", kCanon);
  EXPECT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.rejections.size(), 1u);
}

TEST(IngestTest, EveryRowAccountedFor) {
  const std::string text =
      "image_id,patient_id,finding,label,age\n"
      "a1,p1,normal,negative,40\n"
      "a2,p2,covid-19,negative,40\n"  // label contradicts finding
      "a3,p3,zebra,,\n"               // unknown finding
      "a4,p4,normal,,-3\n"            // bad age
      "a5,p5\n"                       // short row
      "a6,p6,pneumonia,,\n";
  const auto r = ingest_source_text(text, "s1", kCanon);
  EXPECT_EQ(r.records.size() + r.rejections.size(), 6u);
  EXPECT_EQ(r.records.size(), 2u);
}

TEST(IngestTest, MissingRequiredColumnIsSchemaError) {
  EXPECT_THROW(ingest_source_text("image_id,finding\na1,normal\n", "s1", kCanon), SchemaError);
}

TEST(IngestTest, SchemaFileMapsColumnsAndVocabulary) {
  cxr_test::TempDir tmp("schema");
  write_text_file(tmp / "s.schema",
                  "delimiter=;\ncolumn.image_id=filename\ncolumn.patient_id=pid\n"
                  "column.finding=dx\nfinding.sick=sars2\n");
  const ColumnSchema schema = ColumnSchema::from_file(tmp / "s.schema");
  const auto r = ingest_source_text("filename;pid;dx\nx;q;sick\n", "s2", schema);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].finding, Finding::sars2);
}

TEST(UnifyTest, DisjointSources) {
  std::vector<std::vector<ImageRecord>> src(2);
  for (int i = 0; i < 3; ++i) src[0].push_back(record("a" + std::to_string(i), "p", Finding::none));
  for (int i = 0; i < 4; ++i) {
    auto r = record("b" + std::to_string(i), "q", Finding::sars2);
    r.source = "s2";
    src[1].push_back(r);
  }
  const auto u = unify(src);
  EXPECT_EQ(u.manifest.size(), 7u);
  EXPECT_EQ(u.manifest.provenance.at("s1"), 3u);
  EXPECT_EQ(u.manifest.provenance.at("s2"), 4u);
  EXPECT_TRUE(u.conflicts.empty());
}

TEST(UnifyTest, SameLabelDuplicateLogsConflict) {
  std::vector<std::vector<ImageRecord>> src = {{record("a", "p", Finding::none)},
                                               {record("a", "q", Finding::pneumonia_non_sars2)}};
  src[1][0].source = "s2";
  const auto u = unify(src);
  EXPECT_EQ(u.manifest.size(), 1u);
  EXPECT_EQ(u.conflicts.size(), 1u);
  EXPECT_EQ(u.manifest.records[0].patient_id, "p");
}

TEST(UnifyTest, DifferentLabelDuplicateThrows) {
  std::vector<std::vector<ImageRecord>> src = {{record("a", "p", Finding::none)},
                                               {record("a", "p", Finding::sars2)}};
  EXPECT_THROW(unify(src), DataIntegrityError);
}

TEST(UnifyTest, Idempotent) {
  std::mt19937_64 gen(3);
  const auto m = cxr_test::synthetic_manifest(gen, 30, 3);
  std::vector<std::vector<ImageRecord>> once = {m.records};
  const auto u1 = unify(once);
  std::vector<std::vector<ImageRecord>> twice = {u1.manifest.records};
  const auto u2 = unify(twice);
  EXPECT_EQ(u1.manifest.records, u2.manifest.records);
  EXPECT_EQ(u1.manifest.provenance, u2.manifest.provenance);
}

std::map<std::string, std::set<std::string>> patients_by_split(const DatasetManifest& m) {
  std::map<std::string, std::set<std::string>> out;
  for (const auto& r : m.records) {
    const auto s = m.split_of(r.image_id);
    out[s ? std::string(to_string(*s)) : "none"].insert(r.patient_id);
  }
  return out;
}

TEST(SplitTest, TenPatientToy) {
  DatasetManifest m;
  for (int i = 0; i < 10; ++i)
    m.records.push_back(record("i" + std::to_string(i), "p" + std::to_string(i),
                               i < 5 ? Finding::sars2 : Finding::none));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = split_patient_level(m, {2, 2, std::nullopt}, 0.1, seed);
    EXPECT_EQ(s.records_in(Split::test).size(), 4u);
    const auto by = patients_by_split(s);
    for (const auto& [a, pa] : by)
      for (const auto& [b, pb] : by)
        if (a < b)
          for (const auto& p : pa) EXPECT_EQ(pb.count(p), 0u);
  }
}

TEST(SplitTest, Deterministic) {
  std::mt19937_64 gen(11);
  const auto m = cxr_test::synthetic_manifest(gen, 80, 3);
  const TestTargets t{10, 10, 5};
  EXPECT_EQ(split_patient_level(m, t, 0.1, 9).split_assignment,
            split_patient_level(m, t, 0.1, 9).split_assignment);
}

TEST(SplitTest, UnsatisfiableNamesClass) {
  DatasetManifest m;
  m.records.push_back(record("a", "p", Finding::sars2));
  m.records.push_back(record("b", "q", Finding::none));
  try {
    split_patient_level(m, {3, 1, std::nullopt}, 0.1, 0);
    FAIL() << "expected UnsatisfiableError";
  } catch (const UnsatisfiableError& e) {
    EXPECT_NE(std::string(e.what()).find("positive"), std::string::npos) << e.what();
  }
}

TEST(SplitTest, SubTargetsExact) {
  std::mt19937_64 gen(5);
  const auto m = cxr_test::synthetic_manifest(gen, 200, 2);
  const auto s = split_patient_level(m, {20, 20, 10}, 0.1, 1);
  std::size_t pos = 0, none = 0, pneu = 0;
  for (const auto* r : s.records_in(Split::test)) {
    if (r->finding == Finding::sars2) ++pos;
    if (r->finding == Finding::none) ++none;
    if (r->finding == Finding::pneumonia_non_sars2) ++pneu;
  }
  EXPECT_EQ(pos, 20u);
  EXPECT_EQ(none, 10u);
  EXPECT_EQ(pneu, 10u);
}

TEST(DemographicsTest, SinglePatient) {
  DatasetManifest m;
  auto r = record("a", "p", Finding::none);
  r.age = 30;
  m.records.push_back(r);
  const auto d = demographic_summary(m);
  EXPECT_DOUBLE_EQ(*d.age_mean, 30.0);
  EXPECT_DOUBLE_EQ(*d.age_std, 0.0);
  for (const auto& b : d.age_bins) EXPECT_EQ(b.count, b.name == "30-39" ? 1u : 0u);
  EXPECT_NE(render_demographics(d).find("1 (100.0%)"), std::string::npos);
}

TEST(DemographicsTest, FirstRecordWinsPerPatient) {
  DatasetManifest m;
  auto a = record("a", "p", Finding::none);
  a.age = 25;
  a.sex = Sex::female;
  a.view = View::pa;
  auto b = record("b", "p", Finding::none);
  b.age = 71;
  b.sex = Sex::male;
  b.view = View::ap;
  m.records = {a, b};
  const auto d = demographic_summary(m);
  EXPECT_EQ(d.patient_total, 1u);
  EXPECT_EQ(d.image_total, 2u);
  EXPECT_DOUBLE_EQ(*d.age_mean, 25.0);
  EXPECT_EQ(d.sex_counts[1].count, 1u);
  EXPECT_EQ(d.view_counts[0].count, 1u);
  EXPECT_EQ(d.view_counts[1].count, 1u);
  EXPECT_FALSE(d.conflicts.empty());
}

TEST(DemographicsTest, EmptyManifest) {
  const auto d = demographic_summary(DatasetManifest{});
  EXPECT_EQ(d.patient_total, 0u);
  EXPECT_FALSE(d.age_mean.has_value());
  EXPECT_NO_THROW(render_demographics(d));
}

TEST(DemographicsTest, AgeBins) {
  EXPECT_EQ(age_bin(std::nullopt), "Unknown");
  EXPECT_EQ(age_bin(0), "<20");
  EXPECT_EQ(age_bin(19), "<20");
  EXPECT_EQ(age_bin(20), "20-29");
  EXPECT_EQ(age_bin(89), "80-89");
  EXPECT_EQ(age_bin(90), "90+");
  EXPECT_EQ(age_bin_names().size(), 10u);
}

TEST(DistributionTest, EmptyIsZero) {
  for (const auto& r : distribution_report(DatasetManifest{}).rows) {
    EXPECT_EQ(r.images, 0u);
    EXPECT_EQ(r.patients, 0u);
  }
}

TEST(DistributionTest, HandTally) {
  DatasetManifest m;
  m.records = {record("a", "p1", Finding::sars2), record("b", "p1", Finding::sars2),
               record("c", "p2", Finding::none), record("d", "p3", Finding::pneumonia_non_sars2)};
  m.split_assignment = {{"a", Split::test}, {"b", Split::test}, {"c", Split::train},
                        {"d", Split::train}};
  const auto rep = distribution_report(m);
  EXPECT_EQ(rep.find("test", "positive")->images, 2u);
  EXPECT_EQ(rep.find("test", "positive")->patients, 1u);
  EXPECT_EQ(rep.find("train", "negative")->images, 2u);
  EXPECT_EQ(rep.find("train", "no_pneumonia")->images, 1u);
  EXPECT_EQ(rep.find("train", "pneumonia")->patients, 1u);
  EXPECT_EQ(rep.find("all", "negative")->images, 2u);
}

TEST(PersistenceTest, RoundTripWithSplits) {
  cxr_test::TempDir tmp("manifest");
  std::mt19937_64 gen(2);
  auto m = cxr_test::synthetic_manifest(gen, 40, 2);
  m.records[0].age = 33;
  m.records[0].sex = Sex::male;
  m.records[0].country = "Spain, north";
  m.records[0].view = View::ap;
  m = split_patient_level(m, {3, 3, std::nullopt}, 0.2, 4);
  write_manifest(tmp / "m.csv", m);
  const std::string text = read_text_file(tmp / "m.csv");
  EXPECT_EQ(text.substr(0, kManifestHeader.size()), kManifestHeader);
  const auto back = read_manifest(tmp / "m.csv");
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.split_assignment, m.split_assignment);
  EXPECT_EQ(back.provenance, m.provenance);
}

}  // namespace
}  // namespace cxr
