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
#include "cxr/cli.hpp"

#include <gtest/gtest.h>

#include <json.hpp>
#include <sstream>

#include "cxr/image_io.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

namespace cxr {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string fixture_predictions() {
  return (fs::path(CXRNET_SOURCE_DIR) / "data" / "headline_predictions.csv").string();
}

TEST(CliTest, NoArgsIsUsage) {
  const Result r = run({});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("prepare-data"), std::string::npos);
}

TEST(CliTest, UnknownCommand) {
  const Result r = run({"frobnicate"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("error: code=usage"), std::string::npos);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
}

TEST(CliTest, BadOptionIsUsage) {
  EXPECT_EQ(run({"complexity", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"train"}).code, kExitUsage);  // --manifest and --out are required
}

TEST(CliTest, HelpExitsZero) { EXPECT_EQ(run({"--help"}).code, kExitOk); }

TEST(CliTest, EvaluateShippedFixture) {
  const Result r = run({"evaluate", "--predictions", fixture_predictions()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("95.5 / 97.0 / 96.3"), std::string::npos) << r.out;
  const Result j = run({"evaluate", "--predictions", fixture_predictions(), "--format", "json"});
  const MetricsReport m = report_from_json(j.out);
  EXPECT_EQ(m.matrix, (ConfusionMatrix{194, 6, 9, 191}));
}

TEST(CliTest, EvaluateNeedsOneSource) {
  EXPECT_EQ(run({"evaluate"}).code, kExitUsage);
  EXPECT_EQ(run({"evaluate", "--predictions", "a.csv", "--checkpoint", "b"}).code, kExitUsage);
  EXPECT_EQ(run({"evaluate", "--predictions", "/nonexistent.csv"}).code, kExitFailure);
}

TEST(CliTest, ComplexityTotalsMatchOracle) {
  const Result r = run({"complexity", "--spec", "cxr2-tiny", "--format", "json"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const auto [params, macs] = cxr_test::brute_force_count(reference_spec("cxr2-tiny"));
  EXPECT_EQ(j.at("total_params").get<std::int64_t>(), params);
  EXPECT_EQ(j.at("total_macs").get<std::int64_t>(), macs);
  const Result t = run({"complexity", "--spec", "cxr2-tiny"});
  EXPECT_NE(t.out.find(std::to_string(params)), std::string::npos);
}

TEST(CliTest, ComplexityBadSpecFails) {
  const Result r = run({"complexity", "--spec", "/nonexistent/spec.json"});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("error: code="), std::string::npos);
}

TEST(CliTest, EvaluateOutRefusesClobber) {
  cxr_test::TempDir tmp("clobber");
  const std::string dir = (tmp / "eval").string();
  ASSERT_EQ(run({"evaluate", "--predictions", fixture_predictions(), "--out", dir}).code, kExitOk);
  EXPECT_TRUE(fs::exists(tmp / "eval" / "metrics.json"));
  EXPECT_TRUE(fs::exists(tmp / "eval" / "predictions.csv"));
  EXPECT_TRUE(fs::exists(tmp / "eval" / "evaluate.config.json"));
  const Result again = run({"evaluate", "--predictions", fixture_predictions(), "--out", dir});
  EXPECT_EQ(again.code, kExitFailure);
  EXPECT_NE(again.err.find("--overwrite"), std::string::npos);
  EXPECT_EQ(run({"evaluate", "--predictions", fixture_predictions(), "--out", dir, "--overwrite"})
                .code,
            kExitOk);
}

TEST(CliTest, LockedDirectoryFails) {
  cxr_test::TempDir tmp("lock");
  write_text_file(tmp / ".lock", "");
  const Result r =
      run({"evaluate", "--predictions", fixture_predictions(), "--out", tmp.path().string()});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("locked"), std::string::npos);
}

TEST(CliTest, ReportOnEmptyDirListsGaps) {
  cxr_test::TempDir tmp("empty");
  const RunReport r = build_report(tmp.path());
  EXPECT_FALSE(r.dataset);
  EXPECT_FALSE(r.history);
  EXPECT_FALSE(r.metrics);
  EXPECT_FALSE(r.verdict);
  EXPECT_FALSE(r.complexity);
  EXPECT_EQ(r.gaps.size(), 5u);
  const Result out = run({"report", "--run-dir", tmp.path().string()});
  EXPECT_EQ(out.code, kExitOk);
  EXPECT_NE(out.out.find("== gaps"), std::string::npos);
}

TEST(CliTest, HistoryChecksumIsStable) {
  EXPECT_EQ(history_checksum("abc"), history_checksum("abc"));
  EXPECT_NE(history_checksum("abc"), history_checksum("abd"));
  EXPECT_EQ(history_checksum("").size(), 16u);
}

// ---------------------------------------------------------------- end to end

// Two cohorts of PNGs (bright-blob positives, flat negatives) and their
// metadata tables.
fs::path write_cohorts(const fs::path& root) {
  const auto set = cxr_test::separable_fixture(14, 14, 40, 77);
  fs::create_directories(root / "sources");
  std::string a = "image_id,patient_id,finding,view,age,sex,file_path\n";
  std::string b = "image_id,patient_id,finding,view,age,sex,file_path\n";
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    const std::string id = "x" + std::to_string(i);
    write_png(root / "images" / (id + ".png"), set.images[i]);
    const std::string row = id + ",pt" + std::to_string(i) + "," +
                            (set.labels[i] ? "covid-19" : "normal") + ",PA," +
                            std::to_string(20 + i) + "," + (i % 2 ? "M" : "F") + ",images/" +
                            id + ".png\n";
    (i % 3 == 0 ? b : a) += row;
  }
  write_text_file(root / "sources" / "cohort-a.csv", a);
  write_text_file(root / "sources" / "cohort-b.csv", b);
  return root / "manifest.csv";
}

std::vector<std::string> prepare_args(const fs::path& root, const fs::path& manifest) {
  return {"--seed", "5", "prepare-data", "--sources", (root / "sources").string(), "--out",
          manifest.string(), "--test-pos-images", "3", "--test-neg-images", "3",
          "--test-no-pneumonia-images", "0", "--val-fraction", "0.25"};
}

std::vector<std::string> train_args(const fs::path& manifest, const fs::path& run_dir) {
  return {"--seed", "3", "train", "--manifest", manifest.string(), "--spec", "toy-prpe", "--lr",
          "1e-3", "--batch-size", "4", "--epochs", "3", "--patience", "3", "--out",
          run_dir.string()};
}

TEST(CliEndToEndTest, PrepareTrainEvaluateReport) {
  cxr_test::TempDir tmp("e2e");
  const fs::path manifest = write_cohorts(tmp.path());

  Result r = run(prepare_args(tmp.path(), manifest));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* suffix : {"", ".splits.csv", ".summary.txt", ".rejections.csv",
                             ".distribution.csv", ".demographics.txt"})
    EXPECT_TRUE(fs::exists(manifest.string() + suffix)) << suffix;
  const DatasetManifest m = read_manifest(manifest);
  EXPECT_EQ(m.size(), 28u);
  EXPECT_EQ(m.provenance.at("cohort-a") + m.provenance.at("cohort-b"), 28u);
  std::size_t test_pos = 0, test_neg = 0;
  for (const ImageRecord* rec : m.records_in(Split::test))
    (rec->label() == Label::positive ? test_pos : test_neg)++;
  EXPECT_EQ(test_pos, 3u);
  EXPECT_EQ(test_neg, 3u);
  EXPECT_FALSE(m.records_in(Split::val).empty());

  // Same seed, same bytes.
  const fs::path manifest2 = tmp / "again" / "manifest.csv";
  ASSERT_EQ(run(prepare_args(tmp.path(), manifest2)).code, kExitOk);
  EXPECT_EQ(read_text_file(manifest), read_text_file(manifest2));
  EXPECT_EQ(read_text_file(splits_sidecar_path(manifest)),
            read_text_file(splits_sidecar_path(manifest2)));

  const fs::path run_dir = tmp / "run";
  r = run(train_args(manifest, run_dir));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"manifest.csv", "spec.json", "history.jsonl", "history.checksum",
                        "model.ckpt", "log.txt", "train.config.json"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  EXPECT_NE(read_text_file(run_dir / "log.txt").find("event=epoch"), std::string::npos);
  EXPECT_EQ(run(train_args(manifest, run_dir)).code, kExitFailure);  // no clobber

  const fs::path run2 = tmp / "run2";
  ASSERT_EQ(run(train_args(manifest, run2)).code, kExitOk);
  EXPECT_EQ(read_text_file(run_dir / "history.jsonl"), read_text_file(run2 / "history.jsonl"));

  r = run({"evaluate", "--checkpoint", (run_dir / "model.ckpt").string(), "--manifest",
           manifest.string(), "--out", run_dir.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const MetricsReport metrics = report_from_json(read_text_file(run_dir / "metrics.json"));
  EXPECT_EQ(metrics.matrix.total(), 6u);

  const RunReport rep = build_report(run_dir);
  EXPECT_TRUE(rep.gaps.empty());
  EXPECT_TRUE(rep.warnings.empty());
  ASSERT_TRUE(rep.dataset && rep.history && rep.metrics && rep.verdict && rep.complexity);
  EXPECT_EQ(rep.history->epochs.size(), 3u);
  EXPECT_EQ(*rep.metrics, metrics);
  EXPECT_EQ(rep.complexity->total_params, analyze(reference_spec("toy-prpe")).total_params);
  r = run({"report", "--run-dir", run_dir.string()});
  ASSERT_EQ(r.code, kExitOk);
  for (const char* section : {"== dataset", "== history", "== metrics", "== constraints",
                              "== complexity"})
    EXPECT_NE(r.out.find(section), std::string::npos) << section;
  r = run({"report", "--run-dir", run_dir.string(), "--format", "json"});
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j.at("gaps").empty());

  // Explain one test image.
  const ImageRecord* img = m.records_in(Split::test).front();
  r = run({"explain", "--checkpoint", (run_dir / "model.ckpt").string(), "--image",
           (tmp.path() / img->file_path).string(), "--cells", "4", "--out-dir",
           (tmp / "explain").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(tmp / "explain" / (img->image_id + ".mask.txt")));
  EXPECT_TRUE(fs::exists(tmp / "explain" / (img->image_id + ".overlay.png")));

  // Tampering with the history is reported, not trusted.
  std::string hist = read_text_file(run_dir / "history.jsonl");
  hist[hist.find("val_accuracy") + 14] = '9';
  write_text_file(run_dir / "history.jsonl", hist);
  const RunReport tampered = build_report(run_dir);
  ASSERT_FALSE(tampered.warnings.empty());
  EXPECT_NE(tampered.warnings[0].find("checksum"), std::string::npos);
}

TEST(CliEndToEndTest, UnsatisfiableSplitNamesClass) {
  cxr_test::TempDir tmp("unsat");
  const fs::path manifest = write_cohorts(tmp.path());
  auto args = prepare_args(tmp.path(), manifest);
  args[8] = "50";  // --test-pos-images
  const Result r = run(args);
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("code=unsatisfiable"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("positive"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace cxr
