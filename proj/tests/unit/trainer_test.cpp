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
#include "cxr/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "oracles.hpp"
#include "temp_dir.hpp"

namespace cxr {
namespace {

std::vector<std::string> ids(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

// Checks the 50/50 split and single majority coverage of one epoch.
void check_epoch(const std::vector<Batch>& batches, const std::vector<std::string>& pos,
                 const std::vector<std::string>& neg, int batch_size) {
  const bool neg_major = neg.size() >= pos.size();
  const auto& major = neg_major ? neg : pos;
  const int major_label = neg_major ? 0 : 1;
  const std::size_t half = std::size_t(batch_size) / 2;
  ASSERT_EQ(batches.size(), (major.size() + half - 1) / half);
  const std::set<std::string> pos_set(pos.begin(), pos.end()), neg_set(neg.begin(), neg.end());
  std::vector<std::string> major_seen;
  for (const Batch& b : batches) {
    ASSERT_EQ(b.image_ids.size(), std::size_t(batch_size));
    ASSERT_EQ(b.labels.size(), std::size_t(batch_size));
    std::size_t p = 0;
    for (std::size_t i = 0; i < b.image_ids.size(); ++i) {
      const bool is_pos = pos_set.count(b.image_ids[i]) > 0;
      ASSERT_TRUE(is_pos || neg_set.count(b.image_ids[i]));
      ASSERT_EQ(b.labels[i], is_pos ? 1 : 0);
      p += is_pos;
      if (b.labels[i] == major_label) major_seen.push_back(b.image_ids[i]);
    }
    ASSERT_EQ(p, half);
  }
  std::map<std::string, int> count;
  for (const auto& id : major_seen) ++count[id];
  ASSERT_EQ(count.size(), major.size());  // every majority item appears
  // Repeats only come from topping up the last batch.
  ASSERT_EQ(major_seen.size() - major.size(), batches.size() * half - major.size());
}

TEST(RebalanceTest, FourPlusTwelve) {
  const auto pos = ids("p", 4), neg = ids("n", 12);
  Rng rng(1);
  const auto batches = rebalanced_batches(pos, neg, 8, rng);
  ASSERT_EQ(batches.size(), 3u);
  std::map<std::string, int> neg_count;
  for (const auto& b : batches)
    for (std::size_t i = 0; i < b.image_ids.size(); ++i)
      if (b.labels[i] == 0) ++neg_count[b.image_ids[i]];
  ASSERT_EQ(neg_count.size(), 12u);
  for (const auto& [id, c] : neg_count) EXPECT_EQ(c, 1) << id;
  check_epoch(batches, pos, neg, 8);
}

TEST(RebalanceTest, FourPlusFour) {
  const auto pos = ids("p", 4), neg = ids("n", 4);
  Rng rng(2);
  const auto batches = rebalanced_batches(pos, neg, 8, rng);
  ASSERT_EQ(batches.size(), 1u);
  std::set<std::string> all(batches[0].image_ids.begin(), batches[0].image_ids.end());
  EXPECT_EQ(all.size(), 8u);
}

TEST(RebalanceTest, EmptyClassOrOddBatchThrows) {
  Rng rng(3);
  EXPECT_THROW(rebalanced_batches({}, ids("n", 4), 8, rng), ArgumentError);
  EXPECT_THROW(rebalanced_batches(ids("p", 4), {}, 8, rng), ArgumentError);
  EXPECT_THROW(rebalanced_batches(ids("p", 4), ids("n", 4), 7, rng), ArgumentError);
}

TEST(RebalanceTest, FuzzedRatios) {
  std::mt19937_64 gen(4);
  for (int epoch = 0; epoch < 100; ++epoch) {
    const int np = 1 + int(gen() % 40), nn = 1 + int(gen() % 40);
    const int batch = 2 * (1 + int(gen() % 6));
    const auto pos = ids("p", np), neg = ids("n", nn);
    Rng rng(gen());
    SCOPED_TRACE(std::to_string(np) + "+" + std::to_string(nn) + " batch " + std::to_string(batch));
    check_epoch(rebalanced_batches(pos, neg, batch, rng), pos, neg, batch);
  }
}

TEST(RebalanceTest, SeedDeterminesOrder) {
  const auto pos = ids("p", 5), neg = ids("n", 17);
  Rng a(9), b(9), c(10);
  const auto x = rebalanced_batches(pos, neg, 4, a);
  const auto y = rebalanced_batches(pos, neg, 4, b);
  const auto z = rebalanced_batches(pos, neg, 4, c);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].image_ids, y[i].image_ids);
  bool differs = false;
  for (std::size_t i = 0; i < x.size(); ++i) differs |= x[i].image_ids != z[i].image_ids;
  EXPECT_TRUE(differs);
}

TEST(RebalanceTest, ManifestUsesTrainSplitOnly) {
  DatasetManifest m;
  for (int i = 0; i < 6; ++i) {
    m.records.push_back(cxr_test::record("a" + std::to_string(i), "p" + std::to_string(i),
                                         i < 2 ? Finding::sars2 : Finding::none));
    m.split_assignment[m.records.back().image_id] = i == 5 ? Split::val : Split::train;
  }
  Rng rng(1);
  for (const auto& b : rebalanced_batches(m, 2, rng))
    for (const auto& id : b.image_ids) EXPECT_NE(id, "a5");
}

// ---------------------------------------------------------------- constraints

MetricsReport with(std::uint64_t sens_num, std::uint64_t sens_den, std::uint64_t ppv_num,
                   std::uint64_t ppv_den) {
  MetricsReport r;
  r.sensitivity = Ratio{sens_num, sens_den};
  r.ppv = Ratio{ppv_num, ppv_den};
  r.accuracy = Ratio{1, 1};
  return r;
}

TEST(ConstraintTest, TableRows) {
  EXPECT_TRUE(check_constraints(metrics_from_confusion({194, 6, 9, 191})).passed);
  EXPECT_TRUE(check_constraints(with(955, 1000, 970, 1000)).passed);
  const ConstraintVerdict v = check_constraints(with(935, 1000, 1000, 1000));
  EXPECT_FALSE(v.passed);
  ASSERT_EQ(v.checks.size(), 2u);
  EXPECT_FALSE(v.checks[0].passed);
  EXPECT_TRUE(v.checks[1].passed);
  EXPECT_FALSE(check_constraints(with(885, 1000, 922, 1000)).passed);
}

TEST(ConstraintTest, BoundaryIsInclusive) {
  EXPECT_TRUE(check_constraints(with(19, 20, 95, 100)).passed);
  EXPECT_FALSE(check_constraints(with(189, 200, 19, 20)).passed);
}

TEST(ConstraintTest, UndefinedFails) {
  MetricsReport r = with(1, 1, 1, 1);
  r.ppv.reset();
  const ConstraintVerdict v = check_constraints(r);
  EXPECT_FALSE(v.passed);
  EXPECT_FALSE(v.checks[1].value);
  EXPECT_NE(render_verdict(v).find("n/a"), std::string::npos);
}

TEST(ConstraintTest, Monotone) {
  std::mt19937_64 gen(5);
  for (int i = 0; i < 2000; ++i) {
    const std::uint64_t den = 1 + gen() % 100;
    const std::uint64_t s = gen() % (den + 1), p = gen() % (den + 1);
    if (!check_constraints(with(s, den, p, den)).passed) continue;
    const std::uint64_t s2 = s + gen() % (den - s + 1), p2 = p + gen() % (den - p + 1);
    ASSERT_TRUE(check_constraints(with(s2, den, p2, den)).passed);
  }
}

TEST(ConstraintTest, BadSpecThrows) {
  EXPECT_THROW(check_constraints(with(1, 1, 1, 1), {1.5, 0.5}), ArgumentError);
}

// ---------------------------------------------------------------- optimizer

TEST(AdamTest, FirstStepMovesByLearningRate) {
  Adam<double> opt(3, 0.01);
  VectorX<double> p = VectorX<double>::Zero(3);
  VectorX<double> g(3);
  g << 2.0, -0.5, 0.0;
  opt.step(p, g);
  EXPECT_NEAR(p(0), -0.01, 1e-9);
  EXPECT_NEAR(p(1), 0.01, 1e-9);
  EXPECT_EQ(p(2), 0.0);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamTest, DescentOnOneBatch) {
  const auto set = cxr_test::separable_fixture(4, 4, 32, 7);
  std::vector<ImageT<double>> batch;
  for (const auto& img : set.images) batch.push_back(img.cast<double>());
  for (double lr : {1e-5, 1e-3}) {
    Network<double> net(reference_spec("toy-prpe"), 3);
    Adam<double> opt(net.parameter_count(), lr);
    VectorX<double> grad;
    const double before = net.loss_and_gradient(batch, set.labels, grad);
    opt.step(net.parameters(), grad);
    EXPECT_LT(net.loss(batch, set.labels), before) << "lr " << lr;
  }
}

// ---------------------------------------------------------------- training

struct Fixture {
  DatasetManifest manifest;
  std::map<std::string, ImageBuffer> images;
  ImageLoader loader() const {
    return [this](const ImageRecord& r) { return images.at(r.image_id); };
  }
};

Fixture make_fixture(int n_pos, int n_neg, std::uint64_t seed, bool val_copy = true) {
  const auto set = cxr_test::separable_fixture(n_pos, n_neg, 32, seed);
  Fixture f;
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    const std::string id = "img" + std::to_string(i);
    f.manifest.records.push_back(cxr_test::record(
        id, "pt" + std::to_string(i), set.labels[i] ? Finding::sars2 : Finding::none));
    f.images[id] = set.images[i];
    f.manifest.split_assignment[id] = Split::train;
    if (val_copy && i % 4 == 0) f.manifest.split_assignment[id] = Split::val;
  }
  return f;
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.epochs = epochs;
  cfg.patience = epochs;
  cfg.seed = 11;
  return cfg;
}

TEST(TrainTest, ConfigValidation) {
  TrainConfig cfg;
  cfg.batch_size = 3;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = TrainConfig{};
  cfg.patience = 41;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(TrainTest, EarlyStoppingRestoresBest) {
  Fixture f = make_fixture(4, 4, 1);
  Model model = build_model(reference_spec("toy-prpe"), 1);
  TrainConfig cfg = quick_config(6);
  cfg.patience = 1;
  std::map<int, VectorX<float>> seen;
  TrainHooks hooks;
  hooks.validator = [&](const Model& m, int epoch) {
    seen[epoch] = m.parameters();
    return 1.0 - 0.1 * epoch;
  };
  const TrainHistory h = train(model, f.manifest, f.loader(), cfg, hooks);
  EXPECT_EQ(h.epochs.size(), 2u);
  EXPECT_EQ(h.best_epoch, 1);
  EXPECT_TRUE(h.stopped_early);
  EXPECT_EQ(model.parameters(), seen.at(1));
  EXPECT_NE(model.parameters(), seen.at(2));
}

TEST(TrainTest, TiesKeepEarliestEpoch) {
  Fixture f = make_fixture(4, 4, 1);
  Model model = build_model(reference_spec("toy-prpe"), 1);
  TrainConfig cfg = quick_config(4);
  TrainHooks hooks;
  hooks.validator = [](const Model&, int epoch) { return epoch == 1 ? 0.5 : 0.75; };
  const TrainHistory h = train(model, f.manifest, f.loader(), cfg, hooks);
  EXPECT_EQ(h.best_epoch, 2);
  EXPECT_EQ(h.epochs.size(), 4u);
  EXPECT_FALSE(h.stopped_early);
}

TEST(TrainTest, BestModelReproducesValAccuracy) {
  Fixture f = make_fixture(8, 8, 2);
  Model model = build_model(reference_spec("toy-prpe"), 2);
  const TrainHistory h = train(model, f.manifest, f.loader(), quick_config(5));
  const auto val = f.manifest.records_in(Split::val);
  EXPECT_DOUBLE_EQ(accuracy(model, val, f.loader()), h.best().val_accuracy);
  for (std::size_t i = 0; i < h.epochs.size(); ++i) {
    EXPECT_EQ(h.epochs[i].epoch, int(i) + 1);
    EXPECT_LE(h.epochs[i].val_accuracy, h.best().val_accuracy);
  }
}

TEST(TrainTest, SameSeedSameHistory) {
  Fixture f = make_fixture(6, 10, 3);
  TrainConfig cfg = quick_config(3);
  cfg.augment = AugmentConfig{};
  cfg.augment->seed = 5;
  Model a = build_model(reference_spec("toy-prpe"), 4);
  Model b = build_model(reference_spec("toy-prpe"), 4);
  const TrainHistory ha = train(a, f.manifest, f.loader(), cfg);
  const TrainHistory hb = train(b, f.manifest, f.loader(), cfg);
  EXPECT_EQ(history_to_jsonl(ha), history_to_jsonl(hb));
  EXPECT_EQ(a.parameters(), b.parameters());
}

TEST(TrainTest, NonFiniteLossNamesBatch) {
  Fixture f = make_fixture(4, 4, 4);
  f.images["img1"](3, 3) = std::numeric_limits<float>::quiet_NaN();
  Model model = build_model(reference_spec("toy-prpe"), 1);
  try {
    train(model, f.manifest, f.loader(), quick_config(2));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("img1"), std::string::npos) << e.what();
    EXPECT_STREQ(e.code(), "training");
  }
}

TEST(TrainTest, CheckpointsPrunedToBestAndLast) {
  cxr_test::TempDir tmp("ckpts");
  Fixture f = make_fixture(4, 4, 5);
  Model model = build_model(reference_spec("toy-prpe"), 1);
  TrainConfig cfg = quick_config(5);
  cfg.checkpoint_dir = tmp.path();
  TrainHooks hooks;
  hooks.validator = [](const Model&, int epoch) { return epoch == 2 ? 0.9 : 0.1; };
  const TrainHistory h = train(model, f.manifest, f.loader(), cfg, hooks);
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(tmp.path()))
    files.push_back(e.path().filename().string());
  EXPECT_EQ(files.size(), 2u);
  ASSERT_TRUE(h.best().checkpoint_ref);
  EXPECT_TRUE(std::filesystem::exists(tmp / *h.best().checkpoint_ref));
  ASSERT_TRUE(h.epochs.back().checkpoint_ref);
  EXPECT_TRUE(std::filesystem::exists(tmp / *h.epochs.back().checkpoint_ref));
  const Model best = load_checkpoint(tmp / *h.best().checkpoint_ref);
  EXPECT_EQ(best.parameters(), model.parameters());
}

TEST(TrainTest, EmptySplitsThrow) {
  Fixture f = make_fixture(4, 4, 6, false);
  Model model = build_model(reference_spec("toy-prpe"), 1);
  EXPECT_THROW(train(model, f.manifest, f.loader(), quick_config(1)), ArgumentError);
}

TEST(HistoryTest, JsonlRoundTrip) {
  TrainHistory h;
  h.epochs = {{1, 0.7, 0.5, 4, std::nullopt}, {2, 0.3, 0.875, 8, "epoch-0002.ckpt"}};
  h.best_epoch = 2;
  const std::string text = history_to_jsonl(h);
  const TrainHistory back = history_from_jsonl(text);
  EXPECT_EQ(history_to_jsonl(back), text);
  EXPECT_EQ(back.best_epoch, 2);
  EXPECT_THROW(history_from_jsonl("{\"epoch\": 1\n"), Error);
}

}  // namespace
}  // namespace cxr
