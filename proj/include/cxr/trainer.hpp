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
#ifndef CXR_TRAINER_HPP_
#define CXR_TRAINER_HPP_

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cxr/dataman.hpp"
#include "cxr/metrics.hpp"
#include "cxr/network.hpp"
#include "cxr/pixelpipe.hpp"

namespace cxr {

class TrainingError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "training"; }
};

struct TrainConfig {
  double learning_rate = 1e-5;
  int batch_size = 8;
  int epochs = 40;
  int patience = 5;
  std::uint64_t seed = 0;
  std::optional<AugmentConfig> augment;  // nullopt trains on unaugmented images
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Per-epoch checkpoints, pruned to best and last. Empty disables them.
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

// ---------------------------------------------------------------- constraints

struct ConstraintSpec {
  double min_sensitivity = 0.95;
  double min_ppv = 0.95;
};

struct ConstraintCheck {
  std::string metric;
  std::optional<double> value;  // nullopt when the metric is undefined
  double minimum = 0.0;
  bool passed = false;
};

struct ConstraintVerdict {
  bool passed = false;
  std::vector<ConstraintCheck> checks;
};

/// Passes iff sensitivity >= min_sensitivity and ppv >= min_ppv. An undefined
/// metric fails its check.
ConstraintVerdict check_constraints(const MetricsReport& metrics, const ConstraintSpec& spec = {});
std::string render_verdict(const ConstraintVerdict& verdict);

// ---------------------------------------------------------------- optimizer

/// Adaptive-moment optimizer with bias correction.
template <typename Scalar>
class Adam {
 public:
  Adam(Eigen::Index size, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);
  void step(VectorX<Scalar>& params, const VectorX<Scalar>& grad);
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  VectorX<Scalar> m_, v_;
};

// ---------------------------------------------------------------- batching

struct Batch {
  std::vector<std::string> image_ids;
  std::vector<int> labels;
};

/// Half positives, half negatives per batch. Every majority-class item is used
/// once per epoch; when the majority count is not a multiple of batch_size / 2
/// the last batch is topped up with re-drawn majority items. Minority items
/// are drawn by cycling through fresh shuffles. Negatives are the majority on
/// ties.
std::vector<Batch> rebalanced_batches(const std::vector<std::string>& positives,
                                      const std::vector<std::string>& negatives, int batch_size,
                                      Rng& draw);
/// Uses the train split of `manifest`.
std::vector<Batch> rebalanced_batches(const DatasetManifest& manifest, int batch_size, Rng& draw);

// ---------------------------------------------------------------- training

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  long steps = 0;
  std::optional<std::string> checkpoint_ref;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based, 0 when empty
  bool stopped_early = false;

  const EpochRecord& best() const { return epochs.at(std::size_t(best_epoch - 1)); }
};

/// One JSON object per line.
std::string history_to_jsonl(const TrainHistory& history);
TrainHistory history_from_jsonl(const std::string& text);

using ImageLoader = std::function<ImageBuffer(const ImageRecord&)>;

/// Reads `file_path` relative to `root` and preprocesses it. Caches results.
class FileImageLoader {
 public:
  explicit FileImageLoader(std::filesystem::path root, PreprocessConfig cfg = {});
  ImageBuffer operator()(const ImageRecord& record);

 private:
  std::filesystem::path root_;
  PreprocessConfig cfg_;
  std::shared_ptr<std::map<std::string, ImageBuffer>> cache_;
};

struct TrainHooks {
  /// Replaces the default val-split accuracy.
  std::function<double(const Model&, int epoch)> validator;
  std::function<void(const EpochRecord&)> on_epoch_end;
};

/// Accuracy at threshold 0.5 over `records`.
double accuracy(const Model& model, const std::vector<const ImageRecord*>& records,
                const ImageLoader& load);

/// Trains `model` in place and leaves it at the best epoch's weights.
TrainHistory train(Model& model, const DatasetManifest& manifest, const ImageLoader& load,
                   const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace cxr

#endif  // CXR_TRAINER_HPP_
