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

#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "cxr/image_io.hpp"

namespace cxr {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ArgumentError("learning rate must be positive");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ArgumentError("batch size must be even and >= 2, got " + std::to_string(batch_size));
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (patience < 1 || patience > epochs)
    throw ArgumentError("patience must be in [1, epochs], got " + std::to_string(patience));
  if (augment) augment->validate();
}

// ---------------------------------------------------------------- constraints

ConstraintVerdict check_constraints(const MetricsReport& m, const ConstraintSpec& spec) {
  if (spec.min_sensitivity < 0.0 || spec.min_sensitivity > 1.0 || spec.min_ppv < 0.0 ||
      spec.min_ppv > 1.0)
    throw ArgumentError("constraint minimums must lie in [0, 1]");
  auto check = [](const char* name, const std::optional<Ratio>& r, double minimum) {
    ConstraintCheck c;
    c.metric = name;
    c.minimum = minimum;
    if (r) {
      c.value = r->value();
      c.passed = *c.value >= minimum;
    }
    return c;
  };
  ConstraintVerdict v;
  v.checks.push_back(check("sensitivity", m.sensitivity, spec.min_sensitivity));
  v.checks.push_back(check("ppv", m.ppv, spec.min_ppv));
  v.passed = v.checks[0].passed && v.checks[1].passed;
  return v;
}

std::string render_verdict(const ConstraintVerdict& v) {
  std::ostringstream out;
  out << "constraints: " << (v.passed ? "PASS" : "FAIL") << "\n";
  for (const auto& c : v.checks) {
    out << "  " << c.metric << " ";
    if (c.value) {
      out << std::fixed << std::setprecision(4) << *c.value;
    } else {
      out << "n/a";
    }
    out << " >= " << std::fixed << std::setprecision(4) << c.minimum << " : "
        << (c.passed ? "pass" : "fail") << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------- optimizer

template <typename S>
Adam<S>::Adam(Eigen::Index size, double lr, double b1, double b2, double eps)
    : lr_(lr), b1_(b1), b2_(b2), eps_(eps), m_(VectorX<S>::Zero(size)), v_(VectorX<S>::Zero(size)) {}

template <typename S>
void Adam<S>::step(VectorX<S>& params, const VectorX<S>& grad) {
  if (grad.size() != m_.size() || params.size() != m_.size())
    throw ArgumentError("Adam: size mismatch");
  ++t_;
  m_ = S(b1_) * m_ + S(1 - b1_) * grad;
  v_ = S(b2_) * v_ + S(1 - b2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1_, double(t_));
  const double c2 = 1.0 - std::pow(b2_, double(t_));
  params.array() -= S(lr_) * (m_.array() / S(c1)) / ((v_.array() / S(c2)).sqrt() + S(eps_));
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------- batching

std::vector<Batch> rebalanced_batches(const std::vector<std::string>& positives,
                                      const std::vector<std::string>& negatives, int batch_size,
                                      Rng& draw) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ArgumentError("batch size must be even and >= 2, got " + std::to_string(batch_size));
  if (positives.empty()) throw ArgumentError("rebalanced_batches: no positive images");
  if (negatives.empty()) throw ArgumentError("rebalanced_batches: no negative images");
  const bool neg_major = negatives.size() >= positives.size();
  const auto& major = neg_major ? negatives : positives;
  const auto& minor = neg_major ? positives : negatives;
  const std::size_t half = std::size_t(batch_size / 2);
  const std::size_t n_batches = (major.size() + half - 1) / half;
  const std::size_t slots = n_batches * half;

  std::vector<std::size_t> maj(major.size());
  for (std::size_t i = 0; i < maj.size(); ++i) maj[i] = i;
  draw.shuffle(maj);
  while (maj.size() < slots) maj.push_back(maj[draw.below(major.size())]);

  std::vector<std::size_t> mins;
  while (mins.size() < slots) {
    std::vector<std::size_t> perm(minor.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    draw.shuffle(perm);
    mins.insert(mins.end(), perm.begin(), perm.end());
  }
  mins.resize(slots);

  std::vector<Batch> out(n_batches);
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<std::pair<std::string, int>> items;
    for (std::size_t j = 0; j < half; ++j) {
      items.emplace_back(major[maj[b * half + j]], neg_major ? 0 : 1);
      items.emplace_back(minor[mins[b * half + j]], neg_major ? 1 : 0);
    }
    draw.shuffle(items);
    for (auto& [id, label] : items) {
      out[b].image_ids.push_back(std::move(id));
      out[b].labels.push_back(label);
    }
  }
  return out;
}

std::vector<Batch> rebalanced_batches(const DatasetManifest& manifest, int batch_size, Rng& draw) {
  std::vector<std::string> pos, neg;
  for (const ImageRecord* r : manifest.records_in(Split::train))
    (r->label() == Label::positive ? pos : neg).push_back(r->image_id);
  return rebalanced_batches(pos, neg, batch_size, draw);
}

// ---------------------------------------------------------------- history

std::string history_to_jsonl(const TrainHistory& h) {
  std::string out;
  for (const auto& e : h.epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_accuracy"] = e.val_accuracy;
    j["steps"] = e.steps;
    j["checkpoint"] = e.checkpoint_ref ? nlohmann::ordered_json(*e.checkpoint_ref) : nullptr;
    j["best"] = e.epoch == h.best_epoch;
    out += j.dump() + "\n";
  }
  return out;
}

TrainHistory history_from_jsonl(const std::string& text) {
  TrainHistory h;
  std::size_t line_no = 0;
  for (const auto& line : csv::lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochRecord e;
      e.epoch = j.at("epoch").get<int>();
      e.train_loss = j.at("train_loss").get<double>();
      e.val_accuracy = j.at("val_accuracy").get<double>();
      e.steps = j.at("steps").get<long>();
      if (!j.at("checkpoint").is_null()) e.checkpoint_ref = j.at("checkpoint").get<std::string>();
      if (j.value("best", false)) h.best_epoch = e.epoch;
      h.epochs.push_back(e);
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError("history line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return h;
}

// ---------------------------------------------------------------- loading

FileImageLoader::FileImageLoader(std::filesystem::path root, PreprocessConfig cfg)
    : root_(std::move(root)), cfg_(cfg), cache_(std::make_shared<std::map<std::string, ImageBuffer>>()) {}

ImageBuffer FileImageLoader::operator()(const ImageRecord& r) {
  auto it = cache_->find(r.image_id);
  if (it != cache_->end()) return it->second;
  std::filesystem::path p = r.file_path;
  if (p.is_relative()) p = root_ / p;
  ImageBuffer img = preprocess(read_image(p), cfg_);
  cache_->emplace(r.image_id, img);
  return img;
}

// ---------------------------------------------------------------- training

double accuracy(const Model& model, const std::vector<const ImageRecord*>& records,
                const ImageLoader& load) {
  if (records.empty()) throw ArgumentError("accuracy: no records");
  std::size_t correct = 0;
  for (const ImageRecord* r : records) {
    const float p = model.predict(load(*r));
    if (!std::isfinite(p)) throw TrainingError("non-finite prediction for " + r->image_id);
    const int pred = p >= float(kDefaultThreshold) ? 1 : 0;
    if (pred == (r->label() == Label::positive ? 1 : 0)) ++correct;
  }
  return double(correct) / double(records.size());
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += (s.empty() ? "" : ",") + id;
  return s;
}

std::string checkpoint_name(int epoch) {
  std::ostringstream s;
  s << "epoch-" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return s.str();
}

}  // namespace

TrainHistory train(Model& model, const DatasetManifest& manifest, const ImageLoader& load,
                   const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const auto train_records = manifest.records_in(Split::train);
  const auto val_records = manifest.records_in(Split::val);
  if (train_records.empty()) throw ArgumentError("train: the train split is empty");
  if (val_records.empty() && !hooks.validator) throw ArgumentError("train: the val split is empty");
  std::map<std::string, const ImageRecord*> by_id;
  for (const ImageRecord* r : train_records) by_id[r->image_id] = r;

  Adam<float> opt(model.parameter_count(), cfg.learning_rate, cfg.beta1, cfg.beta2,
                  cfg.adam_epsilon);
  TrainHistory history;
  double best_acc = -1.0;
  VectorX<float> best_params = model.parameters();
  std::vector<std::string> kept;  // checkpoint files on disk
  ensure_directory(cfg.checkpoint_dir);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng draw = Rng::derive(cfg.seed, 0xba7c, std::uint64_t(epoch));
    const auto batches = rebalanced_batches(manifest, cfg.batch_size, draw);
    double loss_sum = 0.0;
    std::uint64_t position = 0;
    for (const Batch& batch : batches) {
      std::vector<ImageBuffer> images;
      images.reserve(batch.image_ids.size());
      for (const auto& id : batch.image_ids) {
        ImageBuffer img = load(*by_id.at(id));
        if (cfg.augment) {
          AugmentConfig a = *cfg.augment;
          a.seed = cfg.augment->seed ^ splitmix64(cfg.seed + std::uint64_t(epoch));
          img = augment(img, a, position);
        }
        ++position;
        images.push_back(std::move(img));
      }
      VectorX<float> grad;
      const float loss = model.loss_and_gradient(images, batch.labels, grad);
      if (!std::isfinite(loss) || !grad.allFinite())
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(opt.steps() + 1) + "; batch ids: " +
                            join_ids(batch.image_ids));
      opt.step(model.parameters(), grad);
      loss_sum += loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(batches.size());
    rec.val_accuracy = hooks.validator ? hooks.validator(model, epoch)
                                       : accuracy(model, val_records, load);
    rec.steps = opt.steps();
    const bool improved = rec.val_accuracy > best_acc;
    if (improved) {
      best_acc = rec.val_accuracy;
      history.best_epoch = epoch;
      best_params = model.parameters();
    }
    if (!cfg.checkpoint_dir.empty()) {
      const std::string name = checkpoint_name(epoch);
      save_checkpoint(cfg.checkpoint_dir / name, model);
      rec.checkpoint_ref = name;
      const std::string best_name = checkpoint_name(history.best_epoch);
      std::vector<std::string> still;
      for (const auto& f : kept) {
        if (f == best_name) {
          still.push_back(f);
        } else {
          std::filesystem::remove(cfg.checkpoint_dir / f);
        }
      }
      still.push_back(name);
      kept = std::move(still);
      for (auto& e : history.epochs)
        if (e.checkpoint_ref && *e.checkpoint_ref != best_name) e.checkpoint_ref.reset();
    }
    history.epochs.push_back(rec);
    if (hooks.on_epoch_end) hooks.on_epoch_end(rec);
    if (epoch - history.best_epoch >= cfg.patience && epoch < cfg.epochs) {
      history.stopped_early = true;
      break;
    }
  }
  model.parameters() = best_params;
  return history;
}

}  // namespace cxr
