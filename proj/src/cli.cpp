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

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "cxr/factorscope.hpp"
#include "cxr/image_io.hpp"

namespace cxr {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string history_checksum(const std::string& history_text) {
  return to_hex(fnv1a64(history_text));
}

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "usage"; }
};

enum class LogLevel { error, warn, info, debug };

/// key=value records, one per line.
class Logger {
 public:
  Logger(std::ostream& sink, LogLevel level) : sink_(sink), level_(level) {}

  void attach(const fs::path& file) { file_.open(file, std::ios::app); }

  void log(LogLevel level, const std::string& event, const std::string& fields = "") {
    if (level > level_) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::string line = std::string("level=") + names[int(level)] + " event=" + event;
    if (!fields.empty()) line += " " + fields;
    sink_ << line << "\n";
    if (file_) file_ << line << "\n";
  }
  void info(const std::string& e, const std::string& f = "") { log(LogLevel::info, e, f); }
  void warn(const std::string& e, const std::string& f = "") { log(LogLevel::warn, e, f); }

 private:
  std::ostream& sink_;
  LogLevel level_;
  std::ofstream file_;
};

/// Exclusive `.lock` in an output directory, removed on scope exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw IoError("output directory '" + dir.string() + "' is locked by another run");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void refuse_clobber(const fs::path& dir, const std::vector<std::string>& files, bool overwrite) {
  if (overwrite) return;
  for (const auto& f : files)
    if (fs::exists(dir / f))
      throw IoError("'" + (dir / f).string() + "' exists; pass --overwrite to replace it");
}

void write_snapshot(const fs::path& dir, const std::string& command, const ojson& options) {
  ojson j;
  j["command"] = command;
  j["options"] = options;
  write_text_file(dir / (command + ".config.json"), j.dump(2) + "\n");
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::pair<std::string, std::string> split_assignment_arg(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == arg.size())
    throw UsageError("expected <source>=<path>, got '" + arg + "'");
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

// Global options shared by every command.
struct Globals {
  std::uint64_t seed = 0;
  std::string data_root;
  std::string log_level = "info";
};

LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  throw UsageError("unknown log level '" + s + "'");
}

// ---------------------------------------------------------------- prepare-data

struct PrepareArgs {
  std::string sources_dir;
  std::vector<std::string> sources;
  std::vector<std::string> schemas;
  std::string out;
  std::size_t test_positive = 200;
  std::size_t test_negative = 200;
  std::size_t test_no_pneumonia = 100;
  double val_fraction = kDefaultValFraction;
  bool overwrite = false;
};

fs::path sidecar(const fs::path& manifest, const std::string& suffix) {
  return manifest.string() + suffix;
}

int run_prepare(const PrepareArgs& a, const Globals& g, std::ostream& out, Logger& log) {
  std::map<std::string, std::string> schema_files;
  std::vector<std::pair<std::string, std::string>> sources;
  if (!a.sources_dir.empty()) {
    fs::path dir = a.sources_dir;
    if (dir.is_relative() && !g.data_root.empty()) dir = fs::path(g.data_root) / dir;
    if (!fs::is_directory(dir)) throw IoError("sources directory '" + dir.string() + "' not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string id = validate_source_id(f.stem().string());
      sources.emplace_back(id, f.string());
      const fs::path schema = f.parent_path() / (f.stem().string() + ".schema");
      if (fs::exists(schema)) schema_files[id] = schema.string();
    }
  }
  for (const auto& s : a.sources) sources.push_back(split_assignment_arg(s));
  for (const auto& s : a.schemas) schema_files[split_assignment_arg(s).first] = split_assignment_arg(s).second;
  if (sources.empty()) throw UsageError("no sources: give --sources <dir> or --source <id>=<csv>");
  for (const auto& [id, path] : schema_files) {
    bool used = false;
    for (const auto& s : sources) used = used || s.first == id;
    if (!used) throw UsageError("--schema given for unknown source '" + id + "'");
  }
  if (!(a.val_fraction >= 0.0 && a.val_fraction < 1.0))
    throw UsageError("--val-fraction must be in [0, 1)");
  if (a.test_no_pneumonia > a.test_negative)
    throw UsageError("--test-no-pneumonia-images exceeds --test-neg-images");

  const fs::path manifest_path = a.out;
  const fs::path dir = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
  ensure_directory(dir);
  DirLock lock(dir);
  const std::string name = manifest_path.filename().string();
  refuse_clobber(dir, {name, name + ".summary.txt"}, a.overwrite);

  ojson opts;
  opts["sources_dir"] = a.sources_dir;
  opts["sources"] = ojson::array();
  for (const auto& [id, path] : sources) opts["sources"].push_back(id + "=" + path);
  opts["schemas"] = schema_files;
  opts["out"] = a.out;
  opts["test_pos_images"] = a.test_positive;
  opts["test_neg_images"] = a.test_negative;
  opts["test_no_pneumonia_images"] = a.test_no_pneumonia;
  opts["val_fraction"] = a.val_fraction;
  opts["seed"] = g.seed;
  write_snapshot(dir, "prepare-data", opts);

  std::vector<std::vector<ImageRecord>> per_source;
  std::string rejections = "source,line,image_id,reason\n";
  for (const auto& [id, path] : sources) {
    fs::path p = path;
    if (p.is_relative() && !g.data_root.empty() && !fs::exists(p)) p = fs::path(g.data_root) / p;
    const auto it = schema_files.find(id);
    const ColumnSchema schema =
        it == schema_files.end() ? ColumnSchema::canonical() : ColumnSchema::from_file(it->second);
    IngestResult r = ingest_source(p, id, schema);
    log.info("ingest", "source=" + id + " records=" + std::to_string(r.records.size()) +
                           " rejected=" + std::to_string(r.rejections.size()));
    for (const auto& rej : r.rejections)
      rejections += csv::quote(id) + "," + std::to_string(rej.line) + "," +
                    csv::quote(rej.image_id) + "," + csv::quote(rej.reason) + "\n";
    per_source.push_back(std::move(r.records));
  }
  UnifyResult u = unify(per_source);
  for (const auto& c : u.conflicts) log.warn("conflict", "detail=\"" + c + "\"");

  TestTargets targets;
  targets.positive_images = a.test_positive;
  targets.negative_images = a.test_negative;
  targets.negative_no_pneumonia_images =
      a.test_no_pneumonia == 0 ? std::nullopt : std::optional<std::size_t>(a.test_no_pneumonia);
  DatasetManifest m = split_patient_level(std::move(u.manifest), targets, a.val_fraction, g.seed);

  write_manifest(manifest_path, m);
  write_text_file(sidecar(manifest_path, ".summary.txt"), summary_key_values(m));
  write_text_file(sidecar(manifest_path, ".rejections.csv"), rejections);
  write_text_file(sidecar(manifest_path, ".distribution.csv"), distribution_report(m).to_csv());
  write_text_file(sidecar(manifest_path, ".demographics.txt"),
                  render_demographics(demographic_summary(m)));
  log.info("prepared", "images=" + std::to_string(m.size()) + " manifest=" + manifest_path.string());
  out << "prepared " << m.size() << " images into " << manifest_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string manifest;
  std::string spec = "cxr2-tiny";
  double lr = 1e-5;
  int batch_size = 8;
  int epochs = 40;
  int patience = 5;
  bool no_augment = false;
  std::string out;
  bool overwrite = false;
};

fs::path data_root_for(const Globals& g, const fs::path& manifest) {
  if (!g.data_root.empty()) return g.data_root;
  return manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
}

PreprocessConfig preprocess_for(const ArchSpec& spec) {
  if (spec.input.channels != 1 || spec.input.height != spec.input.width)
    throw ArgumentError("model input must be single-channel and square, got " +
                        to_string(spec.input));
  PreprocessConfig cfg;
  cfg.side = spec.input.height;
  return cfg;
}

int run_train(const TrainArgs& a, const Globals& g, std::ostream& out, Logger& log) {
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.batch_size = a.batch_size;
  cfg.epochs = a.epochs;
  cfg.patience = a.patience;
  cfg.seed = g.seed;
  if (!a.no_augment) {
    AugmentConfig aug;
    aug.seed = g.seed;
    cfg.augment = aug;
  }
  cfg.validate();
  const ArchSpec spec = resolve_spec(a.spec);
  const DatasetManifest manifest = read_manifest(a.manifest);

  const fs::path dir = a.out;
  ensure_directory(dir);
  DirLock lock(dir);
  refuse_clobber(dir, {run_files::kHistory, run_files::kModel}, a.overwrite);
  if (a.overwrite) {
    std::error_code ec;
    fs::remove_all(dir / "checkpoints", ec);
    fs::remove(dir / run_files::kLog, ec);
  }
  log.attach(dir / run_files::kLog);

  ojson opts;
  opts["manifest"] = a.manifest;
  opts["spec"] = a.spec;
  opts["spec_hash"] = to_hex(spec_hash(spec));
  opts["lr"] = a.lr;
  opts["batch_size"] = a.batch_size;
  opts["epochs"] = a.epochs;
  opts["patience"] = a.patience;
  opts["augment"] = !a.no_augment;
  opts["seed"] = g.seed;
  opts["data_root"] = g.data_root;
  write_snapshot(dir, "train", opts);
  write_text_file(dir / run_files::kSpec, spec_to_json(spec) + "\n");
  write_manifest(dir / run_files::kManifest, manifest);

  cfg.checkpoint_dir = dir / "checkpoints";
  Model model = build_model(spec, g.seed);
  FileImageLoader loader(data_root_for(g, a.manifest), preprocess_for(spec));
  log.info("train_start", "params=" + std::to_string(model.parameter_count()) +
                              " train=" + std::to_string(manifest.records_in(Split::train).size()) +
                              " val=" + std::to_string(manifest.records_in(Split::val).size()));
  TrainHooks hooks;
  hooks.on_epoch_end = [&](const EpochRecord& e) {
    log.info("epoch", "epoch=" + std::to_string(e.epoch) + " train_loss=" + fmt(e.train_loss) +
                          " val_accuracy=" + fmt(e.val_accuracy) +
                          " steps=" + std::to_string(e.steps));
  };
  const TrainHistory history = train(model, manifest, ImageLoader(loader), cfg, hooks);
  const std::string hist = history_to_jsonl(history);
  write_text_file(dir / run_files::kHistory, hist);
  write_text_file(dir / run_files::kHistoryChecksum, history_checksum(hist) + "\n");
  save_checkpoint(dir / run_files::kModel, model);
  log.info("train_done", "best_epoch=" + std::to_string(history.best_epoch) +
                             " best_val_accuracy=" + fmt(history.best().val_accuracy) +
                             " epochs_run=" + std::to_string(history.epochs.size()));
  out << "best epoch " << history.best_epoch << " val accuracy "
      << fmt(history.best().val_accuracy) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string manifest;
  std::string predictions;
  std::string split = "test";
  double threshold = kDefaultThreshold;
  std::string format = "table";
  std::string out;
  bool overwrite = false;
};

struct Prediction {
  std::string image_id;
  int label = 0;
  double probability = 0.0;
};

std::vector<Prediction> read_predictions(const fs::path& path) {
  const auto rows = csv::lines(read_text_file(path));
  if (rows.empty()) throw SchemaError("'" + path.string() + "' is empty");
  const auto header = csv::split_row(rows[0]);
  auto col = [&](const char* name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == name) return i;
    throw SchemaError("'" + path.string() + "' lacks a '" + name + "' column");
  };
  const std::size_t ci = col("image_id"), cl = col("label"), cp = col("probability");
  std::vector<Prediction> preds;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (trim(rows[i]).empty()) continue;
    const auto f = csv::split_row(rows[i]);
    if (f.size() != header.size())
      throw SchemaError("'" + path.string() + "' line " + std::to_string(i + 1) +
                        ": field count mismatch");
    Prediction p;
    p.image_id = f[ci];
    const std::string lab = to_lower(trim(f[cl]));
    if (lab == "1" || lab == "positive") {
      p.label = 1;
    } else if (lab == "0" || lab == "negative") {
      p.label = 0;
    } else {
      throw SchemaError("'" + path.string() + "' line " + std::to_string(i + 1) +
                        ": bad label '" + f[cl] + "'");
    }
    try {
      p.probability = std::stod(f[cp]);
    } catch (const std::exception&) {
      throw SchemaError("'" + path.string() + "' line " + std::to_string(i + 1) +
                        ": bad probability '" + f[cp] + "'");
    }
    preds.push_back(p);
  }
  return preds;
}

int run_evaluate(const EvaluateArgs& a, const Globals& g, std::ostream& out, Logger& log) {
  const ReportFormat format = parse_report_format(a.format);
  if (!(a.threshold >= 0.0 && a.threshold <= 1.0)) throw UsageError("--threshold must be in [0, 1]");
  const bool from_file = !a.predictions.empty();
  if (from_file == !a.checkpoint.empty())
    throw UsageError("give exactly one of --predictions or --checkpoint");
  if (!from_file && a.manifest.empty()) throw UsageError("--checkpoint needs --manifest");

  std::vector<Prediction> preds;
  if (from_file) {
    preds = read_predictions(a.predictions);
  } else {
    const Split split = parse_split(a.split);
    const Model model = load_checkpoint(a.checkpoint);
    const DatasetManifest manifest = read_manifest(a.manifest);
    FileImageLoader loader(data_root_for(g, a.manifest), preprocess_for(model.spec()));
    const auto records = manifest.records_in(split);
    if (records.empty()) throw ArgumentError("split '" + a.split + "' is empty");
    for (const ImageRecord* r : records)
      preds.push_back({r->image_id, r->label() == Label::positive ? 1 : 0,
                       double(model.predict(loader(*r)))});
  }
  std::vector<double> p;
  std::vector<int> y;
  for (const auto& x : preds) {
    p.push_back(x.probability);
    y.push_back(x.label);
  }
  const MetricsReport report = metrics_from_confusion(confusion(p, y, a.threshold), a.threshold);
  log.info("evaluate", "images=" + std::to_string(preds.size()) + " headline=\"" +
                           headline(report) + "\"");

  if (!a.out.empty()) {
    const fs::path dir = a.out;
    ensure_directory(dir);
    DirLock lock(dir);
    refuse_clobber(dir, {run_files::kMetrics, run_files::kPredictions}, a.overwrite);
    ojson opts;
    opts["checkpoint"] = a.checkpoint;
    opts["manifest"] = a.manifest;
    opts["predictions"] = a.predictions;
    opts["split"] = a.split;
    opts["threshold"] = a.threshold;
    opts["seed"] = g.seed;
    write_snapshot(dir, "evaluate", opts);
    write_text_file(dir / run_files::kMetrics, render_report(report, ReportFormat::json));
    std::ostringstream log_csv;
    log_csv << std::setprecision(9) << "image_id,label,probability,predicted\n";
    for (const auto& x : preds)
      log_csv << csv::quote(x.image_id) << "," << x.label << "," << x.probability << ","
              << (x.probability >= a.threshold ? 1 : 0) << "\n";
    write_text_file(dir / run_files::kPredictions, log_csv.str());
  }
  out << render_report(report, format);
  return kExitOk;
}

// ---------------------------------------------------------------- explain

struct ExplainArgs {
  std::string checkpoint;
  std::string image;
  int cells = kDefaultCells;
  double drop_threshold = kDefaultDropThreshold;
  bool preprocessed = false;
  std::string out_dir;
  bool overwrite = false;
};

int run_explain(const ExplainArgs& a, const Globals& g, std::ostream& out, Logger& log) {
  const Model model = load_checkpoint(a.checkpoint);
  ImageBuffer img = read_image(a.image);
  if (a.preprocessed) {
    img = normalize(img);
  } else {
    img = preprocess(img, preprocess_for(model.spec()));
  }
  const fs::path dir = a.out_dir;
  ensure_directory(dir);
  DirLock lock(dir);
  const std::string stem = fs::path(a.image).stem().string();
  const std::string mask_file = stem + ".mask.txt";
  const std::string png_file = stem + ".overlay.png";
  refuse_clobber(dir, {mask_file, png_file}, a.overwrite);
  ojson opts;
  opts["checkpoint"] = a.checkpoint;
  opts["image"] = a.image;
  opts["cells"] = a.cells;
  opts["drop_threshold"] = a.drop_threshold;
  opts["preprocessed"] = a.preprocessed;
  opts["seed"] = g.seed;
  write_snapshot(dir, "explain", opts);
  const CriticalFactorMask mask = identify_critical_factors(model, img, a.cells, a.drop_threshold);
  write_text_file(dir / mask_file, mask_to_text(mask));
  render_overlay(img, mask, dir / png_file);
  log.info("explain", "image=" + stem + " selected=" + std::to_string(mask.selected()) +
                          " flipped=" + std::to_string(mask.decision_flipped ? 1 : 0));
  out << "critical cells " << mask.selected() << " of " << a.cells * a.cells << ", score "
      << fmt(mask.base_score) << " -> " << fmt(mask.final_score)
      << (mask.decision_flipped ? " (decision flipped)" : "") << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- complexity

struct ComplexityArgs {
  std::string spec = "cxr2-tiny";
  std::string input;
  std::string format = "table";
};

int run_complexity(const ComplexityArgs& a, std::ostream& out) {
  const ReportFormat format = parse_report_format(a.format);
  const ArchSpec spec = resolve_spec(a.spec);
  const Shape3 input = a.input.empty() ? spec.input : parse_input_shape(a.input);
  out << render_complexity(count_macs(spec, input), format);
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------- report

RunReport build_report(const fs::path& run_dir) {
  RunReport r;
  if (!fs::is_directory(run_dir)) {
    r.gaps.push_back("run directory '" + run_dir.string() + "' does not exist");
    r.gaps.push_back("dataset");
    r.gaps.push_back("history");
    r.gaps.push_back("metrics");
    r.gaps.push_back("constraints");
    r.gaps.push_back("complexity");
    return r;
  }
  auto attempt = [&](const char* section, const fs::path& file, auto&& fn) {
    if (!fs::exists(file)) {
      r.gaps.push_back(std::string(section) + ": missing " + file.filename().string());
      return;
    }
    try {
      fn();
    } catch (const std::exception& e) {
      r.gaps.push_back(std::string(section) + ": unreadable " + file.filename().string() + " (" +
                       e.what() + ")");
    }
  };
  attempt("dataset", run_dir / run_files::kManifest,
          [&] { r.dataset = distribution_report(read_manifest(run_dir / run_files::kManifest)); });
  attempt("history", run_dir / run_files::kHistory, [&] {
    const std::string text = read_text_file(run_dir / run_files::kHistory);
    TrainHistory h = history_from_jsonl(text);
    // Best epoch from the raw records: highest val accuracy, earliest on ties.
    h.best_epoch = 0;
    double best = -1.0;
    for (const auto& e : h.epochs)
      if (e.val_accuracy > best) {
        best = e.val_accuracy;
        h.best_epoch = e.epoch;
      }
    r.history = std::move(h);
    const fs::path sum = run_dir / run_files::kHistoryChecksum;
    if (!fs::exists(sum)) {
      r.warnings.push_back("history checksum file missing");
    } else if (trim(read_text_file(sum)) != history_checksum(text)) {
      r.warnings.push_back("history checksum mismatch: history.jsonl was modified");
    }
  });
  attempt("metrics", run_dir / run_files::kMetrics, [&] {
    const MetricsReport stored = report_from_json(read_text_file(run_dir / run_files::kMetrics));
    r.metrics = metrics_from_confusion(stored.matrix, stored.threshold);
    if (!(*r.metrics == stored))
      r.warnings.push_back("metrics.json values disagree with its confusion matrix");
    r.verdict = check_constraints(*r.metrics);
  });
  if (!r.metrics) r.gaps.push_back("constraints: no metrics");
  attempt("complexity", run_dir / run_files::kSpec,
          [&] { r.complexity = analyze(load_spec(run_dir / run_files::kSpec)); });
  return r;
}

std::string render_run_report(const RunReport& r, ReportFormat format) {
  if (format == ReportFormat::json) {
    ojson j;
    if (r.dataset) {
      j["dataset"] = ojson::array();
      for (const auto& row : r.dataset->rows)
        j["dataset"].push_back({{"split", row.split}, {"group", row.group},
                                {"images", row.images}, {"patients", row.patients}});
    } else {
      j["dataset"] = nullptr;
    }
    if (r.history) {
      j["history"] = {{"best_epoch", r.history->best_epoch},
                      {"epochs", ojson::parse("[" + [&] {
                         std::string s;
                         for (const auto& line : csv::lines(history_to_jsonl(*r.history)))
                           if (!line.empty()) s += (s.empty() ? "" : ",") + line;
                         return s;
                       }() + "]")}};
    } else {
      j["history"] = nullptr;
    }
    j["metrics"] = r.metrics ? ojson::parse(render_report(*r.metrics, ReportFormat::json)) : ojson();
    if (r.verdict) {
      j["constraints"] = {{"passed", r.verdict->passed}, {"checks", ojson::array()}};
      for (const auto& c : r.verdict->checks)
        j["constraints"]["checks"].push_back(
            {{"metric", c.metric},
             {"value", c.value ? ojson(*c.value) : ojson()},
             {"minimum", c.minimum},
             {"passed", c.passed}});
    } else {
      j["constraints"] = nullptr;
    }
    j["complexity"] = r.complexity ? ojson::parse(render_complexity(*r.complexity, ReportFormat::json))
                                   : ojson();
    j["gaps"] = r.gaps;
    j["warnings"] = r.warnings;
    return j.dump(2) + "\n";
  }
  std::ostringstream out;
  for (const auto& w : r.warnings) out << "WARNING: " << w << "\n";
  out << "== dataset\n";
  if (r.dataset) {
    out << r.dataset->to_csv();
  } else {
    out << "(gap)\n";
  }
  out << "== history\n";
  if (r.history) {
    out << "epoch  train_loss  val_accuracy\n";
    for (const auto& e : r.history->epochs)
      out << std::setw(5) << e.epoch << "  " << std::setw(10) << fmt(e.train_loss) << "  "
          << std::setw(12) << fmt(e.val_accuracy) << (e.epoch == r.history->best_epoch ? "  *" : "")
          << "\n";
    out << "best epoch " << r.history->best_epoch << "\n";
  } else {
    out << "(gap)\n";
  }
  out << "== metrics\n";
  out << (r.metrics ? render_report(*r.metrics, ReportFormat::table) : std::string("(gap)\n"));
  out << "== constraints\n";
  out << (r.verdict ? render_verdict(*r.verdict) : std::string("(gap)\n"));
  out << "== complexity\n";
  if (r.complexity) {
    out << "parameters " << r.complexity->total_params << "\nMACs " << r.complexity->total_macs
        << "\n";
  } else {
    out << "(gap)\n";
  }
  if (!r.gaps.empty()) {
    out << "== gaps\n";
    for (const auto& gap : r.gaps) out << gap << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------- dispatch

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Chest X-ray screening pipeline: data preparation, training, evaluation, "
               "explanation and cost accounting.",
               "cxrnet"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
  app.add_option("--data-root", g.data_root, "base directory for relative image paths");
  app.add_option("--log-level", g.log_level, "error|warn|info|debug")->capture_default_str();

  PrepareArgs pa;
  auto* prep = app.add_subcommand("prepare-data", "ingest sources, unify, split, summarize");
  prep->add_option("--sources", pa.sources_dir,
                   "directory of <source>.csv metadata files (optional <source>.schema)");
  prep->add_option("--source", pa.sources, "<id>=<metadata csv>, repeatable");
  prep->add_option("--schema", pa.schemas, "<id>=<column schema file>, repeatable");
  prep->add_option("--out", pa.out, "output manifest path")->required();
  prep->add_option("--test-pos-images", pa.test_positive, "positive test images")
      ->capture_default_str();
  prep->add_option("--test-neg-images", pa.test_negative, "negative test images")
      ->capture_default_str();
  prep->add_option("--test-no-pneumonia-images", pa.test_no_pneumonia,
                   "no-pneumonia share of the negative test images (0 = unconstrained)")
      ->capture_default_str();
  prep->add_option("--val-fraction", pa.val_fraction, "validation share of non-test patients")
      ->capture_default_str();
  prep->add_flag("--overwrite", pa.overwrite, "replace existing outputs");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model with batch re-balancing");
  tr->add_option("--manifest", ta.manifest, "split manifest")->required();
  tr->add_option("--spec", ta.spec, "built-in spec name or JSON file")->capture_default_str();
  tr->add_option("--lr", ta.lr, "learning rate")->capture_default_str();
  tr->add_option("--batch-size", ta.batch_size, "even batch size")->capture_default_str();
  tr->add_option("--epochs", ta.epochs, "maximum epochs")->capture_default_str();
  tr->add_option("--patience", ta.patience, "early stopping patience")->capture_default_str();
  tr->add_flag("--no-augment", ta.no_augment, "disable augmentation");
  tr->add_option("--out", ta.out, "run directory")->required();
  tr->add_flag("--overwrite", ta.overwrite, "replace an existing run");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "sensitivity / PPV / accuracy and confusion matrix");
  ev->add_option("--checkpoint", ea.checkpoint, "model checkpoint");
  ev->add_option("--manifest", ea.manifest, "split manifest");
  ev->add_option("--predictions", ea.predictions, "CSV with image_id,label,probability");
  ev->add_option("--split", ea.split, "train|val|test")->capture_default_str();
  ev->add_option("--threshold", ea.threshold, "positive iff probability >= threshold")
      ->capture_default_str();
  ev->add_option("--format", ea.format, "table|json")->capture_default_str();
  ev->add_option("--out", ea.out, "directory for metrics.json and predictions.csv");
  ev->add_flag("--overwrite", ea.overwrite, "replace existing outputs");

  ExplainArgs xa;
  auto* ex = app.add_subcommand("explain", "critical-factor mask and red overlay for one image");
  ex->add_option("--checkpoint", xa.checkpoint, "model checkpoint")->required();
  ex->add_option("--image", xa.image, "PNG or JPEG image")->required();
  ex->add_option("--cells", xa.cells, "grid cells per side")->capture_default_str();
  ex->add_option("--drop-threshold", xa.drop_threshold,
                 "stop once the score falls to this fraction of the original")
      ->capture_default_str();
  ex->add_flag("--preprocessed", xa.preprocessed, "image is already at model resolution");
  ex->add_option("--out-dir", xa.out_dir, "output directory")->required();
  ex->add_flag("--overwrite", xa.overwrite, "replace existing outputs");

  ComplexityArgs ca;
  auto* cx = app.add_subcommand("complexity", "parameter and MAC counts");
  cx->add_option("--spec", ca.spec, "built-in spec name or JSON file")->capture_default_str();
  cx->add_option("--input", ca.input, "HxW or CxHxW (default: the spec's input)");
  cx->add_option("--format", ca.format, "table|json")->capture_default_str();

  std::string run_dir, report_format = "table";
  auto* rp = app.add_subcommand("report", "consolidated summary of a run directory");
  rp->add_option("--run-dir", run_dir, "run directory")->required();
  rp->add_option("--format", report_format, "table|json")->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == args[0];
    if (!known) {
      err << app.help();
      err << "error: code=usage message=unknown command '" << args[0] << "'\n";
      return kExitUsage;
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << app.help();
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=usage message=" << msg << "\n";
    return kExitUsage;
  }

  try {
    Logger log(err, parse_log_level(g.log_level));
    if (*prep) return run_prepare(pa, g, out, log);
    if (*tr) return run_train(ta, g, out, log);
    if (*ev) return run_evaluate(ea, g, out, log);
    if (*ex) return run_explain(xa, g, out, log);
    if (*cx) return run_complexity(ca, out);
    if (*rp) {
      const ReportFormat f = parse_report_format(report_format);
      const RunReport r = build_report(run_dir);
      out << render_run_report(r, f);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: code=" << e.code() << " message=" << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=" << e.code() << " message=" << msg << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=internal message=" << msg << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace cxr
