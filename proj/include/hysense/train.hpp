#pragma once

// Run configuration, the training loop, cross-validation and evaluation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hysense/checkpoint.hpp"
#include "hysense/data.hpp"
#include "hysense/layers.hpp"
#include "hysense/metrics.hpp"
#include "hysense/network.hpp"
#include "hysense/optimizer.hpp"
#include "hysense/phantom.hpp"

namespace hysense {

struct TransferConfig {
  std::string checkpoint;  // empty: train from scratch
  std::vector<std::string> freeze;
};

struct RunConfig {
  ModelKind model = ModelKind::proposed;
  ModelConfig network;
  std::size_t epochs = 150;
  std::size_t batch_size = 4;
  AdaBoundConfig optimizer;  // lr1 0.001, lr2 0.01
  std::uint64_t seed = 0;
  std::string dataset;  // manifest.csv path
  std::size_t image_size = 224;
  std::size_t folds = 5;
  double val_fraction = 0.2;
  bool augment = true;
  AugmentConfig augmentation;
  TransferConfig transfer;
  std::string out = "runs";
  GenConfig generator;

  static RunConfig paper() { return RunConfig{}; }

  // 64x64 images, widths 16/32/64, 240 samples, 30 epochs.
  static RunConfig desk() {
    RunConfig c;
    c.network = ModelConfig::desk();
    c.image_size = 64;
    c.epochs = 30;
    c.generator.counts = {60, 60, 60, 60};
    c.generator.image_size = 64;
    return c;
  }

  /// Propagates image_size into the network and augmentation targets and
  /// checks every field.
  void finalize() {
    network.input_height = network.input_width = image_size;
    augmentation.target_h = augmentation.target_w = image_size;
    validate();
  }

  void validate() const {
    if (image_size < 1) throw ConfigError("image_size must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (folds < 2) throw ConfigError("cross-validation needs folds >= 2");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in (0, 1)");
    optimizer.validate();
    augmentation.validate();
    network.validate(model);
  }
};

inline std::string to_string(BoundMode m) {
  switch (m) {
    case BoundMode::adam_limit: return "adam_limit";
    case BoundMode::sgd_limit: return "sgd_limit";
    case BoundMode::adabound: break;
  }
  return "adabound";
}

inline BoundMode parse_bound_mode(const std::string& s) {
  if (s == "adabound") return BoundMode::adabound;
  if (s == "adam_limit") return BoundMode::adam_limit;
  if (s == "sgd_limit") return BoundMode::sgd_limit;
  throw ConfigError("unknown bound_mode '" + s + "'");
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = to_string(c.model);
  j["network"] = c.network;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr1"] = c.optimizer.lr1;
  j["lr2"] = c.optimizer.lr2;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["epsilon"] = c.optimizer.epsilon;
  j["bound_mode"] = to_string(c.optimizer.mode);
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["image_size"] = c.image_size;
  j["folds"] = c.folds;
  j["val_fraction"] = c.val_fraction;
  j["augment"] = c.augment;
  const auto& a = c.augmentation;
  j["augmentation"] = {{"crop_area", {a.crop_area_min, a.crop_area_max}},
                       {"rotation_deg", a.rotation_deg},
                       {"p_crop", a.p_crop},
                       {"p_hflip", a.p_hflip},
                       {"p_vflip", a.p_vflip},
                       {"p_rotate", a.p_rotate}};
  j["transfer"] = {{"checkpoint", c.transfer.checkpoint}, {"freeze", c.transfer.freeze}};
  j["out"] = c.out;
  const auto& g = c.generator;
  j["generator"] = {{"counts", g.counts},
                    {"image_size", g.image_size},
                    {"pixel_pitch_um", g.pixel_pitch_um},
                    {"partial_fraction", g.partial_fraction},
                    {"imprint_scales", g.imprint_scales},
                    {"light_azimuths_deg", g.render.light_azimuths_deg},
                    {"light_elevation_deg", g.render.light_elevation_deg},
                    {"ambient", g.render.ambient},
                    {"diffuse_gain", g.render.diffuse_gain}};
  return j;
}

/// Overlays the keys present in `j` onto `c`; unknown keys are rejected.
inline void apply_run_config_json(const nlohmann::json& j, RunConfig& c) {
  static const std::vector<std::string> known{
      "model", "network", "epochs", "batch_size", "lr1", "lr2", "beta1", "beta2", "epsilon",
      "bound_mode", "seed", "dataset", "image_size", "folds", "val_fraction", "augment",
      "augmentation", "transfer", "out", "generator"};
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown run config key '" + key + "'");
  try {
    if (j.contains("model")) c.model = parse_model_kind(j["model"].get<std::string>());
    if (j.contains("network")) from_json(j["network"], c.network);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer.lr1 = j.value("lr1", c.optimizer.lr1);
    c.optimizer.lr2 = j.value("lr2", c.optimizer.lr2);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = j.value("epsilon", c.optimizer.epsilon);
    if (j.contains("bound_mode")) c.optimizer.mode = parse_bound_mode(j["bound_mode"].get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.dataset = j.value("dataset", c.dataset);
    c.image_size = j.value("image_size", c.image_size);
    c.folds = j.value("folds", c.folds);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.augment = j.value("augment", c.augment);
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      auto& t = c.augmentation;
      if (a.contains("crop_area")) {
        t.crop_area_min = a["crop_area"].at(0).get<double>();
        t.crop_area_max = a["crop_area"].at(1).get<double>();
      }
      t.rotation_deg = a.value("rotation_deg", t.rotation_deg);
      t.p_crop = a.value("p_crop", t.p_crop);
      t.p_hflip = a.value("p_hflip", t.p_hflip);
      t.p_vflip = a.value("p_vflip", t.p_vflip);
      t.p_rotate = a.value("p_rotate", t.p_rotate);
    }
    if (j.contains("transfer")) {
      c.transfer.checkpoint = j["transfer"].value("checkpoint", c.transfer.checkpoint);
      c.transfer.freeze = j["transfer"].value("freeze", c.transfer.freeze);
    }
    c.out = j.value("out", c.out);
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      auto& t = c.generator;
      t.counts = g.value("counts", t.counts);
      t.image_size = g.value("image_size", t.image_size);
      t.pixel_pitch_um = g.value("pixel_pitch_um", t.pixel_pitch_um);
      t.partial_fraction = g.value("partial_fraction", t.partial_fraction);
      t.imprint_scales = g.value("imprint_scales", t.imprint_scales);
      t.render.light_azimuths_deg = g.value("light_azimuths_deg", t.render.light_azimuths_deg);
      t.render.light_elevation_deg = g.value("light_elevation_deg", t.render.light_elevation_deg);
      t.render.ambient = g.value("ambient", t.render.ambient);
      t.render.diffuse_gain = g.value("diffuse_gain", t.render.diffuse_gain);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  apply_run_config_json(j, base);
  return base;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
  std::vector<double> probs;  // (N, C) row-major
  std::vector<int> labels;
};

/// Inference-mode pass over `indices` (no augmentation).
inline Evaluation evaluate_model(Model<float>& model, const std::vector<Sample>& samples,
                                 const std::vector<std::size_t>& indices, std::size_t batch_size = 16) {
  Evaluation ev;
  if (indices.empty()) return ev;
  BatchIterator it(samples, indices, batch_size, 0);
  std::size_t correct = 0;
  double loss_sum = 0;
  const std::size_t C = model.config().class_count;
  while (auto b = it.next()) {
    const auto logits = model.forward(b->images, Mode::inference);
    const auto loss = softmax_cross_entropy(logits, b->labels);
    loss_sum += loss.loss * static_cast<double>(b->labels.size());
    const auto p = softmax(Tensor<double>::cast(logits));
    for (std::size_t n = 0; n < b->labels.size(); ++n) {
      auto row = p.data().subspan(n * C, C);
      ev.probs.insert(ev.probs.end(), row.begin(), row.end());
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      if (pred == b->labels[n]) ++correct;
      ev.labels.push_back(b->labels[n]);
    }
  }
  ev.loss = loss_sum / static_cast<double>(indices.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return ev;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,train_loss,train_acc,val_loss,val_acc";

inline std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << kTrainLogHeader << '\n' << std::setprecision(17);
  for (const auto& e : log)
    os << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_loss << ',' << e.val_acc << '\n';
  return os.str();
}

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // 0: no epoch completed, the initial weights
  double best_val_acc = 0;
  Checkpoint best;
  std::optional<LoadReport> transfer;
};

struct TrainOptions {
  std::size_t fold = 0;
  std::filesystem::path out_dir;  // empty: nothing written
  std::ostream* progress = nullptr;
};

/// Builds the configured model (transfer-loading if requested) and trains it.
/// Each epoch shuffles and augments the training split with a child seed of
/// (seed, fold, epoch), takes one AdaBound step per batch and evaluates the
/// validation split in inference mode. The best-validation checkpoint (ties
/// keep the earlier epoch) is restored into `model` before returning.
inline TrainResult train_model(const RunConfig& cfg, Model<float>& model, const std::vector<Sample>& samples,
                               const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                               const TrainOptions& opt = {}) {
  TrainResult res;
  if (!opt.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(opt.out_dir, ec);
    if (!std::filesystem::is_directory(opt.out_dir)) throw IoError("cannot create " + opt.out_dir.string());
  }
  auto metadata = [&](std::size_t epoch, double val_acc) {
    return nlohmann::json{{"epoch", epoch}, {"seed", cfg.seed}, {"fold", opt.fold}, {"val_acc", val_acc}};
  };
  auto save_best = [&] {
    if (!opt.out_dir.empty()) write_checkpoint(res.best, opt.out_dir / "checkpoint.hysn");
  };
  auto write_log = [&] {
    if (opt.out_dir.empty()) return;
    std::ofstream out(opt.out_dir / "train_log.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write training log in " + opt.out_dir.string());
    out << train_log_csv(res.log);
  };
  res.best = make_checkpoint(model, metadata(0, 0.0));
  save_best();
  write_log();

  AdaBound<float> optimizer(cfg.optimizer);
  std::optional<AugmentConfig> aug;
  if (cfg.augment) aug = cfg.augmentation;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    BatchIterator it(samples, train_idx, cfg.batch_size, derive_seed(cfg.seed, {opt.fold, epoch}), aug);
    EpochLog e;
    e.epoch = epoch;
    std::size_t correct = 0, seen = 0, batch_no = 0;
    while (auto b = it.next()) {
      ++batch_no;
      const auto logits = model.forward(b->images, Mode::training);
      const auto loss = softmax_cross_entropy(logits, b->labels);
      if (!std::isfinite(loss.loss))
        throw NumericError("non-finite training loss at fold " + std::to_string(opt.fold) + ", epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      model.backward(loss.grad_logits);
      optimizer.step(model);
      e.train_loss += loss.loss * static_cast<double>(b->labels.size());
      for (std::size_t n = 0; n < b->labels.size(); ++n) {
        auto row = logits.data().subspan(n * logits.dim(1), logits.dim(1));
        if (std::max_element(row.begin(), row.end()) - row.begin() == b->labels[n]) ++correct;
      }
      seen += b->labels.size();
    }
    if (seen > 0) {
      e.train_loss /= static_cast<double>(seen);
      e.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    }
    const auto val = evaluate_model(model, samples, val_idx);
    e.val_loss = val.loss;
    e.val_acc = val.accuracy;
    res.log.push_back(e);
    if (res.best_epoch == 0 || e.val_acc > res.best_val_acc) {
      res.best_epoch = epoch;
      res.best_val_acc = e.val_acc;
      res.best = make_checkpoint(model, metadata(epoch, e.val_acc));
      save_best();
    }
    write_log();
    if (opt.progress)
      *opt.progress << "fold " << opt.fold << " epoch " << epoch << "/" << cfg.epochs << std::fixed
                    << std::setprecision(4) << " train_loss " << e.train_loss << " train_acc " << e.train_acc
                    << " val_loss " << e.val_loss << " val_acc " << e.val_acc << std::defaultfloat << "\n";
  }
  apply_checkpoint(res.best, model);
  return res;
}

/// Model construction shared by train/xval/eval: fresh weights from the run
/// seed, then an optional transfer load with freezing.
inline Model<float> prepare_model(const RunConfig& cfg, std::size_t fold, std::optional<LoadReport>* report = nullptr) {
  auto model = build_model<float>(cfg.model, cfg.network, derive_seed(cfg.seed, {fold, 0}));
  if (!cfg.transfer.checkpoint.empty()) {
    LoadOptions lo;
    lo.mode = LoadMode::transfer;
    lo.freeze = cfg.transfer.freeze;
    auto r = load_checkpoint(cfg.transfer.checkpoint, model, lo);
    if (report) *report = std::move(r);
  } else if (!cfg.transfer.freeze.empty()) {
    model.freeze(cfg.transfer.freeze);
  }
  return model;
}

inline std::vector<Sample> load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("no dataset manifest configured");
  if (!std::filesystem::exists(cfg.dataset)) throw DataError("dataset manifest not found: " + cfg.dataset);
  return load_samples(read_manifest(cfg.dataset), cfg.image_size, cfg.image_size);
}

inline std::vector<int> sample_labels(const std::vector<Sample>& samples) {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

struct FoldOutcome {
  TrainResult train;
  MetricsReport test;
};

/// Trains on a fold's train/val split and scores its held-out test split with
/// the best checkpoint.
inline FoldOutcome run_fold(const RunConfig& cfg, const std::vector<Sample>& samples, const Fold& fold,
                            std::size_t fold_id, const std::filesystem::path& out_dir, std::ostream* progress) {
  FoldOutcome o;
  std::optional<LoadReport> transfer;
  auto model = prepare_model(cfg, fold_id, &transfer);
  o.train = train_model(cfg, model, samples, fold.train, fold.val, {fold_id, out_dir, progress});
  o.train.transfer = std::move(transfer);
  const auto ev = evaluate_model(model, samples, fold.test);
  o.test = evaluate_scores(ev.probs, ev.labels, static_cast<int>(fold_id));
  o.test.validation_accuracy = o.train.best_val_acc;
  o.test.param_count = model.param_count();
  return o;
}

struct CrossValidation {
  FoldPlan plan;
  std::vector<FoldOutcome> folds;
  std::vector<MetricsReport> reports() const {
    std::vector<MetricsReport> out;
    for (const auto& f : folds) out.push_back(f.test);
    return out;
  }
};

inline CrossValidation cross_validate(const RunConfig& cfg, const std::vector<Sample>& samples,
                                      const std::filesystem::path& out_dir, std::ostream* progress = nullptr) {
  if (cfg.folds < 2) throw ConfigError("cross-validation needs folds >= 2");
  CrossValidation cv;
  const auto labels = sample_labels(samples);
  cv.plan = stratified_kfold(labels, cfg.folds, cfg.seed, cfg.val_fraction);
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    try {
      cv.folds.push_back(run_fold(cfg, samples, cv.plan.folds[f], f,
                                  out_dir.empty() ? out_dir : out_dir / ("fold" + std::to_string(f)), progress));
    } catch (const NumericError& e) {
      throw NumericError("fold " + std::to_string(f) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  if (!out_dir.empty()) {
    const auto reports = cv.reports();
    emit_report(reports, out_dir, "Evaluation metrics, " + to_string(cfg.model));
  }
  return cv;
}

}  // namespace hysense
