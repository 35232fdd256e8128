// Command-line front end: gen, train, xval, eval, gradcheck, report.
//
// Settings are layered: profile defaults, then the --config JSON file, then
// individual flags. Exit codes: 0 success, 1 usage/config, 2 data/I-O,
// 3 numeric failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hysense/checkpoint.hpp"
#include "hysense/data.hpp"
#include "hysense/errors.hpp"
#include "hysense/gradcheck.hpp"
#include "hysense/metrics.hpp"
#include "hysense/phantom.hpp"
#include "hysense/train.hpp"

namespace {

using namespace hysense;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::string profile = "paper";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string model;
  std::string dataset;
  std::string transfer;
  std::string freeze;
  std::optional<std::size_t> epochs;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (c.profile == "desk") cfg = RunConfig::desk();
  else if (c.profile != "paper") throw ConfigError("unknown profile '" + c.profile + "' (desk|paper)");
  if (!c.config.empty()) cfg = load_run_config(c.config, cfg);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.generator.master_seed = *c.seed;
  }
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.model.empty()) cfg.model = parse_model_kind(c.model);
  if (!c.dataset.empty()) cfg.dataset = c.dataset;
  if (!c.transfer.empty()) cfg.transfer.checkpoint = c.transfer;
  if (!c.freeze.empty()) cfg.transfer.freeze = split_list(c.freeze);
  if (c.epochs) cfg.epochs = *c.epochs;
  cfg.finalize();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool training) {
  app->add_option("--config", c.config, "JSON run configuration");
  app->add_option("--profile", c.profile, "Default set: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--out", c.out, "Output directory");
  if (!training) return;
  app->add_option("--model", c.model, "proposed or light_resnet")
      ->check(CLI::IsMember({"proposed", "light_resnet"}));
  app->add_option("--manifest,--dataset", c.dataset, "Dataset manifest.csv");
  app->add_option("--transfer", c.transfer, "Checkpoint to transfer-load before training");
  app->add_option("--freeze", c.freeze, "Comma-separated parameter prefixes to freeze");
  app->add_option("--epochs", c.epochs, "Override the epoch count");
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

void print_confusion(std::ostream& os, const MetricsReport& r) {
  os << "normalized confusion (rows predicted, columns true)\n      A      G      O      R\n";
  for (std::size_t i = 0; i < kClassCount; ++i) {
    os << class_letter(kAllClasses[i]);
    for (std::size_t j = 0; j < kClassCount; ++j) {
      char cell[16];
      if (r.normalized.empty()) std::snprintf(cell, sizeof cell, "    n/a");
      else std::snprintf(cell, sizeof cell, " %6.3f", r.normalized[i * kClassCount + j]);
      os << cell;
    }
    os << '\n';
  }
}

int cmd_gen(const Common& c, std::optional<std::size_t> per_class, std::optional<std::size_t> size) {
  auto cfg = resolve(c);
  GenConfig g = cfg.generator;
  if (per_class) g.counts = {*per_class, *per_class, *per_class, *per_class};
  if (size) g.image_size = *size;
  const std::filesystem::path out = c.out.empty() ? std::filesystem::path(cfg.out) / "dataset" : std::filesystem::path(c.out);
  const auto m = generate_dataset(g, out);
  std::map<std::string, std::size_t> by_class, by_material, by_orientation;
  for (const auto& r : m.rows) {
    ++by_class[std::string(1, class_letter(r.kudo))];
    ++by_material[material_name(r.material)];
    ++by_orientation[orientation_name(r.orientation)];
  }
  std::cout << "wrote " << m.rows.size() << " images (" << g.image_size << "x" << g.image_size << ") to "
            << out.string() << "\n";
  for (const auto* group : {&by_class, &by_material, &by_orientation}) {
    for (const auto& [k, v] : *group) std::cout << "  " << k << ": " << v;
    std::cout << "\n";
  }
  return kOk;
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c);
  const auto samples = load_dataset(cfg);
  const auto plan = stratified_kfold(sample_labels(samples), cfg.folds, cfg.seed, cfg.val_fraction);
  const std::filesystem::path out = cfg.out;
  std::filesystem::create_directories(out);
  write_text(out / "run_config.json", run_config_to_json(cfg).dump(2) + "\n");
  const auto o = run_fold(cfg, samples, plan.folds[0], 0, out, &std::cout);
  if (o.train.transfer) {
    std::cout << "transfer: loaded " << o.train.transfer->loaded.size() << " tensors, skipped";
    for (const auto& [name, why] : o.train.transfer->skipped) std::cout << " " << name << " (" << why << ")";
    std::cout << ", frozen " << o.train.transfer->frozen.size() << "\n";
  }
  const std::vector<MetricsReport> reports{o.test};
  emit_report(reports, out, "Holdout metrics, " + to_string(cfg.model));
  std::cout << "best epoch " << o.train.best_epoch << " val_acc " << o.train.best_val_acc << "\n"
            << report_table(reports, "Holdout metrics, " + to_string(cfg.model));
  return kOk;
}

int cmd_xval(const Common& c) {
  const auto cfg = resolve(c);
  const auto samples = load_dataset(cfg);
  const std::filesystem::path out = cfg.out;
  std::filesystem::create_directories(out);
  write_text(out / "run_config.json", run_config_to_json(cfg).dump(2) + "\n");
  const auto cv = cross_validate(cfg, samples, out, &std::cout);
  const auto reports = cv.reports();
  std::cout << report_table(reports, "Evaluation metrics, " + to_string(cfg.model));
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const auto cfg = resolve(c);
  const auto samples = load_dataset(cfg);
  auto model = build_model<float>(cfg.model, cfg.network, cfg.seed);
  load_checkpoint(checkpoint, model, {});
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto ev = evaluate_model(model, samples, all);
  auto report = evaluate_scores(ev.probs, ev.labels);
  report.param_count = model.param_count();
  const std::vector<MetricsReport> reports{report};
  std::cout << report_table(reports, "Evaluation of " + checkpoint);
  print_confusion(std::cout, report);
  if (!c.out.empty()) emit_report(reports, c.out, "Evaluation of " + checkpoint);
  return kOk;
}

int cmd_gradcheck() {
  const auto results = run_gradcheck_suite();
  print_gradcheck_table(std::cout, results);
  std::vector<std::string> failed;
  for (const auto& r : results)
    if (!r.passed()) failed.push_back(r.name);
  if (failed.empty()) return kOk;
  std::cerr << "gradcheck failed:";
  for (const auto& f : failed) std::cerr << " " << f;
  std::cerr << "\n";
  return kNumeric;
}

// Combines the per-fold entries of one or more report.json files.
int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<nlohmann::json> values;
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& in : inputs) {
    std::filesystem::path p = in;
    if (std::filesystem::is_directory(p)) p /= "report.json";
    std::ifstream f(p);
    if (!f) throw IoError("cannot open report " + p.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("report " + p.string() + ": " + e.what());
    }
    if (!j.contains("folds") || !j["folds"].is_array()) throw FormatError("report " + p.string() + " has no folds");
    for (const auto& fold : j["folds"]) {
      values.push_back(fold);
      folds.push_back(fold);
    }
  }
  const auto agg = aggregate_values(values);
  const auto table = aggregate_table(agg, values.size(), "Evaluation metrics");
  std::cout << table;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_text(std::filesystem::path(out) / "report.json",
               nlohmann::json{{"folds", folds}, {"aggregate", agg}}.dump(2) + "\n");
    write_text(std::filesystem::path(out) / "report.txt", table);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dilated residual network and synthetic tactile phantoms for pit-pattern classification"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, xval_opts, eval_opts;
  std::optional<std::size_t> per_class, size;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic phantom dataset");
  add_common(gen, gen_opts, false);
  gen->add_option("--per-class", per_class, "Samples per class (overrides the class counts)");
  gen->add_option("--size", size, "Output image size in pixels");

  auto* train = app.add_subcommand("train", "Train on the holdout split of a dataset");
  add_common(train, train_opts, true);

  auto* xval = app.add_subcommand("xval", "Stratified k-fold cross-validation");
  add_common(xval, xval_opts, true);

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  add_common(eval, eval_opts, true);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");

  std::vector<std::string> report_inputs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Aggregate report.json files");
  report->add_option("inputs", report_inputs, "report.json files or run directories")->required();
  report->add_option("--out", report_out, "Directory for the combined report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_opts, per_class, size);
    if (*train) return cmd_train(train_opts);
    if (*xval) return cmd_xval(xval_opts);
    if (*eval) return cmd_eval(eval_opts, checkpoint);
    if (*grad) return cmd_gradcheck();
    if (*report) return cmd_report(report_inputs, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible checkpoint: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
