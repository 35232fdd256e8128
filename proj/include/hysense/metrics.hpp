#pragma once

// Confusion matrices, one-vs-rest classification metrics, rank AUC and
// report emission. Confusion entry (i, j) counts predicted class i for true
// class j; normalisation divides each column by its true-class total.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hysense/errors.hpp"
#include "hysense/manifest.hpp"

namespace hysense {

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = predicted, column = true

  explicit ConfusionMatrix(std::size_t c = kClassCount) : classes(c), counts(c * c, 0) {}

  std::size_t& at(std::size_t predicted, std::size_t truth) { return counts[predicted * classes + truth]; }
  std::size_t at(std::size_t predicted, std::size_t truth) const {
    return counts[predicted * classes + truth];
  }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t c = 0; c < classes; ++c) t += at(c, c);
    return t;
  }
  std::size_t true_total(std::size_t truth) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < classes; ++p) n += at(p, truth);
    return n;
  }
  std::size_t predicted_total(std::size_t predicted) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < classes; ++t) n += at(predicted, t);
    return n;
  }
};

inline ConfusionMatrix confusion_counts(std::span<const int> truth, std::span<const int> predicted,
                                        std::size_t classes = kClassCount) {
  if (truth.size() != predicted.size()) throw ShapeError("confusion: label and prediction counts differ");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes || predicted[i] < 0 ||
        static_cast<std::size_t>(predicted[i]) >= classes)
      throw DataError("confusion: class index out of range");
    ++m.at(static_cast<std::size_t>(predicted[i]), static_cast<std::size_t>(truth[i]));
  }
  return m;
}

/// Column-normalised confusion (row-major, same layout as counts). Throws
/// DataError naming the first true class with no samples.
inline std::vector<double> normalize_confusion(const ConfusionMatrix& m) {
  std::vector<double> out(m.counts.size(), 0.0);
  for (std::size_t j = 0; j < m.classes; ++j) {
    const std::size_t n = m.true_total(j);
    if (n == 0)
      throw DataError("confusion column " + std::to_string(j) + " undefined: class has no true samples");
    for (std::size_t i = 0; i < m.classes; ++i)
      out[i * m.classes + j] = static_cast<double>(m.at(i, j)) / static_cast<double>(n);
  }
  return out;
}

struct ClassMetrics {
  double sensitivity = 0, specificity = 0, precision = 0, f1 = 0;
  // Set when the denominator was zero and the value was reported as 0.
  bool sensitivity_undefined = false, specificity_undefined = false, precision_undefined = false;
};

struct ClassificationMetrics {
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  double sensitivity = 0, specificity = 0, precision = 0, f1 = 0;  // macro
};

inline ClassificationMetrics classification_metrics(const ConfusionMatrix& m) {
  const std::size_t n = m.total();
  if (n == 0) throw DataError("classification metrics need at least one sample");
  ClassificationMetrics out;
  out.accuracy = static_cast<double>(m.trace()) / static_cast<double>(n);
  auto ratio = [](std::size_t a, std::size_t b, bool& undefined) {
    undefined = b == 0;
    return undefined ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  for (std::size_t c = 0; c < m.classes; ++c) {
    const std::size_t tp = m.at(c, c);
    const std::size_t fn = m.true_total(c) - tp;
    const std::size_t fp = m.predicted_total(c) - tp;
    const std::size_t tn = n - tp - fn - fp;
    ClassMetrics k;
    k.sensitivity = ratio(tp, tp + fn, k.sensitivity_undefined);
    k.specificity = ratio(tn, tn + fp, k.specificity_undefined);
    k.precision = ratio(tp, tp + fp, k.precision_undefined);
    k.f1 = k.precision + k.sensitivity > 0
               ? 2 * k.precision * k.sensitivity / (k.precision + k.sensitivity)
               : 0.0;
    out.sensitivity += k.sensitivity;
    out.specificity += k.specificity;
    out.precision += k.precision;
    out.f1 += k.f1;
    out.per_class.push_back(k);
  }
  const double c = static_cast<double>(m.classes);
  out.sensitivity /= c;
  out.specificity /= c;
  out.precision /= c;
  out.f1 /= c;
  return out;
}

/// Mann-Whitney AUC with midranks for ties. nullopt without both positives
/// and negatives.
inline std::optional<double> rank_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t q = i; q < j; ++q)
      if (positive[order[q]]) {
        rank_sum += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

struct AucResult {
  std::vector<std::optional<double>> per_class;
  std::vector<std::size_t> excluded;  // classes lacking positives or negatives
  double macro = std::numeric_limits<double>::quiet_NaN();
};

/// One-vs-rest AUC per class on an (N, C) row-major probability matrix.
inline AucResult auc_macro_ovr(std::span<const double> scores, std::span<const int> labels,
                               std::size_t classes = kClassCount) {
  const std::size_t n = labels.size();
  if (scores.size() != n * classes) throw ShapeError("auc: score matrix must be N x C");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("auc: non-finite score");
  AucResult out;
  double sum = 0;
  std::size_t used = 0;
  std::vector<double> column(n);
  std::vector<bool> pos(n);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = scores[i * classes + c];
      pos[i] = labels[i] == static_cast<int>(c);
    }
    auto auc = rank_auc(column, pos);
    out.per_class.push_back(auc);
    if (auc) {
      sum += *auc;
      ++used;
    } else {
      out.excluded.push_back(c);
    }
  }
  if (used > 0) out.macro = sum / static_cast<double>(used);
  return out;
}

struct BinaryMetrics {
  double sensitivity = 0, specificity = 0, auc = 0;
};

/// Neoplastic (O, G) versus non-neoplastic (A, R): group score is the summed
/// probability of the two neoplastic classes, thresholded at 0.5.
inline BinaryMetrics binary_neoplastic_metrics(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (scores.size() != n * kClassCount) throw ShapeError("binary metrics: score matrix must be N x 4");
  std::vector<double> group(n);
  std::vector<bool> pos(n);
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= static_cast<int>(kClassCount)) throw DataError("binary metrics: bad label");
    group[i] = scores[i * kClassCount + static_cast<int>(KudoClass::O)] +
               scores[i * kClassCount + static_cast<int>(KudoClass::G)];
    pos[i] = is_neoplastic(static_cast<KudoClass>(labels[i]));
    const bool called = group[i] >= 0.5;
    if (pos[i]) (called ? tp : fn)++;
    else (called ? fp : tn)++;
  }
  if (tp + fn == 0 || tn + fp == 0)
    throw DataError("binary metrics need both neoplastic and non-neoplastic samples");
  BinaryMetrics out;
  out.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  out.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
  out.auc = *rank_auc(group, pos);
  return out;
}

inline std::vector<int> argmax_rows(std::span<const double> scores, std::size_t classes) {
  std::vector<int> out(scores.size() / classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = scores.subspan(i * classes, classes);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  int fold = 0;
  std::size_t samples = 0;
  ConfusionMatrix confusion;
  std::vector<double> normalized;  // empty when a true class is absent
  ClassificationMetrics classification;
  AucResult auc;
  std::optional<BinaryMetrics> binary;
  std::optional<double> validation_accuracy;
  std::optional<std::size_t> param_count;
};

/// Full report from (N, C) class probabilities.
inline MetricsReport evaluate_scores(std::span<const double> probs, std::span<const int> labels, int fold = 0) {
  MetricsReport r;
  r.fold = fold;
  r.samples = labels.size();
  r.confusion = confusion_counts(labels, argmax_rows(probs, kClassCount));
  try {
    r.normalized = normalize_confusion(r.confusion);
  } catch (const DataError&) {
    r.normalized.clear();
  }
  r.classification = classification_metrics(r.confusion);
  r.auc = auc_macro_ovr(probs, labels);
  try {
    r.binary = binary_neoplastic_metrics(probs, labels);
  } catch (const DataError&) {
    r.binary.reset();
  }
  return r;
}

struct MeanStd {
  double mean = 0, std = 0;
};

// Population standard deviation.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd out;
  if (v.empty()) return out;
  // Shifted by the first value so identical inputs give an exact mean and zero spread.
  const double n = static_cast<double>(v.size()), shift = v[0];
  double s = 0, ss = 0;
  for (double x : v) s += x - shift;
  const double d = s / n;
  for (double x : v) ss += (x - shift - d) * (x - shift - d);
  out.mean = shift + d;
  out.std = std::sqrt(ss / n);
  return out;
}

struct ReportRow {
  std::string key;
  std::string label;
  bool percent;
};

// Fixed row order; parameter count is rendered in millions.
inline const std::vector<ReportRow>& report_rows() {
  static const std::vector<ReportRow> rows{
      {"validation_accuracy", "Validation Acc. (%)", true},
      {"test_accuracy", "Test Acc. (%)", true},
      {"sensitivity", "Sensitivity (%)", true},
      {"precision", "Precision (%)", true},
      {"specificity", "Specificity (%)", true},
      {"f1", "F1-score (%)", true},
      {"auc", "AUC", false},
      {"parameters_mil", "Parameters (mil)", false},
  };
  return rows;
}

inline nlohmann::json report_values(const MetricsReport& r) {
  const auto& c = r.classification;
  nlohmann::json j;
  j["validation_accuracy"] = r.validation_accuracy ? nlohmann::json(*r.validation_accuracy) : nlohmann::json();
  j["test_accuracy"] = c.accuracy;
  j["sensitivity"] = c.sensitivity;
  j["precision"] = c.precision;
  j["specificity"] = c.specificity;
  j["f1"] = c.f1;
  j["auc"] = std::isnan(r.auc.macro) ? nlohmann::json() : nlohmann::json(r.auc.macro);
  j["parameters_mil"] = r.param_count ? nlohmann::json(static_cast<double>(*r.param_count) / 1e6) : nlohmann::json();
  return j;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j = report_values(r);
  j["fold"] = r.fold;
  j["samples"] = r.samples;
  j["confusion_counts"] = r.confusion.counts;
  j["confusion_normalized"] = r.normalized;
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < r.classification.per_class.size(); ++c) {
    const auto& k = r.classification.per_class[c];
    nlohmann::json e{{"class", std::string(1, class_letter(kAllClasses[c]))},
                     {"sensitivity", k.sensitivity},
                     {"specificity", k.specificity},
                     {"precision", k.precision},
                     {"f1", k.f1},
                     {"precision_undefined", k.precision_undefined},
                     {"sensitivity_undefined", k.sensitivity_undefined},
                     {"specificity_undefined", k.specificity_undefined}};
    e["auc"] = r.auc.per_class[c] ? nlohmann::json(*r.auc.per_class[c]) : nlohmann::json();
    per.push_back(e);
  }
  j["per_class"] = per;
  if (r.binary)
    j["neoplastic"] = {{"sensitivity", r.binary->sensitivity},
                       {"specificity", r.binary->specificity},
                       {"auc", r.binary->auc}};
  return j;
}

/// Per-row mean and population std over per-fold value objects (as produced
/// by report_values); rows missing from any fold are null.
inline nlohmann::json aggregate_values(const std::vector<nlohmann::json>& values) {
  nlohmann::json agg;
  for (const auto& row : report_rows()) {
    std::vector<double> v;
    for (const auto& j : values)
      if (j.contains(row.key) && j[row.key].is_number()) v.push_back(j[row.key].get<double>());
    if (v.empty() || v.size() != values.size()) {
      agg[row.key] = nullptr;
      continue;
    }
    const auto ms = mean_std(v);
    agg[row.key] = {{"mean", ms.mean}, {"std", ms.std}};
  }
  return agg;
}

inline nlohmann::json aggregate_reports(std::span<const MetricsReport> reports) {
  std::vector<nlohmann::json> values;
  for (const auto& r : reports) values.push_back(report_values(r));
  return aggregate_values(values);
}

inline std::string aggregate_table(const nlohmann::json& agg, std::size_t folds, const std::string& title) {
  std::ostringstream os;
  os << title << " (" << folds << " fold" << (folds == 1 ? "" : "s") << ")\n";
  os << std::left << std::setw(22) << "Metrics" << "Mean" << std::setw(10) << "" << "Std\n";
  for (const auto& row : report_rows()) {
    os << std::left << std::setw(22) << row.label;
    const auto& a = agg[row.key];
    if (a.is_null()) {
      os << "n/a\n";
      continue;
    }
    const double scale = row.percent ? 100.0 : 1.0;
    const int digits = row.key == "auc" ? 4 : 2;
    os << std::fixed << std::setprecision(digits) << std::setw(14) << a["mean"].get<double>() * scale
       << a["std"].get<double>() * scale << "\n";
  }
  return os.str();
}

inline std::string report_table(std::span<const MetricsReport> reports, const std::string& title) {
  return aggregate_table(aggregate_reports(reports), reports.size(), title);
}

inline std::string confusion_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "predicted\\true";
  for (auto k : kAllClasses) os << ',' << class_letter(k);
  os << '\n';
  for (std::size_t i = 0; i < r.confusion.classes; ++i) {
    os << class_letter(kAllClasses[i]);
    for (std::size_t j = 0; j < r.confusion.classes; ++j) {
      os << ',';
      if (r.normalized.empty()) os << "nan";
      else os << r.normalized[i * r.confusion.classes + j];
    }
    os << '\n';
  }
  return os.str();
}

struct ReportFiles {
  std::filesystem::path json, table;
  std::vector<std::filesystem::path> confusion;
};

/// Writes report.json, report.txt and one confusion_fold<k>.csv per fold.
inline ReportFiles emit_report(std::span<const MetricsReport> reports, const std::filesystem::path& dir,
                               const std::string& title = "Evaluation metrics") {
  if (reports.empty()) throw ConfigError("emit_report needs at least one fold report");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create report directory " + dir.string());
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("short write to " + p.string());
  };
  ReportFiles files{dir / "report.json", dir / "report.txt", {}};
  nlohmann::json j;
  j["folds"] = nlohmann::json::array();
  for (const auto& r : reports) j["folds"].push_back(report_to_json(r));
  j["aggregate"] = aggregate_reports(reports);
  write(files.json, j.dump(2) + "\n");
  write(files.table, report_table(reports, title));
  for (const auto& r : reports) {
    auto p = dir / ("confusion_fold" + std::to_string(r.fold) + ".csv");
    write(p, confusion_csv(r));
    files.confusion.push_back(p);
  }
  return files;
}

}  // namespace hysense
