#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hysense/metrics.hpp"
#include "hysense/rng.hpp"
#include "oracles.hpp"

using namespace hysense;

namespace {

constexpr int A = 0, G = 1, O = 2, R = 3;

// Probability rows that put `hot` on the given class and share the rest.
std::vector<double> one_hot_scores(const std::vector<int>& pred, double hot = 0.7) {
  std::vector<double> s;
  for (int p : pred)
    for (int c = 0; c < 4; ++c) s.push_back(c == p ? hot : (1 - hot) / 3);
  return s;
}

}  // namespace

TEST(Confusion, FiveSampleExample) {
  const std::vector<int> truth{A, A, G, O, R}, pred{A, G, G, O, R};
  const auto m = confusion_counts(truth, pred);
  EXPECT_EQ(m.total(), 5u);
  const auto n = normalize_confusion(m);
  EXPECT_EQ(n[A * 4 + A], 0.5);
  EXPECT_EQ(n[G * 4 + A], 0.5);
  for (int c = 1; c < 4; ++c) EXPECT_EQ(n[c * 4 + c], 1.0);
  const auto k = classification_metrics(m);
  EXPECT_DOUBLE_EQ(k.accuracy, 0.8);
  EXPECT_DOUBLE_EQ(k.sensitivity, 0.875);
}

TEST(Confusion, PerfectPredictionsGiveIdentity) {
  const std::vector<int> y{A, G, O, R, R, G};
  const auto n = normalize_confusion(confusion_counts(y, y));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(n[i * 4 + j], i == j ? 1.0 : 0.0);
  const auto k = classification_metrics(confusion_counts(y, y));
  EXPECT_EQ(k.accuracy, 1.0);
  EXPECT_EQ(k.sensitivity, 1.0);
  EXPECT_EQ(k.specificity, 1.0);
  EXPECT_EQ(k.precision, 1.0);
  EXPECT_EQ(k.f1, 1.0);
}

TEST(Confusion, AbsentTrueClassIsAnError) {
  const std::vector<int> truth{A, A, G}, pred{A, O, G};
  try {
    normalize_confusion(confusion_counts(truth, pred));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("column 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(classification_metrics(ConfusionMatrix{}), DataError);
  const std::vector<int> bad{5};
  EXPECT_THROW(confusion_counts(bad, bad), DataError);
}

TEST(ClassificationMetrics, SingleClassPredictionFlagsPrecision) {
  const std::vector<int> truth{A, G, O, R, A, G, O, R}, pred(8, O);
  const auto k = classification_metrics(confusion_counts(truth, pred));
  EXPECT_EQ(k.accuracy, 0.25);
  EXPECT_EQ(k.per_class[O].precision, 0.25);
  EXPECT_FALSE(k.per_class[O].precision_undefined);
  for (int c : {A, G, R}) {
    EXPECT_EQ(k.per_class[c].precision, 0.0);
    EXPECT_TRUE(k.per_class[c].precision_undefined);
    EXPECT_EQ(k.per_class[c].f1, 0.0);
  }
}

TEST(ClassificationMetrics, MatchBruteForceOracleOnRandomSets) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(1000);
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.below(4));
      pred[i] = rng.bernoulli(0.6) ? truth[i] : static_cast<int>(rng.below(4));
    }
    const auto m = confusion_counts(truth, pred);
    const auto k = classification_metrics(m);
    const auto o = oracle::brute_metrics(truth, pred, 4);
    ASSERT_EQ(k.accuracy, o.accuracy);
    ASSERT_EQ(k.sensitivity, o.sensitivity);
    ASSERT_EQ(k.specificity, o.specificity);
    ASSERT_EQ(k.precision, o.precision);
    ASSERT_EQ(k.f1, o.f1);
    for (int c = 0; c < 4; ++c) {
      ASSERT_EQ(k.per_class[c].sensitivity, o.per_class[c].sensitivity);
      ASSERT_EQ(k.per_class[c].specificity, o.per_class[c].specificity);
      ASSERT_EQ(k.per_class[c].precision, o.per_class[c].precision);
      ASSERT_EQ(k.per_class[c].f1, o.per_class[c].f1);
    }
    bool all_present = true;
    for (int c = 0; c < 4; ++c) all_present &= m.true_total(c) > 0;
    if (!all_present) continue;
    const auto norm = normalize_confusion(m);
    for (int j = 0; j < 4; ++j) {
      double col = 0;
      for (int i = 0; i < 4; ++i) col += norm[i * 4 + j];
      ASSERT_NEAR(col, 1.0, 1e-12);
      ASSERT_EQ(norm[j * 4 + j], k.per_class[j].sensitivity);
    }
  }
}

TEST(ClassificationMetrics, MacroInvariantUnderRelabeling) {
  Rng rng(12);
  std::vector<int> perm{0, 1, 2, 3};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> truth(200), pred(200), pt(200), pp(200);
    for (std::size_t i = 0; i < 200; ++i) {
      truth[i] = static_cast<int>(rng.below(4));
      pred[i] = rng.bernoulli(0.5) ? truth[i] : static_cast<int>(rng.below(4));
    }
    rng.shuffle(perm);
    for (std::size_t i = 0; i < 200; ++i) pt[i] = perm[truth[i]], pp[i] = perm[pred[i]];
    const auto a = classification_metrics(confusion_counts(truth, pred));
    const auto b = classification_metrics(confusion_counts(pt, pp));
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_NEAR(a.sensitivity, b.sensitivity, 1e-15);
    EXPECT_NEAR(a.specificity, b.specificity, 1e-15);
    EXPECT_NEAR(a.precision, b.precision, 1e-15);
    EXPECT_NEAR(a.f1, b.f1, 1e-15);
  }
}

TEST(Auc, FourPairExample) {
  const std::vector<double> s{0.9, 0.4, 0.8, 0.1};
  const std::vector<bool> pos{true, true, false, false};
  EXPECT_EQ(*rank_auc(s, pos), 0.75);
  EXPECT_EQ(oracle::pairwise_auc(s, pos), 0.75);
}

TEST(Auc, SeparatedTiedAndDegenerate) {
  const std::vector<int> labels{A, G, O, R, A, G, O, R};
  EXPECT_EQ(auc_macro_ovr(one_hot_scores(labels), labels).macro, 1.0);
  const std::vector<double> flat(32, 0.25);
  const auto tied = auc_macro_ovr(flat, labels);
  for (const auto& a : tied.per_class) EXPECT_EQ(*a, 0.5);
  const std::vector<int> no_r{A, G, O, A};
  const auto partial = auc_macro_ovr(one_hot_scores(no_r), no_r);
  EXPECT_EQ(partial.excluded, (std::vector<std::size_t>{R}));
  EXPECT_FALSE(partial.per_class[R]);
  EXPECT_EQ(partial.macro, 1.0);
  std::vector<double> nan_scores(16, 0.25);
  nan_scores[3] = std::nan("");
  EXPECT_THROW(auc_macro_ovr(nan_scores, no_r), NumericError);
}

TEST(Auc, MatchesPairwiseEnumeration) {
  Rng rng(13);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    // Coarse scores so ties are common.
    for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<double>(rng.below(8)) / 8, pos[i] = rng.bernoulli(0.4);
    const auto auc = rank_auc(s, pos);
    const bool both = std::count(pos.begin(), pos.end(), true) > 0 && std::count(pos.begin(), pos.end(), false) > 0;
    ASSERT_EQ(auc.has_value(), both);
    if (both) {
      ASSERT_NEAR(*auc, oracle::pairwise_auc(s, pos), 1e-12);
    }
  }
}

TEST(Auc, InvariantUnderMonotoneMaps) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(40), e(40), f(40);
    std::vector<bool> pos(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = rng.normal();
      pos[i] = i % 3 == 0;
      e[i] = std::exp(s[i]);
      f[i] = 3.0 * s[i] - 7.0;
    }
    const double base = *rank_auc(s, pos);
    EXPECT_EQ(*rank_auc(e, pos), base);
    EXPECT_EQ(*rank_auc(f, pos), base);
  }
}

TEST(BinaryNeoplastic, PerfectAndReversed) {
  const std::vector<int> labels{A, G, O, R};
  const auto perfect = binary_neoplastic_metrics(one_hot_scores(labels, 0.97), labels);
  EXPECT_EQ(perfect.sensitivity, 1.0);
  EXPECT_EQ(perfect.specificity, 1.0);
  EXPECT_EQ(perfect.auc, 1.0);
  const std::vector<int> swapped{G, A, R, O};  // neoplastic scored as the other group
  EXPECT_EQ(binary_neoplastic_metrics(one_hot_scores(swapped, 0.97), labels).auc, 0.0);
}

TEST(BinaryNeoplastic, OneMissOfThree) {
  const std::vector<int> labels{O, G, O, A, R, A};
  // Neoplastic group score = P(O) + P(G); the third sample falls to 0.3.
  const std::vector<double> s{0.1, 0.3, 0.5, 0.1,  //
                              0.1, 0.6, 0.2, 0.1,  //
                              0.4, 0.1, 0.2, 0.3,  //
                              0.7, 0.1, 0.1, 0.1,  //
                              0.1, 0.1, 0.1, 0.7,  //
                              0.6, 0.2, 0.1, 0.1};
  const auto b = binary_neoplastic_metrics(s, labels);
  EXPECT_DOUBLE_EQ(b.sensitivity, 2.0 / 3.0);
  EXPECT_EQ(b.specificity, 1.0);
  const std::vector<int> one_group{O, G};
  EXPECT_THROW(binary_neoplastic_metrics(one_hot_scores(one_group), one_group), DataError);
}

TEST(Report, AggregateMeanAndPopulationStd) {
  std::vector<nlohmann::json> folds{{{"test_accuracy", 0.9}}, {{"test_accuracy", 1.0}}};
  const auto agg = aggregate_values(folds);
  EXPECT_DOUBLE_EQ(agg["test_accuracy"]["mean"].get<double>(), 0.95);
  EXPECT_NEAR(agg["test_accuracy"]["std"].get<double>(), 0.05, 1e-15);
  EXPECT_TRUE(agg["auc"].is_null());
}

TEST(Report, IdenticalFoldsHaveZeroStdAndTableRows) {
  const std::vector<int> labels{A, G, O, R, A, G, O, R};
  std::vector<int> pred = labels;
  pred[1] = A;
  auto r = evaluate_scores(one_hot_scores(pred), labels);
  r.validation_accuracy = 0.8;
  r.param_count = 2'811'236;
  std::vector<MetricsReport> five(5, r);
  for (int f = 0; f < 5; ++f) five[f].fold = f;
  const auto agg = aggregate_reports(five);
  for (const auto& row : report_rows()) {
    ASSERT_TRUE(agg[row.key].is_object()) << row.key;
    EXPECT_EQ(agg[row.key]["std"].get<double>(), 0.0) << row.key;
  }
  EXPECT_DOUBLE_EQ(agg["test_accuracy"]["mean"].get<double>(), 7.0 / 8.0);

  const auto dir = std::filesystem::temp_directory_path() / "hysense_test_report";
  std::filesystem::remove_all(dir);
  const auto files = emit_report(five, dir);
  EXPECT_EQ(files.confusion.size(), 5u);
  std::ifstream in(files.table);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 2 + report_rows().size());
  const std::vector<std::string> labels_expected{"Validation Acc. (%)", "Test Acc. (%)", "Sensitivity (%)",
                                                 "Precision (%)",       "Specificity (%)", "F1-score (%)",
                                                 "AUC",                 "Parameters (mil)"};
  for (std::size_t i = 0; i < labels_expected.size(); ++i) EXPECT_TRUE(lines[i + 2].starts_with(labels_expected[i]));
  EXPECT_NE(lines[3].find("87.50"), std::string::npos) << lines[3];
  EXPECT_NE(lines[9].find("2.81"), std::string::npos) << lines[9];
  const auto j = nlohmann::json::parse(std::ifstream(files.json));
  EXPECT_EQ(j["folds"].size(), 5u);
  EXPECT_EQ(j["folds"][0]["confusion_counts"].size(), 16u);
  EXPECT_THROW(emit_report(std::span<const MetricsReport>{}, dir), ConfigError);
}

TEST(Report, OneFoldMeanEqualsValues) {
  const std::vector<int> labels{A, G, O, R};
  const auto r = evaluate_scores(one_hot_scores(labels), labels);
  const std::vector<MetricsReport> one{r};
  const auto agg = aggregate_reports(one);
  EXPECT_EQ(agg["f1"]["mean"].get<double>(), r.classification.f1);
  EXPECT_EQ(agg["f1"]["std"].get<double>(), 0.0);
  EXPECT_TRUE(agg["validation_accuracy"].is_null());
}
