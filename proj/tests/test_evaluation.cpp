#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "support.hpp"
#include "textcond/evaluation.hpp"

using namespace textcond;
using namespace testsupport;

TEST(AveragePrecision, ExactDetectionsScoreOne) {
  std::vector<ImageDetections> images(2);
  images[0].ground_truth = {{10, 10}, {50, 60}};
  images[0].detections = {{10, 10, 0.9}, {50, 60, 0.4}};
  images[1].ground_truth = {{30, 30}};
  images[1].detections = {{30, 30, 0.7}};
  EXPECT_DOUBLE_EQ(average_precision(images, 24), 1.0);
}

TEST(AveragePrecision, ThresholdIsInclusive) {
  const double s = 24, d = s / 7;
  EXPECT_NEAR(iou(square_box(0, 0, s), square_box(d, 0, s)), 0.75, 1e-15);
  std::vector<ImageDetections> images(1);
  images[0].ground_truth = {{0, 0}};
  // d = 28/7 = 4 is exactly representable, so IoU is exactly 24/32.
  images[0].detections = {{4, 0, 0.9}};
  EXPECT_DOUBLE_EQ(iou(square_box(0, 0, 28), square_box(4, 0, 28)), 0.75);
  EXPECT_DOUBLE_EQ(average_precision(images, 28), 1.0);
  images[0].detections = {{4.001, 0, 0.9}};
  EXPECT_DOUBLE_EQ(average_precision(images, 28), 0.0);
}

TEST(AveragePrecision, RejectsEmptyGroundTruth) {
  std::vector<ImageDetections> images(1);
  images[0].detections = {{1, 1, 0.5}};
  EXPECT_THROW(average_precision(images, 24), std::invalid_argument);
}

TEST(AveragePrecision, MatchesExhaustiveThresholdOracle) {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto images = random_ap_instance(rng);
    EXPECT_EQ(average_precision(images, 12), ap_threshold_oracle(images, 12, 0.75)) << "instance " << trial;
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneScoreTransforms) {
  std::mt19937_64 rng(72);
  for (int trial = 0; trial < 200; ++trial) {
    auto images = random_ap_instance(rng);
    const double ap = average_precision(images, 12);
    for (auto& im : images)
      for (auto& d : im.detections) d.score = std::exp(3 * d.score) - 7.0;
    EXPECT_EQ(average_precision(images, 12), ap);
  }
}

TEST(Aggregate, PopulationStdAndExactMean) {
  const auto r = aggregate({0.1, 0.2, 0.3, 0.4, 0.5});
  EXPECT_NEAR(r.mean, 0.3, 1e-12);
  EXPECT_NEAR(r.stddev, std::sqrt(0.02), 1e-12);
  EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(Aggregate, RemovingAndReaddingAFoldIsIdentity) {
  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> folds(5);
    for (auto& f : folds) f = u(rng);
    const auto full = aggregate(folds);
    auto partial = folds;
    const double held = partial[2];
    partial.erase(partial.begin() + 2);
    partial.insert(partial.begin() + 2, held);
    const auto again = aggregate(partial);
    EXPECT_EQ(full.mean, again.mean);
    EXPECT_EQ(full.stddev, again.stddev);
    double s = 0;
    for (double f : folds) s += f;
    EXPECT_NEAR(full.mean, s / 5, 1e-12);
  }
}

TEST(ResultsCsv, TableStyleCells) {
  EXPECT_EQ(format_mean_std(aggregate({0.178, 0.178})), "17.8±0.0000");
  EvalResult r;
  r.per_fold = {0.17, 0.18};
  r.mean = 0.178;
  r.stddev = 0.003956;
  EXPECT_EQ(format_mean_std(r), "17.8±0.3956");
  const std::vector<ResultRow> rows{{{true, true, true, true}, aggregate({0.5, 0.7})}};
  EXPECT_EQ(results_csv(rows),
            "kam,text_condition,feature_fusion,cma,fold0_ap75_pct,fold1_ap75_pct,ap75_mean_pct,ap75_std_pct,ap75\n"
            "1,1,1,1,50.0000,70.0000,60.0000,10.0000,60.0±10.0000\n");
}

TEST(AblationRows, SixValidCombinationsBaselineFirst) {
  const auto rows = ablation_rows();
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows.front(), (Switches{false, false, false, false}));
  EXPECT_EQ(rows.back(), (Switches{true, true, true, true}));
  std::set<std::tuple<bool, bool, bool, bool>> distinct;
  for (const auto& s : rows) {
    EXPECT_NO_THROW(s.validate());
    distinct.insert({s.text_condition, s.kam, s.feature_fusion, s.cma});
  }
  EXPECT_EQ(distinct.size(), 6u);
}
