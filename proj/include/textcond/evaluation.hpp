#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "textcond/backbone.hpp"
#include "textcond/decode_project.hpp"

namespace textcond {

/// Detections and ground-truth points of one evaluated (image, condition) pair.
struct ImageDetections {
  std::vector<Detection> detections;
  std::vector<std::array<double, 2>> ground_truth;
};

/// Single-class AP at an IoU threshold, 101-point interpolated.
///
/// Detections from all images are ranked by score (ties: image order, then
/// detection order) and greedily matched to the unmatched ground truth of
/// their image with the highest IoU; IoU >= threshold is a hit. Precision and
/// recall are sampled only after complete groups of tied scores, so the curve
/// consists of reachable threshold operating points. Interpolated precision
/// at recall r is the best precision at any sampled recall >= r (0 if none).
inline double average_precision(std::span<const ImageDetections> images, double box_side,
                                double iou_threshold = 0.75) {
  std::size_t total_gt = 0;
  for (const auto& im : images) total_gt += im.ground_truth.size();
  if (total_gt == 0) throw std::invalid_argument("average_precision: empty ground-truth set");

  struct Ranked {
    double score;
    std::size_t image, det;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t d = 0; d < images[i].detections.size(); ++d) ranked.push_back({images[i].detections[d].score, i, d});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<char>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(images[i].ground_truth.size(), 0);

  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& im = images[r.image];
    const Box db = im.detections[r.det].box(box_side);
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (used[r.image][g]) continue;
      const double v = iou(db, square_box(im.ground_truth[g][0], im.ground_truth[g][1], box_side));
      if (v > best) best = v, best_g = g;
    }
    if (best >= iou_threshold) {
      used[r.image][best_g] = 1;
      ++tp;
    } else {
      ++fp;
    }
    if (k + 1 == ranked.size() || ranked[k + 1].score != r.score) {
      recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
  }
  // running max from the right gives the interpolated envelope
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double sum = 0.0;
  std::size_t k = 0;
  for (int level = 0; level <= 100; ++level) {
    const double r = level / 100.0;
    while (k < recall.size() && recall[k] < r) ++k;
    sum += k < recall.size() ? precision[k] : 0.0;
  }
  return sum / 101.0;
}

/// Per-fold AP with its mean and population standard deviation.
struct EvalResult {
  std::vector<double> per_fold;
  double mean = 0.0;
  double stddev = 0.0;
};

inline EvalResult aggregate(std::vector<double> per_fold) {
  if (per_fold.empty()) throw std::invalid_argument("aggregate: no fold results");
  EvalResult r;
  r.per_fold = std::move(per_fold);
  const double n = static_cast<double>(r.per_fold.size());
  r.mean = std::accumulate(r.per_fold.begin(), r.per_fold.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : r.per_fold) ss += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(ss / n);
  return r;
}

/// Table-style cell: percent mean with one decimal, percent std with four.
inline std::string format_mean_std(const EvalResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.4f", 100.0 * r.mean, 100.0 * r.stddev);
  return buf;
}

struct ResultRow {
  Switches switches;
  EvalResult result;
};

/// Ablation rows in table order: baseline, +text, +KAM, +CMA, +fusion, all.
inline std::vector<Switches> ablation_rows() {
  return {
      {false, false, false, false},
      {true, false, false, false},
      {true, true, false, false},
      {true, true, false, true},
      {true, true, true, false},
      {true, true, true, true},
  };
}

/// CSV with switch columns, per-fold AP (percent), mean, std and the formatted cell.
inline std::string results_csv(std::span<const ResultRow> rows) {
  std::size_t folds = 0;
  for (const auto& r : rows) folds = std::max(folds, r.result.per_fold.size());
  std::ostringstream os;
  os << "kam,text_condition,feature_fusion,cma";
  for (std::size_t f = 0; f < folds; ++f) os << ",fold" << f << "_ap75_pct";
  os << ",ap75_mean_pct,ap75_std_pct,ap75\n";
  char buf[64];
  for (const auto& r : rows) {
    const Switches& s = r.switches;
    os << int(s.kam) << ',' << int(s.text_condition) << ',' << int(s.feature_fusion) << ',' << int(s.cma);
    for (std::size_t f = 0; f < folds; ++f) {
      os << ',';
      if (f < r.result.per_fold.size()) {
        std::snprintf(buf, sizeof buf, "%.4f", 100.0 * r.result.per_fold[f]);
        os << buf;
      }
    }
    std::snprintf(buf, sizeof buf, ",%.4f,%.4f,", 100.0 * r.result.mean, 100.0 * r.result.stddev);
    os << buf << format_mean_std(r.result) << '\n';
  }
  return os.str();
}

}  // namespace textcond
