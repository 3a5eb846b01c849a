#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace textcond {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Largest peak displacement that keeps a box of side `box_side` at IoU >=
/// `min_overlap` with its ground truth: the minimum over the three
/// corner-displacement cases of the corner-heatmap derivation (shifted box,
/// shrunk box, grown box). Each case uses the admissible root of its
/// quadratic with the proper 2a denominator.
inline double gaussian_radius(double box_side, double min_overlap) {
  if (!(box_side > 0.0)) throw std::invalid_argument("gaussian_radius: box_side must be positive");
  if (!(min_overlap > 0.0 && min_overlap < 1.0))
    throw std::invalid_argument("gaussian_radius: min_overlap must lie in (0, 1)");
  const double h = box_side, w = box_side, mo = min_overlap;
  // (h-r)(w-r) / (2hw - (h-r)(w-r)) >= mo
  const double b1 = h + w, c1 = w * h * (1.0 - mo) / (1.0 + mo);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;
  // (h-2r)(w-2r) / hw >= mo
  const double b2 = 2.0 * (h + w), c2 = (1.0 - mo) * w * h;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 16.0 * c2)) / 8.0;
  // hw / ((h+2r)(w+2r)) >= mo
  const double a3 = 4.0 * mo, b3 = 2.0 * mo * (h + w), c3 = (mo - 1.0) * w * h;
  const double r3 = (-b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3);
  return std::min({r1, r2, r3});
}

/// Standard deviation paired with a radius: the Gaussian diameter 2r + 1 spans 6 sigma.
inline double sigma_from_radius(double r) { return (2.0 * r + 1.0) / 6.0; }

struct HeatmapPoint {
  double x = 0.0;  // column, in heatmap cells
  double y = 0.0;  // row, in heatmap cells
};

template <typename T = float>
struct TargetMaps {
  int height = 0, width = 0;
  std::vector<T> heatmap;        // H x W
  std::vector<T> offsets;        // 2 x H x W: x fraction plane, then y fraction plane
  std::vector<unsigned char> peak_mask;  // H x W
  int num_peaks = 0;

  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * width + col; }
  bool is_peak(int row, int col) const { return peak_mask[index(row, col)] != 0; }
};

/// Ground-truth heatmap: a unit Gaussian at each annotation's peak cell
/// (floor of the point), combined by elementwise max; the fractional part is
/// the offset target at that cell.
template <typename T = float>
TargetMaps<T> make_targets(std::span<const HeatmapPoint> points, int height, int width, double sigma) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("make_targets: non-positive grid");
  if (!(sigma > 0.0)) throw std::invalid_argument("make_targets: sigma must be positive");
  TargetMaps<T> t;
  t.height = height;
  t.width = width;
  t.heatmap.assign(static_cast<std::size_t>(height) * width, T(0));
  t.offsets.assign(2 * t.heatmap.size(), T(0));
  t.peak_mask.assign(t.heatmap.size(), 0);
  const double denom = 2.0 * sigma * sigma;
  const int reach = static_cast<int>(std::ceil(sigma * 6.0)) + 1;
  for (const auto& p : points) {
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x < width && p.y < height))
      throw std::out_of_range("make_targets: point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                              ") outside " + std::to_string(width) + "x" + std::to_string(height) + " grid");
    const int cx = static_cast<int>(std::floor(p.x));
    const int cy = static_cast<int>(std::floor(p.y));
    for (int r = std::max(0, cy - reach); r <= std::min(height - 1, cy + reach); ++r) {
      for (int c = std::max(0, cx - reach); c <= std::min(width - 1, cx + reach); ++c) {
        const double d2 = static_cast<double>((c - cx) * (c - cx) + (r - cy) * (r - cy));
        const T g = static_cast<T>(std::exp(-d2 / denom));
        T& cell = t.heatmap[t.index(r, c)];
        cell = std::max(cell, g);
      }
    }
    const std::size_t k = t.index(cy, cx);
    t.peak_mask[k] = 1;
    t.offsets[k] = static_cast<T>(p.x - cx);
    t.offsets[t.heatmap.size() + k] = static_cast<T>(p.y - cy);
  }
  t.num_peaks = static_cast<int>(std::count(t.peak_mask.begin(), t.peak_mask.end(), 1));
  return t;
}

struct FocalParams {
  double lambda = 2.0;  // prediction-confidence exponent
  double phi = 4.0;     // penalty reduction near peaks
  double eps = 1e-7;    // probability clamp before logs
};

template <typename T>
struct LossWithGrad {
  T value = 0;
  std::vector<T> grad;
};

/// Penalty-reduced focal loss on a probability map:
///   -1/N [ sum_peaks (1-p)^lambda log p + sum_rest (1-G)^phi p^lambda log(1-p) ].
/// The non-peak term is the penalty-reduced form, (1-G)^phi weighting a
/// p^lambda-modulated log(1-p); it is not a product of two logs.
/// Probabilities are clamped to [eps, 1-eps]; N = 0 uses divisor 1.
template <typename T>
LossWithGrad<T> focal_loss_with_grad(std::span<const T> pred, const TargetMaps<T>& targets, const FocalParams& fp = {}) {
  if (pred.size() != targets.heatmap.size()) throw std::invalid_argument("focal_loss: prediction/target size mismatch");
  if (!(fp.lambda > 0.0 && fp.phi > 0.0)) throw std::invalid_argument("focal_loss: lambda and phi must be positive");
  const T lambda = static_cast<T>(fp.lambda), phi = static_cast<T>(fp.phi);
  const T lo = static_cast<T>(fp.eps), hi = static_cast<T>(1.0 - fp.eps);
  const T inv_n = T(1) / static_cast<T>(std::max(targets.num_peaks, 1));
  LossWithGrad<T> out;
  out.grad.assign(pred.size(), T(0));
  T acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T raw = pred[i];
    const T p = std::clamp(raw, lo, hi);
    const bool clamped = raw < lo || raw > hi;
    if (targets.peak_mask[i]) {
      const T one_m = T(1) - p;
      acc += std::pow(one_m, lambda) * std::log(p);
      if (!clamped)
        out.grad[i] = -inv_n * (-lambda * std::pow(one_m, lambda - T(1)) * std::log(p) + std::pow(one_m, lambda) / p);
    } else {
      const T w = std::pow(T(1) - targets.heatmap[i], phi);
      acc += w * std::pow(p, lambda) * std::log(T(1) - p);
      if (!clamped)
        out.grad[i] = -inv_n * w *
                      (lambda * std::pow(p, lambda - T(1)) * std::log(T(1) - p) - std::pow(p, lambda) / (T(1) - p));
    }
  }
  out.value = -acc * inv_n;
  return out;
}

template <typename T>
T focal_loss(std::span<const T> pred, const TargetMaps<T>& targets, const FocalParams& fp = {}) {
  return focal_loss_with_grad(pred, targets, fp).value;
}

/// L1 offset loss averaged over the 2N components at peak cells. `pred` is
/// laid out like TargetMaps::offsets.
template <typename T>
LossWithGrad<T> offset_loss_with_grad(std::span<const T> pred, const TargetMaps<T>& targets) {
  if (pred.size() != targets.offsets.size()) throw std::invalid_argument("offset_loss: prediction/target size mismatch");
  LossWithGrad<T> out;
  out.grad.assign(pred.size(), T(0));
  if (targets.num_peaks == 0) return out;
  const std::size_t plane = targets.heatmap.size();
  const T inv = T(1) / static_cast<T>(2 * targets.num_peaks);
  T acc = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!targets.peak_mask[i]) continue;
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const std::size_t k = ch * plane + i;
      const T d = pred[k] - targets.offsets[k];
      acc += std::abs(d);
      out.grad[k] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
    }
  }
  out.value = acc * inv;
  return out;
}

template <typename T>
T offset_loss(std::span<const T> pred, const TargetMaps<T>& targets) {
  return offset_loss_with_grad(pred, targets).value;
}

struct LossReport {
  double heatmap = 0.0;    // L_h
  double offset = 0.0;     // L_o
  double alignment = 0.0;  // L_align
  double total = 0.0;
};

/// Unweighted sum of the three terms; any non-finite component aborts.
inline LossReport total_loss(double l_h, double l_o, double l_align) {
  if (!std::isfinite(l_h) || !std::isfinite(l_o) || !std::isfinite(l_align))
    throw NonFiniteLoss("non-finite loss component: L_h=" + std::to_string(l_h) + " L_o=" + std::to_string(l_o) +
                        " L_align=" + std::to_string(l_align));
  return {l_h, l_o, l_align, l_h + l_o + l_align};
}

}  // namespace textcond
