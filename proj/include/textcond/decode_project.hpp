#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "textcond/tensor.hpp"

namespace textcond {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

/// Axis-aligned square of side `side` centred on (x, y).
inline Box square_box(double x, double y, double side) {
  const double h = side / 2.0;
  return {x - h, y - h, x + h, y + h};
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Decoded implant point in input pixels.
struct Detection {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;

  Box box(double side) const { return square_box(x, y, side); }
};

struct DecodeOptions {
  int max_detections = 5;
  double score_thresh = 0.1;
  int stride = 4;
};

/// Peak extraction on one sample: cells equal to their 3x3 neighbourhood max,
/// top-k by score (ties keep row-major order), thresholded, refined by the
/// predicted offset and scaled by the output stride.
template <typename T>
std::vector<Detection> decode(const Tensor<T>& heatmap, const Tensor<T>& offsets, int sample,
                              const DecodeOptions& opt = {}) {
  if (opt.max_detections < 1) throw std::invalid_argument("decode: max_detections must be >= 1");
  if (offsets.c() != 2 || offsets.h() != heatmap.h() || offsets.w() != heatmap.w())
    throw ShapeError("decode: offsets " + offsets.shape_string() + " vs heatmap " + heatmap.shape_string());
  const int h = heatmap.h(), w = heatmap.w();
  const T* hm = heatmap.plane(sample, 0);
  struct Peak {
    int row, col;
    T score;
  };
  std::vector<Peak> peaks;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const T v = hm[r * w + c];
      if (!(v >= static_cast<T>(opt.score_thresh))) continue;
      bool is_max = true;
      for (int dr = -1; dr <= 1 && is_max; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          if (hm[rr * w + cc] > v) {
            is_max = false;
            break;
          }
        }
      if (is_max) peaks.push_back({r, c, v});
    }
  }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (peaks.size() > static_cast<std::size_t>(opt.max_detections)) peaks.resize(opt.max_detections);
  std::vector<Detection> out;
  out.reserve(peaks.size());
  const T* ox = offsets.plane(sample, 0);
  const T* oy = offsets.plane(sample, 1);
  for (const auto& p : peaks) {
    const int k = p.row * w + p.col;
    out.push_back({(p.col + static_cast<double>(ox[k])) * opt.stride, (p.row + static_cast<double>(oy[k])) * opt.stride,
                   static_cast<double>(p.score)});
  }
  return out;
}

struct SlicePoint {
  double x = 0.0, y = 0.0, z = 0.0;  // pixels, pixels, slice index
};

/// 3-D implant axis; direction is unit length and points towards increasing z.
struct Centerline {
  Eigen::Vector3d anchor = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
};

/// Total-least-squares line: principal axis of the point scatter through the centroid.
inline Centerline fit_centerline(std::span<const SlicePoint> points, std::size_t min_points = 2) {
  if (points.size() < std::max<std::size_t>(min_points, 2))
    throw std::invalid_argument("fit_centerline: need at least " + std::to_string(std::max<std::size_t>(min_points, 2)) +
                                " points, got " + std::to_string(points.size()));
  const bool same_z = std::all_of(points.begin(), points.end(), [&](const SlicePoint& p) { return p.z == points[0].z; });
  if (same_z) throw std::invalid_argument("fit_centerline: all points lie on one slice");
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : points) centroid += Eigen::Vector3d(p.x, p.y, p.z);
  centroid /= static_cast<double>(points.size());
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (const auto& p : points) {
    const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - centroid;
    scatter += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  Eigen::Vector3d dir = eig.eigenvectors().col(2).normalized();
  if (dir.z() < 0.0) dir = -dir;
  return {centroid, dir};
}

/// Intersection of the line with slice z (interpolates or extrapolates alike).
inline std::pair<double, double> project_to_slice(const Centerline& line, double z) {
  if (std::abs(line.direction.z()) < 1e-12)
    throw std::domain_error("project_to_slice: centerline is parallel to the slices");
  const double t = (z - line.anchor.z()) / line.direction.z();
  return {line.anchor.x() + t * line.direction.x(), line.anchor.y() + t * line.direction.y()};
}

}  // namespace textcond
