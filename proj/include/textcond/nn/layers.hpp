#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "textcond/nn/parameter.hpp"
#include "textcond/tensor.hpp"

namespace textcond::nn {

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics; the running estimates are folded in during backward, which is
/// the only mutating phase.
template <typename T>
class BatchNorm2d {
 public:
  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
    std::vector<T> mean, var;
  };

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : ch_(channels), momentum_(momentum), eps_(eps),
        gamma_(Tensor<T>(1, channels, 1, 1, T(1))), beta_(Tensor<T>(1, channels, 1, 1)),
        running_mean_(1, channels, 1, 1), running_var_(1, channels, 1, 1, T(1)) {}

  void collect(ParamSet<T>& ps, const std::string& prefix) {
    ps.add(join_name(prefix, "gamma"), gamma_);
    ps.add(join_name(prefix, "beta"), beta_);
    ps.add_buffer(join_name(prefix, "running_mean"), running_mean_);
    ps.add_buffer(join_name(prefix, "running_var"), running_var_);
  }

  Parameter<T>& gamma() { return gamma_; }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.c() != ch_) throw ShapeError("BatchNorm2d: channel mismatch " + x.shape_string());
    Tensor<T> y = Tensor<T>::like(x);
    const int hw = x.plane_size();
    if (!cache) {
      for (int c = 0; c < ch_; ++c) {
        const T inv = T(1) / std::sqrt(running_var_[c] + static_cast<T>(eps_));
        const T scale = gamma_.value[c] * inv;
        const T shift = beta_.value[c] - running_mean_[c] * scale;
        for (int i = 0; i < x.n(); ++i) {
          const T* src = x.plane(i, c);
          T* dst = y.plane(i, c);
          for (int j = 0; j < hw; ++j) dst[j] = src[j] * scale + shift;
        }
      }
      return y;
    }
    const double count = static_cast<double>(x.n()) * hw;
    cache->xhat = Tensor<T>::like(x);
    cache->inv_std.assign(ch_, T(0));
    cache->mean.assign(ch_, T(0));
    cache->var.assign(ch_, T(0));
    for (int c = 0; c < ch_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.plane(i, c);
        for (int j = 0; j < hw; ++j) sum += src[j];
      }
      const double mean = sum / count;
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.plane(i, c);
        for (int j = 0; j < hw; ++j) sq += (src[j] - mean) * (src[j] - mean);
      }
      const double var = sq / count;
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      cache->inv_std[c] = inv;
      cache->mean[c] = static_cast<T>(mean);
      cache->var[c] = static_cast<T>(count > 1 ? sq / (count - 1) : var);
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.plane(i, c);
        T* xh = cache->xhat.plane(i, c);
        T* dst = y.plane(i, c);
        for (int j = 0; j < hw; ++j) {
          xh[j] = (src[j] - static_cast<T>(mean)) * inv;
          dst[j] = xh[j] * gamma_.value[c] + beta_.value[c];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    Tensor<T> dx = Tensor<T>::like(dy);
    const int hw = dy.plane_size();
    const double count = static_cast<double>(dy.n()) * hw;
    for (int c = 0; c < ch_; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.plane(i, c);
        const T* xh = cache.xhat.plane(i, c);
        for (int j = 0; j < hw; ++j) {
          sum_dy += g[j];
          sum_dy_xhat += g[j] * xh[j];
        }
      }
      gamma_.grad[c] += static_cast<T>(sum_dy_xhat);
      beta_.grad[c] += static_cast<T>(sum_dy);
      const T k = gamma_.value[c] * cache.inv_std[c];
      const T mean_dy = static_cast<T>(sum_dy / count);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.plane(i, c);
        const T* xh = cache.xhat.plane(i, c);
        T* d = dx.plane(i, c);
        for (int j = 0; j < hw; ++j) d[j] = k * (g[j] - mean_dy - xh[j] * mean_dy_xhat);
      }
      const T m = static_cast<T>(momentum_);
      running_mean_[c] = (T(1) - m) * running_mean_[c] + m * cache.mean[c];
      running_var_[c] = (T(1) - m) * running_var_[c] + m * cache.var[c];
    }
    return dx;
  }

 private:
  int ch_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
};

template <typename T>
struct ReLU {
  struct Cache {
    Tensor<T> output;
  };

  static Tensor<T> forward(Tensor<T> x, Cache* cache) {
    for (auto& v : x.span()) v = v > T(0) ? v : T(0);
    if (cache) cache->output = x;
    return x;
  }

  static Tensor<T> backward(Tensor<T> dy, const Cache& cache) {
    const T* y = cache.output.data();
    T* g = dy.data();
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!(y[i] > T(0))) g[i] = T(0);
    return dy;
  }
};

template <typename T>
struct Sigmoid {
  struct Cache {
    Tensor<T> output;
  };

  static Tensor<T> forward(Tensor<T> x, Cache* cache) {
    for (auto& v : x.span()) v = T(1) / (T(1) + std::exp(-v));
    if (cache) cache->output = x;
    return x;
  }

  static Tensor<T> backward(Tensor<T> dy, const Cache& cache) {
    const T* y = cache.output.data();
    T* g = dy.data();
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] *= y[i] * (T(1) - y[i]);
    return dy;
  }
};

/// k x k max pooling with padding treated as -inf. Ties resolve to the first
/// element in scan order.
template <typename T>
class MaxPool2d {
 public:
  struct Cache {
    std::array<int, 4> input_shape{};
    std::vector<int> argmax;
  };

  MaxPool2d() = default;
  MaxPool2d(int kernel, int stride, int pad) : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    const int ho = (x.h() + 2 * pad_ - k_) / stride_ + 1;
    const int wo = (x.w() + 2 * pad_ - k_) / stride_ + 1;
    Tensor<T> y(x.n(), x.c(), ho, wo);
    if (cache) {
      cache->input_shape = x.shape();
      cache->argmax.assign(y.size(), -1);
    }
    std::size_t o = 0;
    for (int i = 0; i < x.n(); ++i) {
      for (int c = 0; c < x.c(); ++c) {
        const T* p = x.plane(i, c);
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            int best_idx = -1;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= x.w()) continue;
                const T v = p[iy * x.w() + ix];
                if (v > best) {
                  best = v;
                  best_idx = iy * x.w() + ix;
                }
              }
            }
            y[o] = best;
            if (cache) cache->argmax[o] = best_idx;
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) const {
    const auto& s = cache.input_shape;
    Tensor<T> dx(s[0], s[1], s[2], s[3]);
    const int plane_out = dy.plane_size();
    for (int i = 0; i < dy.n(); ++i) {
      for (int c = 0; c < dy.c(); ++c) {
        T* d = dx.plane(i, c);
        const T* g = dy.plane(i, c);
        const int* am = cache.argmax.data() + (static_cast<std::size_t>(i) * dy.c() + c) * plane_out;
        for (int j = 0; j < plane_out; ++j)
          if (am[j] >= 0) d[am[j]] += g[j];
      }
    }
    return dx;
  }

 private:
  int k_ = 3, stride_ = 2, pad_ = 1;
};

/// Non-overlapping s x s average pooling; the identity for s == 1. Trailing
/// rows/columns that do not fill a window are dropped.
template <typename T>
struct AvgPool {
  static Tensor<T> forward(const Tensor<T>& x, int s) {
    if (s == 1) return x;
    const int ho = x.h() / s, wo = x.w() / s;
    if (ho == 0 || wo == 0) throw ShapeError("AvgPool: stride larger than feature map");
    Tensor<T> y(x.n(), x.c(), ho, wo);
    const T inv = T(1) / static_cast<T>(s * s);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            T acc = 0;
            for (int ky = 0; ky < s; ++ky)
              for (int kx = 0; kx < s; ++kx) acc += x.at(i, c, oy * s + ky, ox * s + kx);
            y.at(i, c, oy, ox) = acc * inv;
          }
    return y;
  }

  static Tensor<T> backward(const Tensor<T>& dy, int s, const std::array<int, 4>& in_shape) {
    if (s == 1) return dy;
    Tensor<T> dx(in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    const T inv = T(1) / static_cast<T>(s * s);
    for (int i = 0; i < dy.n(); ++i)
      for (int c = 0; c < dy.c(); ++c)
        for (int oy = 0; oy < dy.h(); ++oy)
          for (int ox = 0; ox < dy.w(); ++ox) {
            const T g = dy.at(i, c, oy, ox) * inv;
            for (int ky = 0; ky < s; ++ky)
              for (int kx = 0; kx < s; ++kx) dx.at(i, c, oy * s + ky, ox * s + kx) += g;
          }
    return dx;
  }
};

}  // namespace textcond::nn
