#pragma once

#include <random>
#include <string>
#include <vector>

#include "textcond/nn/parameter.hpp"
#include "textcond/tensor.hpp"

// Layer convention used throughout textcond::nn: `forward(x, cache)` runs in
// training mode when `cache` is non-null and stores what `backward` needs;
// with a null cache it is a const, side-effect free evaluation pass.
// `backward` accumulates parameter gradients and returns the input gradient.

namespace textcond::nn {

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// Unfolds one C x H x W plane stack into a (C*k*k) x (Ho*Wo) row-major matrix.
template <typename T>
void im2col(const T* src, int channels, int h, int w, int k, int stride, int pad, T* cols) {
  const int ho = conv_out_size(h, k, stride, pad);
  const int wo = conv_out_size(w, k, stride, pad);
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* out = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(out, wo, T(0));
            continue;
          }
          const T* in_row = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int x0 = kx - pad;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox + x0;
              out[ox] = (ix >= 0 && ix < w) ? in_row[ix] : T(0);
            }
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              out[ox] = (ix >= 0 && ix < w) ? in_row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters (accumulates) columns back into the plane stack.
template <typename T>
void col2im(const T* cols, int channels, int h, int w, int k, int stride, int pad, T* dst) {
  const int ho = conv_out_size(h, k, stride, pad);
  const int wo = conv_out_size(w, k, stride, pad);
  for (int c = 0; c < channels; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* out_row = plane + static_cast<std::size_t>(iy) * w;
          const T* in = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) out_row[ix] += in[ox];
          }
        }
      }
    }
  }
}

/// 2-D convolution, weight layout (out, in, k, k).
template <typename T>
class Conv2d {
 public:
  struct Cache {
    Tensor<T> input;
  };

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias = true)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
        weight_(Tensor<T>(out_ch, in_ch, kernel, kernel)),
        bias_(Tensor<T>(1, bias ? out_ch : 0, 1, 1)) {}

  void init(std::mt19937_64& rng) { init_he_normal(weight_.value, in_ * k_ * k_, rng); }

  void collect(ParamSet<T>& ps, const std::string& prefix) {
    ps.add(join_name(prefix, "weight"), weight_);
    if (has_bias_) ps.add(join_name(prefix, "bias"), bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.c() != in_) throw ShapeError("Conv2d: expected " + std::to_string(in_) + " channels, got " + x.shape_string());
    const int ho = conv_out_size(x.h(), k_, stride_, pad_);
    const int wo = conv_out_size(x.w(), k_, stride_, pad_);
    Tensor<T> y(x.n(), out_, ho, wo);
    const int patch = in_ * k_ * k_;
    ConstMatrixMap<T> wm(weight_.value.data(), out_, patch);
    Buffer<T> cols;
    for (int i = 0; i < x.n(); ++i) {
      MatrixMap<T> ym(y.sample(i), out_, ho * wo);
      if (pointwise()) {
        ym.noalias() = wm * ConstMatrixMap<T>(x.sample(i), in_, ho * wo);
      } else {
        cols.resize(static_cast<std::size_t>(patch) * ho * wo);
        im2col(x.sample(i), in_, x.h(), x.w(), k_, stride_, pad_, cols.data());
        ym.noalias() = wm * ConstMatrixMap<T>(cols.data(), patch, ho * wo);
      }
      if (has_bias_)
        ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.value.data(), out_);
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    const Tensor<T>& x = cache.input;
    const int ho = dy.h(), wo = dy.w();
    const int patch = in_ * k_ * k_;
    Tensor<T> dx = Tensor<T>::like(x);
    ConstMatrixMap<T> wm(weight_.value.data(), out_, patch);
    MatrixMap<T> dwm(weight_.grad.data(), out_, patch);
    Buffer<T> cols, dcols;
    for (int i = 0; i < x.n(); ++i) {
      ConstMatrixMap<T> dym(dy.sample(i), out_, ho * wo);
      if (has_bias_) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) += dym.rowwise().sum();
      }
      if (pointwise()) {
        dwm.noalias() += dym * ConstMatrixMap<T>(x.sample(i), in_, ho * wo).transpose();
        MatrixMap<T>(dx.sample(i), in_, ho * wo).noalias() = wm.transpose() * dym;
      } else {
        cols.resize(static_cast<std::size_t>(patch) * ho * wo);
        dcols.resize(cols.size());
        im2col(x.sample(i), in_, x.h(), x.w(), k_, stride_, pad_, cols.data());
        dwm.noalias() += dym * ConstMatrixMap<T>(cols.data(), patch, ho * wo).transpose();
        MatrixMap<T>(dcols.data(), patch, ho * wo).noalias() = wm.transpose() * dym;
        col2im(dcols.data(), in_, x.h(), x.w(), k_, stride_, pad_, dx.sample(i));
      }
    }
    return dx;
  }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Transposed convolution, weight layout (in, out, k, k). Output side is
/// (in - 1) * stride - 2 * pad + k.
template <typename T>
class ConvTranspose2d {
 public:
  struct Cache {
    Tensor<T> input;
  };

  ConvTranspose2d() = default;
  ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias = true)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
        weight_(Tensor<T>(in_ch, out_ch, kernel, kernel)),
        bias_(Tensor<T>(1, bias ? out_ch : 0, 1, 1)) {}

  void init(std::mt19937_64& rng) { init_he_normal(weight_.value, in_ * k_ * k_ / (stride_ * stride_), rng); }

  void collect(ParamSet<T>& ps, const std::string& prefix) {
    ps.add(join_name(prefix, "weight"), weight_);
    if (has_bias_) ps.add(join_name(prefix, "bias"), bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

  int out_size(int in) const { return (in - 1) * stride_ - 2 * pad_ + k_; }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.c() != in_) throw ShapeError("ConvTranspose2d: channel mismatch " + x.shape_string());
    const int ho = out_size(x.h()), wo = out_size(x.w());
    const int patch = out_ * k_ * k_;
    Tensor<T> y(x.n(), out_, ho, wo);
    ConstMatrixMap<T> wm(weight_.value.data(), in_, patch);
    Buffer<T> cols(static_cast<std::size_t>(patch) * x.plane_size());
    for (int i = 0; i < x.n(); ++i) {
      MatrixMap<T>(cols.data(), patch, x.plane_size()).noalias() =
          wm.transpose() * ConstMatrixMap<T>(x.sample(i), in_, x.plane_size());
      col2im(cols.data(), out_, ho, wo, k_, stride_, pad_, y.sample(i));
      if (has_bias_) {
        for (int c = 0; c < out_; ++c) {
          T* p = y.plane(i, c);
          const T b = bias_.value[c];
          for (int j = 0; j < y.plane_size(); ++j) p[j] += b;
        }
      }
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    const Tensor<T>& x = cache.input;
    const int patch = out_ * k_ * k_;
    Tensor<T> dx = Tensor<T>::like(x);
    ConstMatrixMap<T> wm(weight_.value.data(), in_, patch);
    MatrixMap<T> dwm(weight_.grad.data(), in_, patch);
    Buffer<T> cols(static_cast<std::size_t>(patch) * x.plane_size());
    for (int i = 0; i < x.n(); ++i) {
      im2col(dy.sample(i), out_, dy.h(), dy.w(), k_, stride_, pad_, cols.data());
      ConstMatrixMap<T> cm(cols.data(), patch, x.plane_size());
      ConstMatrixMap<T> xm(x.sample(i), in_, x.plane_size());
      dwm.noalias() += xm * cm.transpose();
      MatrixMap<T>(dx.sample(i), in_, x.plane_size()).noalias() = wm * cm;
      if (has_bias_) {
        for (int c = 0; c < out_; ++c) {
          const T* p = dy.plane(i, c);
          T s = 0;
          for (int j = 0; j < dy.plane_size(); ++j) s += p[j];
          bias_.grad[c] += s;
        }
      }
    }
    return dx;
  }

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

}  // namespace textcond::nn
