#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcond/nn/conv.hpp"
#include "textcond/nn/layers.hpp"
#include "textcond/tensor.hpp"
#include "textcond/text_condition.hpp"

namespace textcond {

namespace detail {

/// Row-wise softmax in place, max-shifted.
template <typename T>
void softmax_rows(MatrixMap<T> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace detail

/// Cross-modal attention over a feature map M and its condition map V_t:
///
///   F   = [M | V_t]                      (fuse_condition) or M
///   O   = gamma(softmax(theta(M)^T beta(F')) alpha(F')) + F
///   out = out_proj(O)                    (fuse_condition) or O
///
/// F' is F average-pooled by kv_stride. Queries run over every position of M,
/// keys/values over the pooled positions of F'. With `attention` disabled the
/// block reduces to out_proj(F), i.e. plain feature fusion.
template <typename T>
class CrossModalBlock {
 public:
  struct Options {
    int channels = 16;
    int kv_stride = 1;
    bool fuse_condition = true;
    bool attention = true;
  };

  struct Cache {
    Tensor<T> fused;  // F
    typename nn::Conv2d<T>::Cache theta, beta, alpha, gamma, out_proj;
    Tensor<T> queries, keys, values;  // c' x HW, c' x L, c' x L per sample
    Tensor<T> attn;                   // HW x L per sample
  };

  CrossModalBlock() = default;
  explicit CrossModalBlock(Options opt) : opt_(opt) {
    const int c = opt.channels;
    const int cf = fused_channels();
    const int inner = std::max(c / 2, 1);
    if (opt.attention) {
      theta_ = nn::Conv2d<T>(c, inner, 1, 1, 0);
      // A key bias adds the same logit to every key of a query, so softmax cancels it.
      beta_ = nn::Conv2d<T>(cf, inner, 1, 1, 0, false);
      alpha_ = nn::Conv2d<T>(cf, inner, 1, 1, 0);
      gamma_ = nn::Conv2d<T>(inner, cf, 1, 1, 0);
    }
    if (opt.fuse_condition) out_proj_ = nn::Conv2d<T>(cf, c, 1, 1, 0);
  }

  const Options& options() const { return opt_; }
  int fused_channels() const { return opt_.channels + (opt_.fuse_condition ? 1 : 0); }
  int inner_channels() const { return std::max(opt_.channels / 2, 1); }

  /// gamma stays zero so a fresh block starts as its residual path.
  void init(std::mt19937_64& rng) {
    if (opt_.attention) {
      theta_.init(rng);
      beta_.init(rng);
      alpha_.init(rng);
      gamma_.weight().value.fill(T(0));
      gamma_.bias().value.fill(T(0));
    }
    if (opt_.fuse_condition) out_proj_.init(rng);
  }

  void collect(nn::ParamSet<T>& ps, const std::string& prefix) {
    if (opt_.attention) {
      theta_.collect(ps, nn::join_name(prefix, "theta"));
      beta_.collect(ps, nn::join_name(prefix, "beta"));
      alpha_.collect(ps, nn::join_name(prefix, "alpha"));
      gamma_.collect(ps, nn::join_name(prefix, "gamma"));
    }
    if (opt_.fuse_condition) out_proj_.collect(ps, nn::join_name(prefix, "out_proj"));
  }

  nn::Conv2d<T>& theta() { return theta_; }
  nn::Conv2d<T>& beta() { return beta_; }
  nn::Conv2d<T>& alpha() { return alpha_; }
  nn::Conv2d<T>& gamma() { return gamma_; }
  nn::Conv2d<T>& out_proj() { return out_proj_; }

  /// `condition` is N x 1 x H x W; it is ignored when fuse_condition is off.
  Tensor<T> forward(const Tensor<T>& m, const Tensor<T>& condition, Cache* cache) const {
    if (m.c() != opt_.channels) throw ShapeError("CrossModalBlock: feature channels " + m.shape_string());
    Tensor<T> f;
    if (opt_.fuse_condition) {
      if (condition.n() != m.n() || condition.c() != 1 || condition.h() != m.h() || condition.w() != m.w())
        throw ShapeError("CrossModalBlock: condition map " + condition.shape_string() + " does not align with " +
                         m.shape_string());
      f = concat_channels(m, condition);
    } else {
      f = m;
    }

    Tensor<T> o = f;
    if (opt_.attention) {
      Tensor<T> pooled = nn::AvgPool<T>::forward(f, opt_.kv_stride);
      Tensor<T> q = theta_.forward(m, cache ? &cache->theta : nullptr);
      Tensor<T> k = beta_.forward(pooled, cache ? &cache->beta : nullptr);
      Tensor<T> v = alpha_.forward(pooled, cache ? &cache->alpha : nullptr);
      const int inner = q.c(), hw = q.plane_size(), len = k.plane_size();
      // Training keeps every attention matrix for backward; the buffer is
      // reused when the cache outlives the call.
      RowMatrix<T> scratch;
      if (cache && (cache->attn.n() != m.n() || cache->attn.h() != hw || cache->attn.w() != len))
        cache->attn = Tensor<T>(m.n(), 1, hw, len);
      if (!cache) scratch.resize(hw, len);
      Tensor<T> mixed(m.n(), inner, m.h(), m.w());
      for (int i = 0; i < m.n(); ++i) {
        ConstMatrixMap<T> qm(q.sample(i), inner, hw);
        ConstMatrixMap<T> km(k.sample(i), inner, len);
        ConstMatrixMap<T> vm(v.sample(i), inner, len);
        MatrixMap<T> am(cache ? cache->attn.sample(i) : scratch.data(), hw, len);
        am.noalias() = qm.transpose() * km;
        detail::softmax_rows<T>(am);
        MatrixMap<T>(mixed.sample(i), inner, hw).noalias() = (am * vm.transpose()).transpose();
      }
      o += gamma_.forward(mixed, cache ? &cache->gamma : nullptr);
      if (cache) {
        cache->queries = std::move(q);
        cache->keys = std::move(k);
        cache->values = std::move(v);
      }
    }
    if (cache) cache->fused = f;
    if (!opt_.fuse_condition) return o;
    return out_proj_.forward(o, cache ? &cache->out_proj : nullptr);
  }

  struct Grads {
    Tensor<T> feature;
    Tensor<T> condition;  // empty when fuse_condition is off
  };

  Grads backward(const Tensor<T>& dy, const Cache& cache) {
    Tensor<T> d_o = opt_.fuse_condition ? out_proj_.backward(dy, cache.out_proj) : dy;
    Tensor<T> d_f = d_o;
    Tensor<T> d_m;
    if (opt_.attention) {
      Tensor<T> d_mixed = gamma_.backward(d_o, cache.gamma);
      const Tensor<T>& q = cache.queries;
      const Tensor<T>& k = cache.keys;
      const Tensor<T>& v = cache.values;
      const int inner = q.c(), hw = q.plane_size(), len = k.plane_size();
      Tensor<T> dq = Tensor<T>::like(q), dk = Tensor<T>::like(k), dv = Tensor<T>::like(v);
      RowMatrix<T> da(hw, len);
      for (int i = 0; i < q.n(); ++i) {
        ConstMatrixMap<T> am(cache.attn.sample(i), hw, len);
        ConstMatrixMap<T> dym(d_mixed.sample(i), inner, hw);
        ConstMatrixMap<T> vm(v.sample(i), inner, len);
        MatrixMap<T>(dv.sample(i), inner, len).noalias() = dym * am;
        da.noalias() = dym.transpose() * vm;
        // softmax backward: dS = A .* (dA - rowsum(dA .* A))
        const Eigen::Matrix<T, Eigen::Dynamic, 1> inner_prod = (da.array() * am.array()).rowwise().sum();
        da = (am.array() * (da.array().colwise() - inner_prod.array())).matrix();
        ConstMatrixMap<T> qm(q.sample(i), inner, hw);
        ConstMatrixMap<T> km(k.sample(i), inner, len);
        MatrixMap<T>(dq.sample(i), inner, hw).noalias() = km * da.transpose();
        MatrixMap<T>(dk.sample(i), inner, len).noalias() = qm * da;
      }
      d_m = theta_.backward(dq, cache.theta);
      Tensor<T> d_pooled = beta_.backward(dk, cache.beta);
      d_pooled += alpha_.backward(dv, cache.alpha);
      d_f += nn::AvgPool<T>::backward(d_pooled, opt_.kv_stride, cache.fused.shape());
    }
    Grads g;
    if (opt_.fuse_condition) {
      auto [dm_res, dcond] = split_channels(d_f, opt_.channels);
      g.condition = std::move(dcond);
      if (d_m.empty()) d_m = std::move(dm_res);
      else d_m += dm_res;
    } else {
      if (d_m.empty()) d_m = std::move(d_f);
      else d_m += d_f;
    }
    g.feature = std::move(d_m);
    return g;
  }

 private:
  Options opt_;
  nn::Conv2d<T> theta_, beta_, alpha_, gamma_, out_proj_;
};

/// Single-query attention pooling over the spatial positions of the deepest
/// encoder feature, followed by a linear projection to the embedding width.
template <typename T>
class AlignmentHead {
 public:
  struct Cache {
    Tensor<T> input;
    Tensor<T> weights;  // N x 1 x 1 x P softmax weights
    Tensor<T> pooled;   // N x C x 1 x 1
  };

  AlignmentHead() = default;
  AlignmentHead(int channels, int embed_dim)
      : c_(channels), d_(embed_dim), query_(Tensor<T>(1, channels, 1, 1)),
        proj_(Tensor<T>(1, 1, embed_dim, channels)), bias_(Tensor<T>(1, embed_dim, 1, 1)) {}

  void init(std::mt19937_64& rng) {
    query_.value.fill(T(0));
    nn::init_normal(proj_.value, 1.0 / std::sqrt(static_cast<double>(c_)), rng);
  }

  void collect(nn::ParamSet<T>& ps, const std::string& prefix) {
    ps.add(nn::join_name(prefix, "query"), query_);
    ps.add(nn::join_name(prefix, "proj.weight"), proj_);
    ps.add(nn::join_name(prefix, "proj.bias"), bias_);
  }

  nn::Parameter<T>& query() { return query_; }
  nn::Parameter<T>& proj() { return proj_; }
  nn::Parameter<T>& bias() { return bias_; }
  int embed_dim() const { return d_; }

  /// Returns N x D x 1 x 1.
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.c() != c_) throw ShapeError("AlignmentHead: channel mismatch " + x.shape_string());
    const int p = x.plane_size();
    Tensor<T> out(x.n(), d_, 1, 1);
    Tensor<T> weights(x.n(), 1, 1, p);
    Tensor<T> pooled(x.n(), c_, 1, 1);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> q(query_.value.data(), c_);
    ConstMatrixMap<T> w(proj_.value.data(), d_, c_);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), d_);
    for (int i = 0; i < x.n(); ++i) {
      ConstMatrixMap<T> xm(x.sample(i), c_, p);
      MatrixMap<T> a(weights.sample(i), 1, p);
      a.noalias() = q.transpose() * xm;
      detail::softmax_rows<T>(a);
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> pv(pooled.sample(i), c_);
      pv.noalias() = xm * a.transpose();
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(out.sample(i), d_).noalias() = w * pv + b;
    }
    if (cache) {
      cache->input = x;
      cache->weights = std::move(weights);
      cache->pooled = std::move(pooled);
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    const Tensor<T>& x = cache.input;
    const int p = x.plane_size();
    Tensor<T> dx = Tensor<T>::like(x);
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Vec> q(query_.value.data(), c_);
    ConstMatrixMap<T> w(proj_.value.data(), d_, c_);
    MatrixMap<T> dw(proj_.grad.data(), d_, c_);
    Eigen::Map<Vec> db(bias_.grad.data(), d_);
    Eigen::Map<Vec> dq(query_.grad.data(), c_);
    for (int i = 0; i < x.n(); ++i) {
      Eigen::Map<const Vec> g(dy.sample(i), d_);
      Eigen::Map<const Vec> pooled(cache.pooled.sample(i), c_);
      Eigen::Map<const Vec> a(cache.weights.sample(i), p);
      ConstMatrixMap<T> xm(x.sample(i), c_, p);
      dw.noalias() += g * pooled.transpose();
      db += g;
      const Vec dp = w.transpose() * g;
      const Vec da = xm.transpose() * dp;
      const T mean_da = a.dot(da);
      const Vec ds = (a.array() * (da.array() - mean_da)).matrix();
      MatrixMap<T> dxm(dx.sample(i), c_, p);
      dxm.noalias() = dp * a.transpose() + q * ds.transpose();
      dq.noalias() += xm * ds;
    }
    return dx;
  }

 private:
  int c_ = 0, d_ = 0;
  nn::Parameter<T> query_, proj_, bias_;
};

/// Mean absolute difference over the embedding components.
template <typename T>
T alignment_loss(std::span<const T> student, std::span<const T> teacher) {
  if (student.size() != teacher.size() || student.empty())
    throw DimensionError("alignment_loss: length " + std::to_string(student.size()) + " vs " +
                         std::to_string(teacher.size()));
  T acc = 0;
  for (std::size_t i = 0; i < student.size(); ++i) acc += std::abs(student[i] - teacher[i]);
  return acc / static_cast<T>(student.size());
}

/// d alignment_loss / d student (subgradient 0 where the components agree).
template <typename T>
std::vector<T> alignment_loss_grad(std::span<const T> student, std::span<const T> teacher) {
  if (student.size() != teacher.size() || student.empty()) throw DimensionError("alignment_loss_grad: length mismatch");
  std::vector<T> g(student.size());
  const T inv = T(1) / static_cast<T>(student.size());
  for (std::size_t i = 0; i < student.size(); ++i) {
    const T d = student[i] - teacher[i];
    g[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
  }
  return g;
}

/// Frozen image encoder acting as the alignment teacher.
class ImageEncoderProvider {
 public:
  virtual ~ImageEncoderProvider() = default;
  /// `image` is 1 x C x H x W with intensities in [0, 1].
  virtual std::vector<float> embed(const std::string& sample_id, const Tensor<float>& image) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string id() const = 0;
};

/// Random frozen conv teacher: 5x5/4 conv (8 filters) + ReLU, adaptive average
/// pooling to 4x4, random linear map to D, unit-normalized.
class StubImageEncoder final : public ImageEncoderProvider {
 public:
  StubImageEncoder(std::uint64_t seed, std::size_t dim, int in_channels = 3)
      : seed_(seed), dim_(dim), conv_(in_channels, kFilters, 5, 4, 2) {
    std::mt19937_64 rng(seed ^ 0x1a9e7eac4e5ULL);
    conv_.init(rng);
    proj_.resize(dim * kFilters * 16);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : proj_) v = static_cast<float>(normal(rng));
  }

  std::vector<float> embed(const std::string&, const Tensor<float>& image) const override {
    Tensor<float> f = nn::ReLU<float>::forward(conv_.forward(image, nullptr), nullptr);
    std::vector<float> pooled(kFilters * 16, 0.0f);
    std::vector<int> counts(16, 0);
    for (int y = 0; y < f.h(); ++y)
      for (int x = 0; x < f.w(); ++x) {
        const int cell = (y * 4 / f.h()) * 4 + (x * 4 / f.w());
        ++counts[cell];
        for (int c = 0; c < kFilters; ++c) pooled[c * 16 + cell] += f.at(0, c, y, x);
      }
    for (int c = 0; c < kFilters; ++c)
      for (int cell = 0; cell < 16; ++cell) pooled[c * 16 + cell] /= static_cast<float>(std::max(counts[cell], 1));
    std::vector<float> out(dim_, 0.0f);
    double norm = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) {
      double acc = 0.0;
      for (std::size_t j = 0; j < pooled.size(); ++j) acc += proj_[d * pooled.size() + j] * pooled[j];
      out[d] = static_cast<float>(acc);
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    if (norm > 0)
      for (auto& v : out) v = static_cast<float>(v / norm);
    return out;
  }

  std::size_t dim() const override { return dim_; }
  std::string id() const override { return "stub-image:" + std::to_string(seed_); }

 private:
  static constexpr int kFilters = 8;
  std::uint64_t seed_;
  std::size_t dim_;
  nn::Conv2d<float> conv_;
  std::vector<float> proj_;
};

/// Pre-exported teacher embeddings: JSON object sample_id -> [D floats].
class TableImageEncoder final : public ImageEncoderProvider {
 public:
  TableImageEncoder(const nlohmann::json& table, std::string source) : source_(std::move(source)) {
    if (!table.is_object() || table.empty())
      throw ProviderUnavailable("teacher table '" + source_ + "' must be a non-empty object");
    for (const auto& [id, vec] : table.items()) {
      auto v = vec.get<std::vector<float>>();
      if (dim_ == 0) dim_ = v.size();
      if (v.size() != dim_ || dim_ == 0)
        throw ProviderUnavailable("teacher table '" + source_ + "': inconsistent dim for '" + id + "'");
      table_.emplace(id, std::move(v));
    }
  }

  static TableImageEncoder from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ProviderUnavailable("cannot open teacher table '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable("teacher table '" + path + "' is not valid JSON: " + e.what());
    }
    return TableImageEncoder(j, path);
  }

  std::vector<float> embed(const std::string& sample_id, const Tensor<float>&) const override {
    auto it = table_.find(sample_id);
    if (it == table_.end()) throw ProviderUnavailable("teacher table has no embedding for '" + sample_id + "'");
    return it->second;
  }
  std::size_t dim() const override { return dim_; }
  std::string id() const override { return "table-image:" + source_; }

 private:
  std::string source_;
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<float>> table_;
};

}  // namespace textcond
