#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "textcond/tensor.hpp"

namespace textcond::nn {

/// Learnable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(Tensor<T>::like(value)) {}

  void zero_grad() { grad.fill(T(0)); }
  std::size_t size() const { return value.size(); }
};

/// Named view over the parameters and state buffers of a module tree.
/// Buffers (e.g. running statistics) are saved in checkpoints but never optimized.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Parameter<T>* param = nullptr;
    Tensor<T>* buffer = nullptr;
  };

  void add(const std::string& name, Parameter<T>& p) { entries_.push_back({name, &p, nullptr}); }
  void add_buffer(const std::string& name, Tensor<T>& b) { entries_.push_back({name, nullptr, &b}); }

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<Parameter<T>*> trainable() const {
    std::vector<Parameter<T>*> out;
    for (const auto& e : entries_)
      if (e.param) out.push_back(e.param);
    return out;
  }

  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.param) n += e.param->size();
    return n;
  }

  void zero_grad() const {
    for (const auto& e : entries_)
      if (e.param) e.param->zero_grad();
  }

  /// Tensor storage for a name (parameter value or buffer); nullptr when absent.
  Tensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.param ? &e.param->value : e.buffer;
    return nullptr;
  }

 private:
  std::vector<Entry> entries_;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// He-normal initialization for a weight with the given fan-in.
template <typename T>
void init_he_normal(Tensor<T>& w, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(fan_in, 1)));
  for (auto& v : w.span()) v = static_cast<T>(dist(rng));
}

template <typename T>
void init_normal(Tensor<T>& w, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : w.span()) v = static_cast<T>(dist(rng));
}

template <typename T>
void init_uniform(Tensor<T>& w, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w.span()) v = static_cast<T>(dist(rng));
}

/// Adam with bias correction. State is keyed by parameter address, so the
/// optimizer must not outlive the parameters it was stepped with.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return step_; }

  void step(const std::vector<Parameter<T>*>& params) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    const double step_size = lr_ * std::sqrt(c2) / c1;
    for (auto* p : params) {
      auto& st = state_[p];
      if (st.m.size() != p->size()) {
        st.m.assign(p->size(), 0.0f);
        st.v.assign(p->size(), 0.0f);
      }
      T* w = p->value.data();
      const T* g = p->grad.data();
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        st.m[i] = static_cast<float>(beta1_ * st.m[i] + (1.0 - beta1_) * gi);
        st.v[i] = static_cast<float>(beta2_ * st.v[i] + (1.0 - beta2_) * gi * gi);
        w[i] -= static_cast<T>(step_size * st.m[i] / (std::sqrt(static_cast<double>(st.v[i])) + eps_));
      }
    }
  }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::map<const Parameter<T>*, Moments> state_;
};

}  // namespace textcond::nn
