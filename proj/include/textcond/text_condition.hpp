#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "textcond/tensor.hpp"

namespace textcond {

/// Condition word naming an image-space region of the arch. The image's left
/// edge is "left" regardless of patient orientation.
enum class Prompt : std::uint8_t { left = 0, middle = 1, right = 2 };

inline constexpr std::array<Prompt, 3> kAllPrompts{Prompt::left, Prompt::middle, Prompt::right};

class InvalidPrompt : public std::invalid_argument {
 public:
  explicit InvalidPrompt(std::string_view got)
      : std::invalid_argument("invalid condition '" + std::string(got) + "': expected one of left, middle, right") {}
};

class ProviderUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string_view to_string(Prompt p) {
  switch (p) {
    case Prompt::left: return "left";
    case Prompt::middle: return "middle";
    case Prompt::right: return "right";
  }
  return "left";
}

inline Prompt parse_prompt(std::string_view s) {
  if (s == "left") return Prompt::left;
  if (s == "middle") return Prompt::middle;
  if (s == "right") return Prompt::right;
  throw InvalidPrompt(s);
}

inline int index_of(Prompt p) { return static_cast<int>(p); }

struct ConditionEmbedding {
  std::vector<float> values;
  std::string provider_id;

  std::size_t dim() const { return values.size(); }
};

/// Frozen text encoder boundary. Implementations are immutable after
/// construction and safe to share between threads.
class TextEncoderProvider {
 public:
  virtual ~TextEncoderProvider() = default;
  virtual ConditionEmbedding embed(Prompt prompt) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string id() const = 0;
};

/// Seeded stand-in encoder: three orthonormal random directions, one per
/// prompt, drawn once at construction.
class StubTextEncoder final : public TextEncoderProvider {
 public:
  StubTextEncoder(std::uint64_t seed, std::size_t dim) : seed_(seed) {
    if (dim < kAllPrompts.size())
      throw DimensionError("stub text encoder needs dim >= 3 for orthogonal prompts");
    std::mt19937_64 rng(seed ^ 0x7e47c0de5eedULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> basis;
    for (std::size_t k = 0; k < kAllPrompts.size(); ++k) {
      std::vector<double> v(dim);
      for (auto& x : v) x = normal(rng);
      // Gram-Schmidt against the previous prompts.
      for (const auto& b : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      for (auto& x : v) x /= norm;
      basis.push_back(v);
      vectors_[k].assign(v.begin(), v.end());
    }
  }

  ConditionEmbedding embed(Prompt prompt) const override {
    return {vectors_[static_cast<std::size_t>(index_of(prompt))], id()};
  }
  std::size_t dim() const override { return vectors_[0].size(); }
  std::string id() const override { return "stub:" + std::to_string(seed_); }

 private:
  std::uint64_t seed_;
  std::array<std::vector<float>, 3> vectors_;
};

/// Pre-exported embedding table:
///   {"dim": D, "prompts": {"left": [...], "middle": [...], "right": [...]}}
class TableTextEncoder final : public TextEncoderProvider {
 public:
  TableTextEncoder(const nlohmann::json& table, std::string source) : source_(std::move(source)) {
    try {
      const auto dim = table.at("dim").get<std::size_t>();
      for (Prompt p : kAllPrompts) {
        auto v = table.at("prompts").at(std::string(to_string(p))).get<std::vector<float>>();
        if (v.size() != dim)
          throw ProviderUnavailable("embedding table '" + source_ + "': prompt '" + std::string(to_string(p)) +
                                    "' has " + std::to_string(v.size()) + " values, dim is " + std::to_string(dim));
        for (float x : v)
          if (!std::isfinite(x)) throw ProviderUnavailable("embedding table '" + source_ + "': non-finite value");
        vectors_[static_cast<std::size_t>(index_of(p))] = std::move(v);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable("embedding table '" + source_ + "' is malformed: " + e.what());
    }
  }

  static TableTextEncoder from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ProviderUnavailable("cannot open embedding table '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable("embedding table '" + path + "' is not valid JSON: " + e.what());
    }
    return TableTextEncoder(j, path);
  }

  ConditionEmbedding embed(Prompt prompt) const override {
    return {vectors_[static_cast<std::size_t>(index_of(prompt))], id()};
  }
  std::size_t dim() const override { return vectors_[0].size(); }
  std::string id() const override { return "table:" + source_; }

 private:
  std::string source_;
  std::array<std::vector<float>, 3> vectors_;
};

inline ConditionEmbedding embed_prompt(Prompt prompt, const TextEncoderProvider& provider) {
  return provider.embed(prompt);
}

/// Tiles v_t end-to-end over an H x W grid, row-major. D must divide H * W so
/// that every copy is whole.
template <typename T = float>
Tensor<T> spatialize(std::span<const float> v, int h, int w) {
  if (h <= 0 || w <= 0) throw DimensionError("spatialize: H and W must be positive");
  const std::size_t d = v.size();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  if (d == 0 || hw % d != 0)
    throw DimensionError("spatialize: embedding length " + std::to_string(d) + " does not divide H*W = " +
                         std::to_string(hw));
  Tensor<T> out(1, 1, h, w);
  for (std::size_t i = 0; i < hw; ++i) out[i] = static_cast<T>(v[i % d]);
  return out;
}

template <typename T = float>
Tensor<T> spatialize(const ConditionEmbedding& e, int h, int w) {
  return spatialize<T>(std::span<const float>(e.values), h, w);
}

/// Stacks one condition map per sample into an N x 1 x H x W tensor.
template <typename T = float>
Tensor<T> spatialize_batch(std::span<const ConditionEmbedding> conds, int h, int w) {
  Tensor<T> out(static_cast<int>(conds.size()), 1, h, w);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const Tensor<T> one = spatialize<T>(conds[i], h, w);
    std::copy_n(one.data(), one.size(), out.sample(static_cast<int>(i)));
  }
  return out;
}

}  // namespace textcond
