#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "textcond/backbone.hpp"
#include "textcond/decode_project.hpp"
#include "textcond/image_io.hpp"
#include "textcond/synth_data.hpp"
#include "textcond/text_condition.hpp"

namespace textcond {

/// Intensity standardization applied to [0, 1] pixels before the network.
struct Normalization {
  double mean = 0.5;
  double stddev = 0.25;
};

inline void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.stddev}}; }
inline void from_json(const nlohmann::json& j, Normalization& n) {
  n.mean = j.at("mean").get<double>();
  n.stddev = j.at("std").get<double>();
}

inline Normalization compute_normalization(std::span<const SampleRecord> records) {
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& r : records)
    for (std::uint8_t p : r.image.pixels) {
      const double v = p / 255.0;
      sum += v;
      sq += v * v;
      count += 1;
    }
  if (count == 0) return {};
  const double mean = sum / count;
  const double var = std::max(sq / count - mean * mean, 1e-8);
  return {mean, std::sqrt(var)};
}

/// Writes one image (already at network resolution) into sample `i` of an
/// N x 3 x H x W batch, replicating the gray channel.
inline void fill_image(Tensor<float>& batch, int i, const GrayImage& img, const Normalization& norm) {
  if (img.width != batch.w() || img.height != batch.h())
    throw ShapeError("fill_image: image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     " does not match batch " + batch.shape_string());
  const int plane = batch.plane_size();
  for (int k = 0; k < plane; ++k) {
    const auto v = static_cast<float>((img.pixels[k] / 255.0 - norm.mean) / norm.stddev);
    for (int c = 0; c < batch.c(); ++c) batch.plane(i, c)[k] = v;
  }
}

/// Teacher input: 1 x 3 x H x W intensities in [0, 1].
inline Tensor<float> teacher_input(const GrayImage& img) {
  Tensor<float> t(1, 3, img.height, img.width);
  for (std::size_t k = 0; k < img.pixels.size(); ++k)
    for (int c = 0; c < 3; ++c) t.plane(0, c)[k] = img.pixels[k] / 255.0f;
  return t;
}

/// Batched condition-steered inference against a read-only network.
class Predictor {
 public:
  struct Result {
    std::vector<Detection> detections;  // original-image pixels, descending score
    std::vector<float> heatmap;         // heatmap grid, row-major (only when requested)
  };

  Predictor(const Network<float>& net, const TextEncoderProvider& text, Normalization norm, DecodeOptions decode)
      : net_(net), text_(text), norm_(norm), decode_(decode) {
    decode_.stride = NetworkConfig::output_stride();
  }

  /// Images of any size are resampled to the network input; detections are mapped back.
  std::vector<Result> run(std::span<const GrayImage* const> images, std::span<const Prompt> prompts,
                          bool keep_heatmap = false, int chunk = 8) const {
    if (images.size() != prompts.size()) throw std::invalid_argument("Predictor: images/prompts length mismatch");
    const auto& cfg = net_.config();
    const int s = cfg.input_size, hs = cfg.heatmap_size();
    std::vector<Result> out(images.size());
    for (std::size_t first = 0; first < images.size(); first += chunk) {
      const int n = static_cast<int>(std::min<std::size_t>(chunk, images.size() - first));
      Tensor<float> batch(n, 3, s, s);
      Tensor<float> cond;
      if (cfg.switches.text_condition) cond = Tensor<float>(n, 1, hs, hs);
      for (int i = 0; i < n; ++i) {
        const GrayImage& img = *images[first + i];
        if (img.width <= 0 || img.height <= 0) throw ImageError("Predictor: empty image");
        fill_image(batch, i, resize_bilinear(img, s, s), norm_);
        if (cfg.switches.text_condition) {
          const Tensor<float> c = spatialize<float>(text_.embed(prompts[first + i]), hs, hs);
          std::copy_n(c.data(), c.size(), cond.sample(i));
        }
      }
      const NetworkOutput<float> o = net_.forward(batch, cond, nullptr);
      for (int i = 0; i < n; ++i) {
        const GrayImage& img = *images[first + i];
        Result& r = out[first + i];
        r.detections = decode(o.heatmap, o.offsets, i, decode_);
        const double sx = static_cast<double>(img.width) / s, sy = static_cast<double>(img.height) / s;
        for (auto& d : r.detections) {
          d.x *= sx;
          d.y *= sy;
        }
        if (keep_heatmap) r.heatmap.assign(o.heatmap.plane(i, 0), o.heatmap.plane(i, 0) + o.heatmap.plane_size());
      }
    }
    return out;
  }

  Result run_one(const GrayImage& image, Prompt prompt, bool keep_heatmap = false) const {
    const GrayImage* p = &image;
    return run(std::span<const GrayImage* const>(&p, 1), std::span<const Prompt>(&prompt, 1), keep_heatmap)[0];
  }

  const Network<float>& network() const { return net_; }

 private:
  const Network<float>& net_;
  const TextEncoderProvider& text_;
  Normalization norm_;
  DecodeOptions decode_;
};

}  // namespace textcond
