#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "textcond/backbone.hpp"
#include "textcond/checkpoint.hpp"
#include "textcond/cross_modal.hpp"
#include "textcond/evaluation.hpp"
#include "textcond/inference.hpp"
#include "textcond/nn/parameter.hpp"
#include "textcond/synth_data.hpp"
#include "textcond/targets_losses.hpp"
#include "textcond/text_condition.hpp"
#include "textcond/train_config.hpp"

namespace textcond {

/// One training or evaluation item: an image with one prompt whose region is
/// populated; its targets are that region's annotations only.
struct ConditionPair {
  std::size_t record = 0;
  Prompt prompt = Prompt::middle;
};

inline std::vector<ConditionPair> condition_pairs(std::span<const SampleRecord> records) {
  std::vector<ConditionPair> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    for (Prompt p : records[i].populated_regions()) out.push_back({i, p});
  return out;
}

/// Rotation about the image centre (bilinear, edge-clamped) applied to the
/// image and its points together, followed by a gain/bias intensity jitter.
inline GrayImage rotate_and_jitter(const GrayImage& img, std::vector<Annotation>& points, double angle_rad,
                                   double gain, double bias) {
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  const double cx = img.width / 2.0, cy = img.height / 2.0;
  GrayImage out{img.width, img.height, std::vector<std::uint8_t>(img.pixels.size())};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // inverse map of the destination pixel centre
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double sx = c * dx + s * dy + cx - 0.5, sy = -s * dx + c * dy + cy - 0.5;
      const double fx = std::clamp(sx, 0.0, img.width - 1.0), fy = std::clamp(sy, 0.0, img.height - 1.0);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      const double wx = fx - x0, wy = fy - y0;
      const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
                       wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
      out.pixels[static_cast<std::size_t>(y) * img.width + x] =
          static_cast<std::uint8_t>(std::lround(std::clamp(v * gain + bias * 255.0, 0.0, 255.0)));
    }
  }
  for (auto& p : points) {
    const double dx = p.x - cx, dy = p.y - cy;
    p.x = c * dx - s * dy + cx;
    p.y = s * dx + c * dy + cy;
  }
  return out;
}

struct EpochMetrics {
  int epoch = 0;
  LossReport loss;
  double val_ap75 = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

inline std::string metrics_csv(std::span<const EpochMetrics> history) {
  std::ostringstream os;
  os << "epoch,L_h,L_o,L_align,L_total,val_AP75\n";
  char buf[160];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,", m.epoch, m.loss.heatmap, m.loss.offset,
                  m.loss.alignment, m.loss.total);
    os << buf;
    if (!std::isnan(m.val_ap75)) {
      std::snprintf(buf, sizeof buf, "%.6f", m.val_ap75);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

/// Owns the model, optimizer and data for one training run. The network is
/// heap-held because the optimizer and parameter views point into it.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<SampleRecord> records)
      : cfg_(std::move(cfg)), records_(std::move(records)), rng_(cfg_.seed ^ 0x5a3c9e1dULL) {
    cfg_.validate();
    if (records_.empty()) throw std::invalid_argument("Trainer: no training records");
    const int s = cfg_.net.input_size;
    for (auto& r : records_) {
      if (r.image.width == s && r.image.height == s) continue;
      const double sx = static_cast<double>(s) / r.image.width, sy = static_cast<double>(s) / r.image.height;
      r.image = resize_bilinear(r.image, s, s);
      for (auto& a : r.annotations) a.x *= sx, a.y *= sy;
    }
    net_ = std::make_unique<Network<float>>(cfg_.net, cfg_.seed);
    params_ = net_->parameters();
    trainable_ = params_.trainable();
    opt_ = nn::Adam<float>(cfg_.lr);
    text_ = make_text_encoder(cfg_);
    norm_ = compute_normalization(records_);
    pairs_ = condition_pairs(records_);
    if (pairs_.empty()) throw std::invalid_argument("Trainer: records carry no annotations");
    if (cfg_.net.switches.kam) {
      const auto teacher = make_teacher(cfg_);
      for (const auto& r : records_) teacher_.push_back(teacher->embed(r.sample_id, teacher_input(r.image)));
    }
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  Network<float>& model() { return *net_; }
  const Network<float>& model() const { return *net_; }
  nn::ParamSet<float>& parameters() { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const Normalization& normalization() const { return norm_; }
  const TextEncoderProvider& text_encoder() const { return *text_; }
  const std::vector<ConditionPair>& pairs() const { return pairs_; }
  const std::vector<SampleRecord>& records() const { return records_; }
  std::int64_t iterations() const { return iterations_; }
  bool exhausted() const { return cfg_.max_iterations > 0 && iterations_ >= cfg_.max_iterations; }

  /// One optimizer step on a batch; losses are per-sample means over the batch.
  LossReport train_batch(std::span<const ConditionPair> batch) {
    const int n = static_cast<int>(batch.size());
    const int s = cfg_.net.input_size, hs = cfg_.net.heatmap_size();
    const int stride = NetworkConfig::output_stride();
    const bool text = cfg_.net.switches.text_condition, kam = cfg_.net.switches.kam;
    Tensor<float> images(n, 3, s, s);
    Tensor<float> cond;
    if (text) cond = Tensor<float>(n, 1, hs, hs);
    std::vector<TargetMaps<float>> targets;
    targets.reserve(n);
    for (int i = 0; i < n; ++i) {
      const SampleRecord& rec = records_.at(batch[i].record);
      std::vector<Annotation> pts = rec.annotations_in(batch[i].prompt);
      if (cfg_.augment) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const double angle = cfg_.rotation_deg * std::numbers::pi / 180.0 * u(rng_);
        const double gain = 1.0 + cfg_.intensity_jitter * u(rng_), bias = 0.5 * cfg_.intensity_jitter * u(rng_);
        auto moved = pts;
        GrayImage img = rotate_and_jitter(rec.image, moved, angle, gain, bias);
        const bool inside = std::all_of(moved.begin(), moved.end(), [&](const Annotation& a) {
          return a.x >= 0 && a.y >= 0 && a.x < s && a.y < s;
        });
        if (inside) {
          fill_image(images, i, img, norm_);
          pts = std::move(moved);
        } else {
          fill_image(images, i, rec.image, norm_);
        }
      } else {
        fill_image(images, i, rec.image, norm_);
      }
      if (text) {
        const Tensor<float> c = spatialize<float>(text_->embed(batch[i].prompt), hs, hs);
        std::copy_n(c.data(), c.size(), cond.sample(i));
      }
      std::vector<HeatmapPoint> hp;
      for (const auto& a : pts) hp.push_back({a.x / stride, a.y / stride});
      targets.push_back(make_targets<float>(hp, hs, hs, cfg_.heatmap_sigma()));
    }

    const NetworkOutput<float> out = net_->forward(images, cond, &cache_);
    typename Network<float>::OutputGrads g{Tensor<float>::like(out.heatmap), Tensor<float>::like(out.offsets), {}};
    if (kam) g.embedding = Tensor<float>::like(out.embedding);
    const float inv_n = 1.0f / static_cast<float>(n);
    double l_h = 0.0, l_o = 0.0, l_a = 0.0;
    const std::size_t plane = static_cast<std::size_t>(hs) * hs;
    for (int i = 0; i < n; ++i) {
      const auto fl = focal_loss_with_grad<float>(std::span<const float>(out.heatmap.plane(i, 0), plane), targets[i],
                                                  cfg_.focal());
      const auto ol = offset_loss_with_grad<float>(std::span<const float>(out.offsets.sample(i), 2 * plane), targets[i]);
      l_h += fl.value;
      l_o += ol.value;
      for (std::size_t k = 0; k < plane; ++k) g.heatmap.plane(i, 0)[k] = fl.grad[k] * inv_n;
      for (std::size_t k = 0; k < 2 * plane; ++k) g.offsets.sample(i)[k] = ol.grad[k] * inv_n;
      if (kam) {
        const auto& teacher = teacher_.at(batch[i].record);
        const std::span<const float> student(out.embedding.sample(i), teacher.size());
        l_a += alignment_loss<float>(student, teacher);
        const auto ga = alignment_loss_grad<float>(student, teacher);
        for (std::size_t k = 0; k < ga.size(); ++k) g.embedding.sample(i)[k] = ga[k] * inv_n;
      }
    }
    const LossReport report = total_loss(l_h / n, l_o / n, l_a / n);
    params_.zero_grad();
    net_->backward(g, cache_);
    opt_.step(trainable_);
    ++iterations_;
    return report;
  }

  /// Shuffled pass over all pairs at the scheduled rate for 1-based `epoch`;
  /// returns batch-averaged losses. Stops early once the iteration cap is hit.
  LossReport train_epoch(int epoch) {
    opt_.set_lr(cfg_.learning_rate(epoch));
    std::vector<ConditionPair> order = pairs_;
    std::shuffle(order.begin(), order.end(), rng_);
    LossReport mean;
    int batches = 0;
    for (std::size_t first = 0; first < order.size() && !exhausted(); first += cfg_.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg_.batch_size, order.size() - first);
      const LossReport r = train_batch(std::span<const ConditionPair>(order.data() + first, count));
      mean.heatmap += r.heatmap;
      mean.offset += r.offset;
      mean.alignment += r.alignment;
      ++batches;
    }
    if (batches > 0) {
      mean.heatmap /= batches;
      mean.offset /= batches;
      mean.alignment /= batches;
    }
    return total_loss(mean.heatmap, mean.offset, mean.alignment);
  }

  Predictor predictor() const {
    return Predictor(*net_, *text_, norm_, {cfg_.max_detections, cfg_.score_thresh, NetworkConfig::output_stride()});
  }

  std::vector<Tensor<float>> snapshot() const {
    std::vector<Tensor<float>> out;
    for (const auto& e : params_.entries()) out.push_back(e.param ? e.param->value : *e.buffer);
    return out;
  }
  void restore(const std::vector<Tensor<float>>& snap) {
    const auto& entries = params_.entries();
    if (snap.size() != entries.size()) throw std::invalid_argument("restore: snapshot does not match model");
    for (std::size_t i = 0; i < entries.size(); ++i) (entries[i].param ? entries[i].param->value : *entries[i].buffer) = snap[i];
  }

 private:
  TrainConfig cfg_;
  std::vector<SampleRecord> records_;
  std::mt19937_64 rng_;
  std::unique_ptr<Network<float>> net_;
  nn::ParamSet<float> params_;
  std::vector<nn::Parameter<float>*> trainable_;
  nn::Adam<float> opt_;
  typename Network<float>::Cache cache_;
  std::unique_ptr<TextEncoderProvider> text_;
  Normalization norm_;
  std::vector<ConditionPair> pairs_;
  std::vector<std::vector<float>> teacher_;
  std::int64_t iterations_ = 0;
};

/// Prediction for every populated (image, condition) pair of `records`.
struct PairPrediction {
  std::size_t record = 0;
  Prompt prompt = Prompt::middle;
  ImageDetections eval;
};

inline std::vector<PairPrediction> predict_pairs(const Predictor& predictor, std::span<const SampleRecord> records) {
  const auto pairs = condition_pairs(records);
  std::vector<const GrayImage*> images;
  std::vector<Prompt> prompts;
  for (const auto& p : pairs) {
    images.push_back(&records[p.record].image);
    prompts.push_back(p.prompt);
  }
  const auto results = predictor.run(images, prompts);
  std::vector<PairPrediction> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairPrediction pp{pairs[i].record, pairs[i].prompt, {results[i].detections, {}}};
    for (const auto& a : records[pairs[i].record].annotations_in(pairs[i].prompt)) pp.eval.ground_truth.push_back({a.x, a.y});
    out.push_back(std::move(pp));
  }
  return out;
}

inline double evaluate_ap75(const Predictor& predictor, std::span<const SampleRecord> records, double box_side) {
  const auto preds = predict_pairs(predictor, records);
  std::vector<ImageDetections> ims;
  for (const auto& p : preds) ims.push_back(p.eval);
  return average_precision(ims, box_side, 0.75);
}

struct FoldOutcome {
  int fold = 0;
  double ap75 = 0.0;  // held-out AP of the selected checkpoint
  int best_epoch = 0;
  std::vector<EpochMetrics> history;
  std::vector<std::uint8_t> checkpoint;
};

struct RunOptions {
  std::ostream* log = nullptr;
  std::string out_dir;  // when set: per-fold metrics CSV and checkpoint
};

inline void check_fold(int fold, int folds) {
  if (fold < 0 || fold >= folds)
    throw ConfigError("fold must be 0.." + std::to_string(folds - 1) + ", got " + std::to_string(fold));
}

/// Trains on every fold except `fold` and keeps the epoch with the best AP75 on it.
inline FoldOutcome train_fold(const TrainConfig& cfg, std::span<const SampleRecord> records, int fold,
                              const RunOptions& opt = {}) {
  cfg.validate();
  check_fold(fold, cfg.folds);
  std::vector<SampleRecord> train, val;
  for (const auto& r : records) (r.fold == fold ? val : train).push_back(r);
  if (train.empty()) throw std::invalid_argument("train_fold: no training records outside fold " + std::to_string(fold));
  Trainer trainer(cfg, std::move(train));
  FoldOutcome out;
  out.fold = fold;
  double best = -1.0;
  std::vector<Tensor<float>> best_snap;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.epochs && !trainer.exhausted(); ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cfg.learning_rate(epoch);
    m.loss = trainer.train_epoch(epoch);
    const bool last = epoch == cfg.epochs || trainer.exhausted();
    if (!val.empty() && (epoch % cfg.val_every == 0 || last)) {
      m.val_ap75 = evaluate_ap75(trainer.predictor(), val, cfg.box_side());
      if (m.val_ap75 > best) {
        best = m.val_ap75;
        out.best_epoch = epoch;
        best_snap = trainer.snapshot();
      }
    }
    out.history.push_back(m);
    if (opt.log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *opt.log << "fold " << fold << " epoch " << epoch << " lr " << m.lr << " L_total " << m.loss.total << " (L_h "
               << m.loss.heatmap << ", L_o " << m.loss.offset << ", L_align " << m.loss.alignment << ")";
      if (!std::isnan(m.val_ap75)) *opt.log << " val_AP75 " << m.val_ap75;
      *opt.log << " [" << secs << " s]\n" << std::flush;
    }
  }
  if (!best_snap.empty()) trainer.restore(best_snap);
  out.ap75 = std::max(best, 0.0);
  if (val.empty()) out.best_epoch = static_cast<int>(out.history.size());
  out.checkpoint = serialize_checkpoint(trainer.model(), cfg, trainer.normalization());
  if (!opt.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(opt.out_dir);
    const std::string stem = (fs::path(opt.out_dir) / ("fold" + std::to_string(fold))).string();
    std::ofstream(stem + "_metrics.csv") << metrics_csv(out.history);
    std::ofstream ck(stem + ".ckpt", std::ios::binary);
    ck.write(reinterpret_cast<const char*>(out.checkpoint.data()), static_cast<std::streamsize>(out.checkpoint.size()));
  }
  return out;
}

struct CrossvalOutcome {
  EvalResult result;
  std::vector<FoldOutcome> folds;
};

/// Trains one model per fold (all folds unless `folds` names a subset) and
/// aggregates held-out AP75.
inline CrossvalOutcome run_crossval(const TrainConfig& cfg, std::span<const SampleRecord> records,
                                    std::vector<int> folds = {}, const RunOptions& opt = {}) {
  if (folds.empty())
    for (int f = 0; f < cfg.folds; ++f) folds.push_back(f);
  CrossvalOutcome out;
  std::vector<double> aps;
  for (int f : folds) {
    out.folds.push_back(train_fold(cfg, records, f, opt));
    aps.push_back(out.folds.back().ap75);
  }
  out.result = aggregate(aps);
  return out;
}

/// Cross-validates every switch combination (table order by default).
inline std::vector<ResultRow> run_ablation(const TrainConfig& cfg, std::span<const SampleRecord> records,
                                           std::vector<Switches> rows = {}, std::vector<int> folds = {},
                                           const RunOptions& opt = {}) {
  if (rows.empty()) rows = ablation_rows();
  std::vector<ResultRow> out;
  for (const auto& sw : rows) {
    TrainConfig c = cfg;
    c.net.switches = sw;
    RunOptions o = opt;
    if (!opt.out_dir.empty()) {
      o.out_dir = opt.out_dir + "/kam" + std::to_string(sw.kam) + "_text" + std::to_string(sw.text_condition) +
                  "_fusion" + std::to_string(sw.feature_fusion) + "_cma" + std::to_string(sw.cma);
    }
    out.push_back({sw, run_crossval(c, records, folds, o).result});
  }
  return out;
}

}  // namespace textcond
