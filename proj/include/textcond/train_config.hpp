#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "textcond/backbone.hpp"
#include "textcond/cross_modal.hpp"
#include "textcond/targets_losses.hpp"
#include "textcond/text_condition.hpp"

namespace textcond {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training, evaluation and provider settings. Serialized flat: every key
/// (network shape and switches included) can be overridden by `--key value`.
struct TrainConfig {
  std::string preset = "desk";
  NetworkConfig net;
  int batch_size = 8;
  double lr = 1e-3;
  int epochs = 80;
  std::vector<int> lr_drop_epochs{40, 60};
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 0;
  double nominal_box_px = 0.0;  // 0 selects 3/16 of input_size
  double min_overlap = 0.7;
  double focal_lambda = 2.0;
  double focal_phi = 4.0;
  std::string text_encoder = "stub";  // "stub" or a JSON table path
  std::uint64_t text_seed = 1234;
  std::string teacher = "stub";  // "stub" or a JSON table path
  std::uint64_t teacher_seed = 4321;
  bool augment = false;
  double rotation_deg = 5.0;
  double intensity_jitter = 0.1;
  int max_detections = 5;
  double score_thresh = 0.1;
  int val_every = 1;
  int max_iterations = 0;  // 0 = no cap
  int folds = 5;

  static TrainConfig desk() { return {}; }
  static TrainConfig large() {
    TrainConfig c;
    c.preset = "large";
    c.net = NetworkConfig::large();
    return c;
  }
  static TrainConfig from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "large") return large();
    throw ConfigError("unknown preset '" + name + "' (valid: desk, large)");
  }

  double box_side() const { return nominal_box_px > 0.0 ? nominal_box_px : net.input_size * 3.0 / 16.0; }
  /// Gaussian sigma in heatmap cells for the nominal box.
  double heatmap_sigma() const {
    const double cells = box_side() / NetworkConfig::output_stride();
    return sigma_from_radius(std::max(0.0, gaussian_radius(cells, min_overlap)));
  }
  FocalParams focal() const { return {focal_lambda, focal_phi, 1e-7}; }

  /// Learning rate for a 1-based epoch: one drop for every listed epoch it exceeds.
  double learning_rate(int epoch) const {
    double lr_e = lr;
    for (int d : lr_drop_epochs)
      if (epoch > d) lr_e *= lr_drop_factor;
    return lr_e;
  }

  void validate() const {
    net.validate();
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
    if (!(min_overlap > 0.0 && min_overlap < 1.0)) throw ConfigError("min_overlap must lie in (0, 1)");
    if (!(box_side() > 0.0)) throw ConfigError("nominal_box_px must be positive");
    if (max_detections < 1) throw ConfigError("max_detections must be >= 1");
    if (val_every < 1) throw ConfigError("val_every must be >= 1");
    if (folds < 2) throw ConfigError("folds must be >= 2");
  }
};

namespace detail {

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "preset",         "input_size",    "stage_channels", "stage_blocks",   "decoder_channels", "embed_dim",
      "head_channels",  "kv_stride",     "text_condition", "kam",            "feature_fusion",   "cma",
      "batch_size",     "lr",            "epochs",         "lr_drop_epochs", "lr_drop_factor",   "seed",
      "nominal_box_px", "min_overlap",   "focal_lambda",   "focal_phi",      "text_encoder",     "text_seed",
      "teacher",        "teacher_seed",  "augment",        "rotation_deg",   "intensity_jitter", "max_detections",
      "score_thresh",   "val_every",     "max_iterations", "folds"};
  return keys;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"preset", c.preset},
       {"input_size", c.net.input_size},
       {"stage_channels", c.net.stage_channels},
       {"stage_blocks", c.net.stage_blocks},
       {"decoder_channels", c.net.decoder_channels},
       {"embed_dim", c.net.embed_dim},
       {"head_channels", c.net.head_channels},
       {"kv_stride", c.net.kv_stride},
       {"text_condition", c.net.switches.text_condition},
       {"kam", c.net.switches.kam},
       {"feature_fusion", c.net.switches.feature_fusion},
       {"cma", c.net.switches.cma},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"epochs", c.epochs},
       {"lr_drop_epochs", c.lr_drop_epochs},
       {"lr_drop_factor", c.lr_drop_factor},
       {"seed", c.seed},
       {"nominal_box_px", c.nominal_box_px},
       {"min_overlap", c.min_overlap},
       {"focal_lambda", c.focal_lambda},
       {"focal_phi", c.focal_phi},
       {"text_encoder", c.text_encoder},
       {"text_seed", c.text_seed},
       {"teacher", c.teacher},
       {"teacher_seed", c.teacher_seed},
       {"augment", c.augment},
       {"rotation_deg", c.rotation_deg},
       {"intensity_jitter", c.intensity_jitter},
       {"max_detections", c.max_detections},
       {"score_thresh", c.score_thresh},
       {"val_every", c.val_every},
       {"max_iterations", c.max_iterations},
       {"folds", c.folds}};
}

/// Starts from the named preset and overlays every present key; unknown keys are errors.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& known = config_keys();
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
  TrainConfig c = TrainConfig::from_preset(j.value("preset", std::string("desk")));
  using detail::read_key;
  read_key(j, "input_size", c.net.input_size);
  read_key(j, "stage_channels", c.net.stage_channels);
  read_key(j, "stage_blocks", c.net.stage_blocks);
  read_key(j, "decoder_channels", c.net.decoder_channels);
  read_key(j, "embed_dim", c.net.embed_dim);
  read_key(j, "head_channels", c.net.head_channels);
  read_key(j, "kv_stride", c.net.kv_stride);
  read_key(j, "text_condition", c.net.switches.text_condition);
  read_key(j, "kam", c.net.switches.kam);
  read_key(j, "feature_fusion", c.net.switches.feature_fusion);
  read_key(j, "cma", c.net.switches.cma);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "lr", c.lr);
  read_key(j, "epochs", c.epochs);
  read_key(j, "lr_drop_epochs", c.lr_drop_epochs);
  read_key(j, "lr_drop_factor", c.lr_drop_factor);
  read_key(j, "seed", c.seed);
  read_key(j, "nominal_box_px", c.nominal_box_px);
  read_key(j, "min_overlap", c.min_overlap);
  read_key(j, "focal_lambda", c.focal_lambda);
  read_key(j, "focal_phi", c.focal_phi);
  read_key(j, "text_encoder", c.text_encoder);
  read_key(j, "text_seed", c.text_seed);
  read_key(j, "teacher", c.teacher);
  read_key(j, "teacher_seed", c.teacher_seed);
  read_key(j, "augment", c.augment);
  read_key(j, "rotation_deg", c.rotation_deg);
  read_key(j, "intensity_jitter", c.intensity_jitter);
  read_key(j, "max_detections", c.max_detections);
  read_key(j, "score_thresh", c.score_thresh);
  read_key(j, "val_every", c.val_every);
  read_key(j, "max_iterations", c.max_iterations);
  read_key(j, "folds", c.folds);
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

/// Applies `--key value` pairs onto a config object. Values that parse as JSON
/// (numbers, booleans, arrays) are used as such; anything else is a string.
inline void apply_overrides(nlohmann::json& j, const std::vector<std::pair<std::string, std::string>>& overrides) {
  const auto& known = config_keys();
  for (const auto& [key, raw] : overrides) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + key + "'");
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    j[key] = v.is_discarded() ? nlohmann::json(raw) : v;
  }
}

inline std::unique_ptr<TextEncoderProvider> make_text_encoder(const TrainConfig& c) {
  std::unique_ptr<TextEncoderProvider> p;
  if (c.text_encoder == "stub")
    p = std::make_unique<StubTextEncoder>(c.text_seed, static_cast<std::size_t>(c.net.embed_dim));
  else
    p = std::make_unique<TableTextEncoder>(TableTextEncoder::from_file(c.text_encoder));
  if (p->dim() != static_cast<std::size_t>(c.net.embed_dim))
    throw DimensionError("text encoder dim " + std::to_string(p->dim()) + " != embed_dim " +
                         std::to_string(c.net.embed_dim));
  return p;
}

inline std::unique_ptr<ImageEncoderProvider> make_teacher(const TrainConfig& c) {
  std::unique_ptr<ImageEncoderProvider> p;
  if (c.teacher == "stub")
    p = std::make_unique<StubImageEncoder>(c.teacher_seed, static_cast<std::size_t>(c.net.embed_dim));
  else
    p = std::make_unique<TableImageEncoder>(TableImageEncoder::from_file(c.teacher));
  if (p->dim() != static_cast<std::size_t>(c.net.embed_dim))
    throw DimensionError("teacher dim " + std::to_string(p->dim()) + " != embed_dim " +
                         std::to_string(c.net.embed_dim));
  return p;
}

}  // namespace textcond
