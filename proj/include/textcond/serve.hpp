#pragma once

#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>

#include "textcond/checkpoint.hpp"
#include "textcond/image_io.hpp"
#include "textcond/inference.hpp"
#include "textcond/text_condition.hpp"
#include "textcond/train_config.hpp"

// Last: <resolv.h>, pulled in by httplib, defines _res, which Eigen uses as a name.
#include <httplib.h>
#include <json.hpp>

namespace textcond {

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

inline nlohmann::json valid_conditions_json() {
  nlohmann::json arr = nlohmann::json::array();
  for (Prompt p : kAllPrompts) arr.push_back(std::string(to_string(p)));
  return arr;
}

/// Request handlers independent of the HTTP transport. The loaded model is
/// published once and only read afterwards; each request works on its own
/// buffers, so handlers may run concurrently.
class InferenceService {
 public:
  void publish(ModelBundle bundle) {
    auto st = std::make_shared<State>();
    st->text = make_text_encoder(bundle.config);
    st->bundle = std::move(bundle);
    std::lock_guard lock(mu_);
    state_ = std::move(st);
  }

  bool ready() const { return current() != nullptr; }

  HttpResult health() const {
    const auto st = current();
    if (!st) return {503, {{"status", "loading"}}};
    const auto& cfg = st->bundle.config;
    return {200,
            {{"status", "ok"},
             {"model_id", st->bundle.model_id},
             {"config", cfg},
             {"input_size", cfg.net.input_size},
             {"heatmap_size", cfg.net.heatmap_size()},
             {"output_stride", NetworkConfig::output_stride()},
             {"conditions", valid_conditions_json()}}};
  }

  /// Body: {"image": base64 PNG, "condition": prompt, "return_heatmap": bool}.
  HttpResult infer(std::string_view body) const {
    const auto t0 = std::chrono::steady_clock::now();
    const auto st = current();
    if (!st) return {503, {{"error", "model not loaded"}}};
    const nlohmann::json req = nlohmann::json::parse(body, nullptr, false);
    if (req.is_discarded() || !req.is_object()) return bad_request("request body must be a JSON object");
    if (!req.contains("condition") || !req["condition"].is_string())
      return bad_request("missing string field 'condition'", true);
    Prompt prompt;
    try {
      prompt = parse_prompt(req["condition"].get<std::string>());
    } catch (const InvalidPrompt& e) {
      return bad_request(e.what(), true);
    }
    if (!req.contains("image") || !req["image"].is_string()) return bad_request("missing string field 'image'");
    GrayImage image;
    try {
      image = decode_png(base64_decode(req["image"].get<std::string>()));
    } catch (const ImageError& e) {
      return bad_request(std::string("image: ") + e.what());
    }
    const bool want_heatmap = req.value("return_heatmap", false);

    const auto& cfg = st->bundle.config;
    const Predictor predictor(*st->bundle.net, *st->text, st->bundle.norm,
                              {cfg.max_detections, cfg.score_thresh, NetworkConfig::output_stride()});
    const auto result = predictor.run_one(image, prompt, want_heatmap);
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : result.detections) dets.push_back({{"x", d.x}, {"y", d.y}, {"score", d.score}});
    nlohmann::json out = {{"model_id", st->bundle.model_id},
                          {"condition", std::string(to_string(prompt))},
                          {"image_size", {image.width, image.height}},
                          {"detections", dets}};
    if (want_heatmap) {
      out["heatmap"] = result.heatmap;
      out["heatmap_size"] = {cfg.net.heatmap_size(), cfg.net.heatmap_size()};
    }
    out["timing_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {200, std::move(out)};
  }

 private:
  struct State {
    ModelBundle bundle;
    std::unique_ptr<TextEncoderProvider> text;
  };

  std::shared_ptr<const State> current() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  static HttpResult bad_request(std::string message, bool list_conditions = false) {
    nlohmann::json body = {{"error", std::move(message)}};
    if (list_conditions) body["valid_conditions"] = valid_conditions_json();
    return {400, std::move(body)};
  }

  mutable std::mutex mu_;
  std::shared_ptr<const State> state_;
};

/// Routes POST /infer and GET /health onto an httplib server. Responses allow
/// any origin so a statically served viewer can call the API.
inline void mount_routes(httplib::Server& server, const InferenceService& service) {
  auto send = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get("/health", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  server.Post("/infer", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.infer(req.body));
  });
  server.Options("/infer", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "POST, GET, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

}  // namespace textcond
