// Command-line front end: synth | train | eval | crossval | ablate | infer | serve.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "textcond/checkpoint.hpp"
#include "textcond/decode_project.hpp"
#include "textcond/evaluation.hpp"
#include "textcond/inference.hpp"
#include "textcond/serve.hpp"
#include "textcond/synth_data.hpp"
#include "textcond/train_config.hpp"
#include "textcond/train_eval.hpp"

// After the library headers: <resolv.h>, pulled in by httplib, defines _res,
// which collides with a parameter name inside Eigen.
#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

namespace fs = std::filesystem;
using namespace textcond;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Leftover `--key value` pairs become config overrides; anything else is a usage error.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const std::string& a = rest[i];
    if (a.rfind("--", 0) != 0 || a.size() <= 2) throw UsageError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= rest.size()) throw UsageError("flag '" + a + "' needs a value");
      value = rest[++i];
    }
    std::replace(key.begin(), key.end(), '-', '_');
    const auto& known = config_keys();
    if (std::find(known.begin(), known.end(), key) == known.end()) throw UsageError("unknown flag '" + a + "'");
    out.emplace_back(key, value);
  }
  return out;
}

TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& rest) {
  nlohmann::json j = path.empty() ? nlohmann::json::object() : read_json_file(path);
  apply_overrides(j, parse_overrides(rest));
  return config_from_json(j);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f || !(f << text)) throw std::runtime_error("cannot write '" + p.string() + "'");
}

nlohmann::json detections_json(const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) arr.push_back({{"x", d.x}, {"y", d.y}, {"score", d.score}});
  return arr;
}

std::atomic<httplib::Server*> g_server{nullptr};

void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-conditioned implant position regression toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset (PNG slices + manifest.jsonl)");
  std::uint64_t synth_seed = 7;
  int synth_cases = 20, synth_slices = 4, synth_size = 128, synth_folds = 5;
  std::string synth_out, synth_mix = "0.2,0.6,0.2";
  synth->add_option("--seed", synth_seed, "Dataset seed");
  synth->add_option("--cases", synth_cases, "Number of cases")->check(CLI::PositiveNumber);
  synth->add_option("--slices", synth_slices, "Slices per case")->check(CLI::PositiveNumber);
  synth->add_option("--image-size", synth_size, "Image side in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--folds", synth_folds, "Number of folds")->check(CLI::Range(2, 100));
  synth->add_option("--mix", synth_mix, "single_gap,multi_gap,sparse proportions");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // train / crossval / ablate share config handling
  std::string cfg_path, manifest, out_dir, folds_arg;
  int fold = 0;
  auto* train = app.add_subcommand("train", "Train on all folds but one; keep the best checkpoint on it");
  auto* crossval = app.add_subcommand("crossval", "Five-fold cross-validation; writes results.csv");
  auto* ablate = app.add_subcommand("ablate", "Cross-validate every ablation row; writes ablation.csv");
  for (auto* sub : {train, crossval, ablate}) {
    sub->add_option("--config", cfg_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--manifest", manifest, "Dataset manifest (JSON lines)");
    sub->add_option("--out", out_dir, "Output directory");
    sub->allow_extras();
    sub->footer("Any config key may be overridden with --key value (e.g. --epochs 20 --kam false).");
  }
  train->add_option("--fold", fold, "Held-out fold");
  crossval->add_option("--folds", folds_arg, "Comma-separated subset of folds (default: all)");
  ablate->add_option("--folds", folds_arg, "Comma-separated subset of folds (default: all)");

  // eval
  auto* eval = app.add_subcommand("eval", "AP75 of a checkpoint on a manifest (optionally one fold)");
  std::string ckpt;
  int eval_fold = -1;
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--fold", eval_fold, "Only evaluate this fold");

  // infer
  auto* infer = app.add_subcommand("infer", "Condition-steered prediction as JSON lines on stdout");
  std::string image_path, condition, case_id;
  bool with_heatmap = false;
  double project_z = 0.0, slice_spacing = 1.0;
  infer->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  auto* img_opt = infer->add_option("--image", image_path, "PNG slice")->check(CLI::ExistingFile);
  auto* man_opt = infer->add_option("--manifest", manifest, "Manifest (with --case: all slices of a case)");
  auto* case_opt = infer->add_option("--case", case_id, "Case id inside --manifest");
  infer->add_option("--condition", condition, "left | middle | right")->required();
  infer->add_flag("--heatmap", with_heatmap, "Include the heatmap grid");
  auto* pz = infer->add_option("--project-z", project_z, "Fit a centerline over the case and project to slice z");
  infer->add_option("--slice-spacing", slice_spacing, "Physical spacing per slice index (reporting only)");
  img_opt->excludes(man_opt);
  case_opt->needs(man_opt);
  man_opt->needs(case_opt);
  pz->needs(case_opt);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP inference server (POST /infer, GET /health)");
  int port = 8080;
  std::string host = "127.0.0.1";
  serve->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      DatasetOptions o;
      o.seed = synth_seed;
      o.n_cases = synth_cases;
      o.n_slices = synth_slices;
      o.image_size = synth_size;
      o.folds = synth_folds;
      const auto mix = [&] {
        std::vector<double> v;
        std::stringstream ss(synth_mix);
        std::string item;
        while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
        if (v.size() != 3) throw UsageError("--mix needs three comma-separated proportions");
        return v;
      }();
      o.mix = {mix[0], mix[1], mix[2]};
      const auto path = write_dataset(build_dataset(o), synth_out);
      std::cerr << "wrote " << path << "\n";
      return 0;
    }

    if (train->parsed() || crossval->parsed() || ablate->parsed()) {
      CLI::App* sub = train->parsed() ? train : (crossval->parsed() ? crossval : ablate);
      TrainConfig cfg;
      try {
        cfg = resolve_config(cfg_path, sub->remaining());
      } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
      }
      if (train->parsed()) check_fold(fold, cfg.folds);
      if (manifest.empty()) throw UsageError("--manifest is required");
      const auto records = load_manifest(manifest);
      RunOptions opt;
      opt.log = &std::cerr;
      opt.out_dir = out_dir.empty() ? std::string("runs") : out_dir;
      write_text(fs::path(opt.out_dir) / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      if (train->parsed()) {
        const auto r = train_fold(cfg, records, fold, opt);
        std::cout << nlohmann::json{{"fold", fold}, {"ap75", r.ap75}, {"best_epoch", r.best_epoch},
                                    {"checkpoint", (fs::path(opt.out_dir) / ("fold" + std::to_string(fold) + ".ckpt")).string()}}
                         .dump()
                  << "\n";
      } else if (crossval->parsed()) {
        const auto r = run_crossval(cfg, records, parse_int_list(folds_arg), opt);
        const ResultRow row{cfg.net.switches, r.result};
        const std::string csv = results_csv(std::span<const ResultRow>(&row, 1));
        write_text(fs::path(opt.out_dir) / "results.csv", csv);
        std::cout << csv;
      } else {
        const auto rows = run_ablation(cfg, records, {}, parse_int_list(folds_arg), opt);
        const std::string csv = results_csv(rows);
        write_text(fs::path(opt.out_dir) / "ablation.csv", csv);
        std::cout << csv;
      }
      return 0;
    }

    if (eval->parsed()) {
      const auto bundle = load_checkpoint(ckpt);
      auto records = load_manifest(manifest);
      if (eval_fold >= 0)
        std::erase_if(records, [&](const SampleRecord& r) { return r.fold != eval_fold; });
      const auto text = make_text_encoder(bundle.config);
      const Predictor p(*bundle.net, *text, bundle.norm,
                        {bundle.config.max_detections, bundle.config.score_thresh, NetworkConfig::output_stride()});
      const double ap = evaluate_ap75(p, records, bundle.config.box_side());
      std::cout << nlohmann::json{{"model_id", bundle.model_id}, {"ap75", ap}, {"records", records.size()}}.dump()
                << "\n";
      return 0;
    }

    if (infer->parsed()) {
      const Prompt prompt = parse_prompt(condition);
      const auto bundle = load_checkpoint(ckpt);
      const auto text = make_text_encoder(bundle.config);
      const Predictor p(*bundle.net, *text, bundle.norm,
                        {bundle.config.max_detections, bundle.config.score_thresh, NetworkConfig::output_stride()});
      if (!image_path.empty()) {
        const auto r = p.run_one(read_png(image_path), prompt, with_heatmap);
        nlohmann::json rec = {{"sample_id", fs::path(image_path).stem().string()},
                              {"condition", std::string(to_string(prompt))},
                              {"detections", detections_json(r.detections)}};
        if (with_heatmap) rec["heatmap"] = r.heatmap;
        std::cout << rec.dump() << "\n";
        return 0;
      }
      if (case_id.empty()) throw UsageError("infer needs --image or --manifest with --case");
      auto records = load_manifest(manifest);
      std::erase_if(records, [&](const SampleRecord& r) { return r.case_id != case_id; });
      if (records.empty()) throw UsageError("case '" + case_id + "' not found in manifest");
      std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.slice_z < b.slice_z; });
      std::vector<nlohmann::json> out;
      std::vector<SlicePoint> tops;
      for (const auto& rec : records) {
        const auto r = p.run_one(rec.image, prompt, with_heatmap);
        nlohmann::json j = {{"sample_id", rec.sample_id},
                            {"condition", std::string(to_string(prompt))},
                            {"detections", detections_json(r.detections)}};
        if (with_heatmap) j["heatmap"] = r.heatmap;
        if (!r.detections.empty()) tops.push_back({r.detections[0].x, r.detections[0].y, double(rec.slice_z)});
        out.push_back(std::move(j));
      }
      if (pz->count() > 0) {
        const Centerline line = fit_centerline(tops, 3);
        const auto [x, y] = project_to_slice(line, project_z);
        const nlohmann::json proj = {{"z", project_z}, {"x", x}, {"y", y}, {"z_physical", project_z * slice_spacing}};
        for (auto& j : out) j["projected"] = proj;
      }
      for (const auto& j : out) std::cout << j.dump() << "\n";
      return 0;
    }

    if (serve->parsed()) {
      InferenceService service;
      httplib::Server server;
      mount_routes(server, service);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      std::atomic<bool> load_failed{false};
      std::thread loader([&] {
        try {
          service.publish(load_checkpoint(ckpt));
          std::cerr << "model loaded from " << ckpt << "\n";
        } catch (const std::exception& e) {
          std::cerr << "error: " << e.what() << "\n";
          load_failed = true;
          server.wait_until_ready();
          server.stop();
        }
      });
      std::cerr << "listening on http://" << host << ":" << port << "\n";
      const bool ok = server.listen(host, port);
      loader.join();
      g_server = nullptr;
      if (!ok && !load_failed) std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
      return (ok && !load_failed) ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
