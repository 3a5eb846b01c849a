// Acceptance gate. Each criterion prints exactly one PASS/FAIL line; the exit
// status is nonzero when any selected criterion fails. Tolerances, dataset
// sizes and time budgets are pinned below and are not configurable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "textcond/cross_modal.hpp"
#include "textcond/evaluation.hpp"
#include "textcond/synth_data.hpp"
#include "textcond/targets_losses.hpp"
#include "textcond/train_eval.hpp"

using namespace textcond;
using namespace testsupport;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

constexpr double kUnitBudgetSec = 120.0;

Verdict unit_suite() {
  const auto t0 = Clock::now();
  const int rc = std::system(UNIT_TESTS_BIN " --gtest_brief=1 > /dev/null 2>&1");
  const double secs = seconds_since(t0);
  return {rc == 0 && secs < kUnitBudgetSec, fmt("exit %d, %.1f s (budget %.0f s)", rc, secs, kUnitBudgetSec)};
}

// ---------------------------------------------------------------------------

constexpr double kGradRelTol = 1e-4;
constexpr int kTrials = 50;

/// Worst relative error over `kTrials` random instances of one check.
double worst_over_trials(const std::function<double(std::mt19937_64&, int)>& trial, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int t = 0; t < kTrials; ++t) worst = std::max(worst, trial(rng, t));
  return worst;
}

double focal_trial(std::mt19937_64& rng, int t) {
  std::uniform_real_distribution<double> pos(0.0, 4.0), prob(0.05, 0.95);
  std::vector<HeatmapPoint> pts(1 + t % 2);
  for (auto& p : pts) p = {pos(rng), pos(rng)};
  const auto targets = make_targets<double>(pts, 4, 4, 0.5 + 0.1 * (t % 5));
  std::vector<double> pred(16);
  for (auto& v : pred) v = prob(rng);
  const FocalParams fp{};
  const auto g = focal_loss_with_grad<double>(pred, targets, fp);
  auto f = [&](std::span<double> x) { return focal_loss<double>(x, targets, fp); };
  return relative_error(g.grad, numeric_gradient(f, pred));
}

double offset_trial(std::mt19937_64& rng, int t) {
  std::uniform_real_distribution<double> pos(0.0, 4.0);
  std::vector<HeatmapPoint> pts(1 + t % 3);
  for (auto& p : pts) p = {pos(rng), pos(rng)};
  const auto targets = make_targets<double>(pts, 4, 4, 1.0);
  auto pred = random_tensor(1, 2, 4, 4, rng);
  const auto g = offset_loss_with_grad<double>(pred.span(), targets);
  auto f = [&](std::span<double> x) { return offset_loss<double>(x, targets); };
  return relative_error(g.grad, numeric_gradient(f, pred.span()));
}

double alignment_loss_trial(std::mt19937_64& rng, int) {
  auto s = random_tensor(1, 16, 1, 1, rng), t = random_tensor(1, 16, 1, 1, rng);
  const auto g = alignment_loss_grad<double>(s.span(), t.span());
  auto f = [&](std::span<double> x) { return alignment_loss<double>(x, t.span()); };
  return relative_error(g, numeric_gradient(f, s.span()));
}

double cma_trial(std::mt19937_64& rng, int t) {
  const bool fuse = t % 4 != 3, attention = t % 5 != 4;
  CrossModalBlock<double> b({4, 1 + t % 2, fuse, attention});
  b.init(rng);
  if (attention) {
    b.gamma().weight().value = random_tensor(b.fused_channels(), b.inner_channels(), 1, 1, rng);
    b.theta().bias().value = random_tensor(1, b.inner_channels(), 1, 1, rng);
  }
  auto m = random_tensor(2, 4, 4, 4, rng), cond = random_tensor(2, 1, 4, 4, rng);
  const auto r = random_tensor(2, 4, 4, 4, rng);
  nn::ParamSet<double> ps;
  b.collect(ps, "cma");
  ps.zero_grad();
  CrossModalBlock<double>::Cache cache;
  b.forward(m, cond, &cache);
  const auto g = b.backward(r, cache);
  auto loss = [&](std::span<double>) { return dot(b.forward(m, cond, nullptr).span(), r.span()); };
  double worst = relative_error(g.feature.span(), numeric_gradient(loss, m.span()));
  if (fuse) worst = std::max(worst, relative_error(g.condition.span(), numeric_gradient(loss, cond.span())));
  for (auto* p : ps.trainable())
    worst = std::max(worst, relative_error(p->grad.span(), numeric_gradient(loss, p->value.span())));
  return worst;
}

double alignment_head_trial(std::mt19937_64& rng, int) {
  AlignmentHead<double> head(4, 3);
  head.init(rng);
  head.query().value = random_tensor(1, 4, 1, 1, rng);
  auto x = random_tensor(2, 4, 4, 4, rng);
  const auto r = random_tensor(2, 3, 1, 1, rng);
  nn::ParamSet<double> ps;
  head.collect(ps, "align");
  ps.zero_grad();
  AlignmentHead<double>::Cache cache;
  head.forward(x, &cache);
  const auto dx = head.backward(r, cache);
  auto loss = [&](std::span<double>) { return dot(head.forward(x, nullptr).span(), r.span()); };
  double worst = relative_error(dx.span(), numeric_gradient(loss, x.span()));
  for (auto* p : ps.trainable())
    worst = std::max(worst, relative_error(p->grad.span(), numeric_gradient(loss, p->value.span())));
  return worst;
}

Verdict gradient_checks() {
  const std::pair<const char*, std::function<double(std::mt19937_64&, int)>> checks[] = {
      {"focal", focal_trial},
      {"offset", offset_trial},
      {"alignment_loss", alignment_loss_trial},
      {"cma", cma_trial},
      {"alignment_head", alignment_head_trial}};
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 1000;
  for (const auto& [name, fn] : checks) {
    const double worst = worst_over_trials(fn, seed++);
    pass = pass && worst < kGradRelTol;
    detail += fmt("%s %.2e; ", name, worst);
  }
  return {pass, detail + fmt("%d trials each, tol %.0e", kTrials, kGradRelTol)};
}

// ---------------------------------------------------------------------------

constexpr double kCmaOracleTol = 1e-10;
constexpr int kApInstances = 1000;
constexpr double kRadiusCellTol = 1.0;

Verdict oracles() {
  std::mt19937_64 rng(2024);
  double cma_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const bool fuse = t % 2 == 0;
    CrossModalBlock<double> b({3, 1, fuse, true});
    b.init(rng);
    b.gamma().weight().value = random_tensor(b.fused_channels(), b.inner_channels(), 1, 1, rng);
    b.gamma().bias().value = random_tensor(1, b.fused_channels(), 1, 1, rng);
    const auto m = random_tensor(2, 3, 2, 2, rng), cond = random_tensor(2, 1, 2, 2, rng);
    const auto got = b.forward(m, cond, nullptr), want = cma_oracle(b, m, cond);
    for (std::size_t i = 0; i < got.size(); ++i) cma_err = std::max(cma_err, std::abs(got[i] - want[i]));
  }

  int ap_mismatch = 0;
  for (int t = 0; t < kApInstances; ++t) {
    const auto images = random_ap_instance(rng);
    if (average_precision(images, 12, 0.75) != ap_threshold_oracle(images, 12, 0.75)) ++ap_mismatch;
  }

  double radius_gap = 0.0;
  for (int side : {8, 16, 24, 32, 48, 96})
    for (double mo : {0.5, 0.6, 0.7, 0.8, 0.9})
      radius_gap = std::max(radius_gap, std::abs(gaussian_radius(side, mo) - exhaustive_radius(side, mo)));

  const bool pass = cma_err <= kCmaOracleTol && ap_mismatch == 0 && radius_gap <= kRadiusCellTol;
  return {pass, fmt("cma 2x2 max |diff| %.2e (tol %.0e); AP mismatches %d/%d; radius max gap %.3f cells (tol %.0f)",
                    cma_err, kCmaOracleTol, ap_mismatch, kApInstances, radius_gap, kRadiusCellTol)};
}

// ---------------------------------------------------------------------------

constexpr int kOverfitImages = 16;
constexpr int kOverfitIterations = 200;
constexpr int kOverfitMinHits = 15;
constexpr double kOverfitCellRadius = 2.0;
constexpr double kOverfitLossRatio = 0.25;
constexpr double kOverfitBudgetSec = 600.0;

Verdict overfit() {
  const auto t0 = Clock::now();
  DatasetOptions o;
  o.seed = 5;
  o.n_cases = kOverfitImages;
  o.n_slices = 1;
  o.mix = {1.0, 0.0, 0.0};
  auto ds = build_dataset(o);

  TrainConfig cfg = TrainConfig::desk();
  cfg.seed = 3;
  cfg.max_iterations = kOverfitIterations;
  Trainer trainer(cfg, ds.records);
  const auto& pairs = trainer.pairs();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  std::vector<double> losses;
  for (std::size_t start = 0; static_cast<int>(losses.size()) < kOverfitIterations; start = (start + bs) % pairs.size()) {
    const std::size_t n = std::min(bs, pairs.size() - start);
    losses.push_back(trainer.train_batch(std::span(pairs).subspan(start, n)).total);
  }
  // Each window of consecutive batches covers every training pair once.
  const std::size_t window = (pairs.size() + bs - 1) / bs;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    first += losses[i] / window;
    last += losses[losses.size() - 1 - i] / window;
  }

  const Predictor top1(trainer.model(), trainer.text_encoder(), trainer.normalization(),
                       {1, 0.0, NetworkConfig::output_stride()});
  int hits = 0;
  for (const auto& p : pairs) {
    const auto& rec = trainer.records()[p.record];
    const auto res = top1.run_one(rec.image, p.prompt);
    if (res.detections.empty()) continue;
    double best = 1e300;
    for (const auto& a : rec.annotations_in(p.prompt))
      best = std::min(best, std::hypot(res.detections[0].x - a.x, res.detections[0].y - a.y));
    if (best / NetworkConfig::output_stride() <= kOverfitCellRadius) ++hits;
  }
  const double secs = seconds_since(t0);
  const int n_pairs = static_cast<int>(pairs.size());
  // The criterion counts images; with single-gap cases every image contributes one pair.
  const int needed = kOverfitMinHits + (n_pairs - kOverfitImages);
  const bool pass = hits >= needed && last < kOverfitLossRatio * first && secs < kOverfitBudgetSec;
  return {pass, fmt("top-1 within %.0f cells on %d/%d (need %d); L_total %.4f -> %.4f (ratio %.3f, need < %.2f); "
                    "%.0f s (budget %.0f s)",
                    kOverfitCellRadius, hits, n_pairs, needed, first, last, last / first, kOverfitLossRatio, secs,
                    kOverfitBudgetSec)};
}

// ---------------------------------------------------------------------------

constexpr int kBenchmarkCases = 200;
constexpr int kBenchmarkSlices = 2;
constexpr std::uint64_t kBenchmarkSeed = 11;
constexpr int kSteeringFold = 0;
constexpr int kSteeringEpochs = 24;
constexpr double kSteeringMinRate = 0.90;
constexpr double kSteeringBudgetSec = 3600.0;

DatasetOptions benchmark_options(std::uint64_t seed) {
  DatasetOptions o;
  o.seed = seed;
  o.n_cases = kBenchmarkCases;
  o.n_slices = kBenchmarkSlices;
  o.folds = 5;
  return o;
}

TrainConfig benchmark_config(int epochs, std::uint64_t seed) {
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = epochs;
  cfg.lr_drop_epochs = {epochs * 2 / 3, epochs * 5 / 6};
  cfg.seed = seed;
  return cfg;
}

std::optional<Prompt> region_or_none(const Detection& d, const ArchSpec& arch) {
  try {
    return region_of(d.x, d.y, arch);
  } catch (const OffArchError&) {
    return std::nullopt;
  }
}

Verdict steering() {
  const auto t0 = Clock::now();
  const auto ds = build_dataset(benchmark_options(kBenchmarkSeed));
  TrainConfig cfg = benchmark_config(kSteeringEpochs, 1);
  const FoldOutcome fold = train_fold(cfg, ds.records, kSteeringFold, {&std::cerr, ""});
  const ModelBundle bundle = deserialize_checkpoint(fold.checkpoint);
  const auto text = make_text_encoder(bundle.config);
  const Predictor predictor(*bundle.net, *text, bundle.norm, {1, 0.0, NetworkConfig::output_stride()});

  int pairs = 0, in_region = 0, images = 0, swapped = 0;
  for (const auto& rec : ds.records) {
    if (rec.fold != kSteeringFold) continue;
    const auto regions = rec.populated_regions();
    if (regions.size() != 2) continue;
    ++images;
    std::vector<std::optional<Prompt>> landed;
    for (Prompt p : regions) {
      const auto res = predictor.run_one(rec.image, p);
      landed.push_back(res.detections.empty() ? std::nullopt : region_or_none(res.detections[0], *rec.arch));
      ++pairs;
      if (landed.back() == p) ++in_region;
    }
    if (landed[0] && landed[1] && *landed[0] != *landed[1]) ++swapped;
  }
  const double secs = seconds_since(t0);
  const double r_in = pairs ? static_cast<double>(in_region) / pairs : 0.0;
  const double r_swap = images ? static_cast<double>(swapped) / images : 0.0;
  const bool pass = images > 0 && r_in >= kSteeringMinRate && r_swap >= kSteeringMinRate && secs < kSteeringBudgetSec;
  return {pass, fmt("held-out two-gap images %d: in-region %d/%d (%.3f), swap %d/%d (%.3f), need >= %.2f; "
                    "fold AP75 %.3f; %.0f s (budget %.0f s)",
                    images, in_region, pairs, r_in, swapped, images, r_swap, kSteeringMinRate, fold.ap75, secs,
                    kSteeringBudgetSec)};
}

// ---------------------------------------------------------------------------

constexpr int kAblationSeeds = 3;
constexpr int kAblationCases = 100;
constexpr int kAblationEpochs = 12;

Verdict ablation() {
  const Switches baseline{false, false, false, false}, text_only{true, false, false, false}, full{true, true, true, true};
  std::map<std::string, std::vector<double>> aps;
  for (int s = 0; s < kAblationSeeds; ++s) {
    auto opt = benchmark_options(100 + s);
    opt.n_cases = kAblationCases;
    const auto ds = build_dataset(opt);
    for (const auto& [name, sw] : {std::pair{"baseline", baseline}, {"text", text_only}, {"full", full}}) {
      TrainConfig cfg = benchmark_config(kAblationEpochs, 1 + s);
      cfg.net.switches = sw;
      const double ap = train_fold(cfg, ds.records, 0).ap75;
      std::cerr << "seed " << s << " " << name << " AP75 " << ap << "\n";
      aps[name].push_back(ap);
    }
  }
  const double b = aggregate(aps["baseline"]).mean, t = aggregate(aps["text"]).mean, f = aggregate(aps["full"]).mean;
  return {t > b && f >= b, fmt("mean AP75 over %d seeds: baseline %.4f, text %.4f, full %.4f; need text > baseline "
                               "and full >= baseline",
                               kAblationSeeds, b, t, f)};
}

// ---------------------------------------------------------------------------

constexpr double kMeanTol = 1e-12;

Verdict crossval_csv() {
  DatasetOptions o;
  o.seed = 9;
  o.n_cases = 20;
  o.n_slices = 2;
  o.image_size = 64;
  const auto ds = build_dataset(o);
  auto cfg = tiny_train_config();
  cfg.epochs = 6;
  cfg.score_thresh = 0.0;  // keeps low-confidence detections so fold APs are not all zero
  const auto first = run_ablation(cfg, ds.records);
  const auto second = run_ablation(cfg, ds.records);
  const std::string a = results_csv(first), b = results_csv(second);
  std::cerr << a;
  bool spread = false;  // guards against a vacuous all-zero table

  double mean_err = 0.0, std_err = 0.0;
  std::size_t folds = 0;
  for (const auto& row : first) {
    const auto& v = row.result.per_fold;
    folds = std::max(folds, v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    spread = spread || row.result.stddev > 0.0;
    mean_err = std::max(mean_err, std::abs(mean - row.result.mean));
    std_err = std::max(std_err, std::abs(std::sqrt(ss / v.size()) - row.result.stddev));
  }
  // Every data line carries one "<mean%>.1f±<std%>.4f" cell.
  const std::regex cell(R"(,-?\d+\.\d±\d+\.\d{4}(,|$))");
  std::istringstream lines(a);
  std::string line;
  std::getline(lines, line);
  int formatted = 0, rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    formatted += std::regex_search(line, cell);
  }
  const bool pass = spread && a == b && mean_err <= kMeanTol && std_err <= kMeanTol && rows == 6 && formatted == rows &&
                    folds == static_cast<std::size_t>(cfg.folds);
  return {pass, fmt("rerun identical: %s; %d rows x %zu folds; max |mean diff| %.1e, |std diff| %.1e (tol %.0e); "
                    "formatted cells %d/%d; nonzero spread: %s",
                    a == b ? "yes" : "no", rows, folds, mean_err, std_err, kMeanTol, formatted, rows,
                    spread ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"unit_suite", unit_suite}, {"gradient_checks", gradient_checks}, {"oracles", oracles},
      {"overfit", overfit},       {"steering", steering},               {"ablation", ablation},
      {"crossval_csv", crossval_csv}};
  std::vector<std::string> wanted(argv + 1, argv + argc);
  bool all_pass = true;
  int ran = 0;
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    ++ran;
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all_pass = all_pass && v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
  }
  if (ran == 0) {
    std::cerr << "unknown criterion; choose from:";
    for (const auto& c : criteria) std::cerr << " " << c.first;
    std::cerr << "\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
