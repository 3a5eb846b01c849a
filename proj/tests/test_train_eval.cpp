#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "support.hpp"
#include "textcond/checkpoint.hpp"
#include "textcond/train_eval.hpp"

using namespace textcond;
using namespace testsupport;

TEST(TrainConfig, StepScheduleDividesByTenAfterEachDrop) {
  const auto c = TrainConfig::desk();
  EXPECT_DOUBLE_EQ(c.learning_rate(1), 1e-3);
  EXPECT_DOUBLE_EQ(c.learning_rate(40), 1e-3);
  EXPECT_NEAR(c.learning_rate(41), 1e-4, 1e-18);
  EXPECT_NEAR(c.learning_rate(60), 1e-4, 1e-18);
  EXPECT_NEAR(c.learning_rate(61), 1e-5, 1e-18);
  EXPECT_NEAR(c.learning_rate(80), 1e-5, 1e-18);
}

TEST(TrainConfig, DefaultsAndPresets) {
  const auto d = TrainConfig::desk(), p = TrainConfig::large();
  EXPECT_EQ(d.batch_size, 8);
  EXPECT_EQ(d.epochs, 80);
  EXPECT_EQ(d.net.input_size, 128);
  EXPECT_EQ(p.net.input_size, 512);
  EXPECT_DOUBLE_EQ(p.box_side(), 96.0);
  EXPECT_DOUBLE_EQ(d.box_side(), 24.0);
  EXPECT_GT(d.heatmap_sigma(), 0.0);
  EXPECT_THROW(TrainConfig::from_preset("huge"), ConfigError);
}

TEST(TrainConfig, JsonRoundTripAndOverrides) {
  auto c = TrainConfig::desk();
  c.lr = 5e-4;
  c.net.switches = {true, false, true, false};
  c.lr_drop_epochs = {10};
  const nlohmann::json j = c;
  const auto back = config_from_json(j);
  EXPECT_EQ(nlohmann::json(back), j);
  for (const auto& k : config_keys()) EXPECT_TRUE(j.contains(k)) << k;

  nlohmann::json o = {{"preset", "desk"}};
  apply_overrides(o, {{"lr", "0.01"}, {"cma", "false"}, {"feature_fusion", "false"}, {"text_encoder", "stub"},
                      {"stage_blocks", "[2,2,2,2]"}});
  const auto ov = config_from_json(o);
  EXPECT_DOUBLE_EQ(ov.lr, 0.01);
  EXPECT_FALSE(ov.net.switches.cma);
  EXPECT_EQ(ov.net.stage_blocks, (std::array<int, 4>{2, 2, 2, 2}));
  EXPECT_THROW(apply_overrides(o, {{"learning_rate", "1"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"lr", "fast"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"text_condition", false}}), std::invalid_argument);
}

TEST(ConditionPairs, OnePairPerPopulatedRegion) {
  std::vector<SampleRecord> recs(2);
  recs[0].annotations = {{1, 1, Prompt::left}, {2, 2, Prompt::right}, {3, 3, Prompt::right}};
  recs[1].annotations = {{1, 1, Prompt::middle}};
  const auto pairs = condition_pairs(recs);
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_EQ(pairs[0].prompt, Prompt::left);
  EXPECT_EQ(pairs[1].prompt, Prompt::right);
  EXPECT_EQ(pairs[2].record, 1u);
}

TEST(Augmentation, IdentityTransformLeavesImageAndPoints) {
  const auto ds = tiny_dataset(1);
  auto pts = ds.records[0].annotations;
  const auto img = rotate_and_jitter(ds.records[0].image, pts, 0.0, 1.0, 0.0);
  EXPECT_EQ(img, ds.records[0].image);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_DOUBLE_EQ(pts[i].x, ds.records[0].annotations[i].x);
}

TEST(Augmentation, RotationMovesPointsWithTheImage) {
  GrayImage img{32, 32, std::vector<std::uint8_t>(32 * 32, 0)};
  for (int y = 4; y < 8; ++y)
    for (int x = 20; x < 24; ++x) img.pixels[y * 32 + x] = 255;
  std::vector<Annotation> pts{{22.0, 6.0, Prompt::left}};
  const auto rot = rotate_and_jitter(img, pts, 0.3, 1.0, 0.0);
  double sx = 0, sy = 0, sw = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double w = rot.at(x, y);
      sx += w * (x + 0.5), sy += w * (y + 0.5), sw += w;
    }
  EXPECT_NEAR(sx / sw, pts[0].x, 0.3);
  EXPECT_NEAR(sy / sw, pts[0].y, 0.3);
}

TEST(Trainer, LossDecreasesAndIterationCapHolds) {
  auto cfg = tiny_train_config();
  cfg.max_iterations = 12;
  const auto ds = tiny_dataset(6);
  Trainer t(cfg, ds.records);
  const auto first = t.train_batch(std::span<const ConditionPair>(t.pairs().data(), 4));
  for (int e = 1; e <= 20 && !t.exhausted(); ++e) t.train_epoch(e);
  EXPECT_EQ(t.iterations(), 12);
  const auto last = t.train_batch(std::span<const ConditionPair>(t.pairs().data(), 4));
  EXPECT_LT(last.total, first.total);
  EXPECT_DOUBLE_EQ(first.total, first.heatmap + first.offset + first.alignment);
}

TEST(Trainer, NonFiniteLossAbortsLoudly) {
  const auto ds = tiny_dataset(2);
  Trainer t(tiny_train_config(), ds.records);
  // Injected after the last ReLU, so nothing downstream can mask it.
  t.parameters().find("head.offset.conv2.bias")->fill(std::numeric_limits<float>::quiet_NaN());
  EXPECT_THROW(t.train_batch(std::span<const ConditionPair>(t.pairs().data(), 1)), NonFiniteLoss);
}

TEST(Trainer, ResizesRecordsToNetworkInput) {
  auto cfg = tiny_train_config();
  DatasetOptions o;
  o.n_cases = 2;
  o.n_slices = 1;
  o.image_size = 128;
  const auto ds = build_dataset(o);
  Trainer t(cfg, ds.records);
  EXPECT_EQ(t.records()[0].image.width, 64);
  EXPECT_NEAR(t.records()[0].annotations[0].x, ds.records[0].annotations[0].x / 2, 1e-12);
}

TEST(Checkpoint, RoundTripPreservesOutputsBitExactly) {
  const auto ds = tiny_dataset(3);
  auto cfg = tiny_train_config();
  cfg.max_iterations = 3;
  Trainer t(cfg, ds.records);
  t.train_epoch(1);
  const auto bytes = serialize_checkpoint(t.model(), cfg, t.normalization());
  const auto bundle = deserialize_checkpoint(bytes);
  EXPECT_EQ(nlohmann::json(bundle.config), nlohmann::json(cfg));
  EXPECT_EQ(bundle.model_id, model_id_of(bytes));
  EXPECT_EQ(bundle.norm.mean, t.normalization().mean);
  const auto enc = make_text_encoder(cfg);
  const Predictor a(t.model(), *enc, t.normalization(), {}), b(*bundle.net, *enc, bundle.norm, {});
  const auto ra = a.run_one(ds.records[0].image, Prompt::left, true), rb = b.run_one(ds.records[0].image, Prompt::left, true);
  EXPECT_EQ(ra.heatmap, rb.heatmap);
  EXPECT_EQ(serialize_checkpoint(*bundle.net, bundle.config, bundle.norm), bytes);

  const auto dir = temp_dir("ckpt");
  save_checkpoint((dir / "m.ckpt").string(), t.model(), cfg, t.normalization());
  EXPECT_EQ(load_checkpoint((dir / "m.ckpt").string()).model_id, bundle.model_id);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const auto ds = tiny_dataset(2);
  auto cfg = tiny_train_config();
  Trainer t(cfg, ds.records);
  auto bytes = serialize_checkpoint(t.model(), cfg, t.normalization());
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(truncated), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(trailing), CheckpointError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/m.ckpt"), CheckpointError);
}

TEST(Evaluation, PredictionsMapBackToOriginalPixels) {
  const auto ds = tiny_dataset(2);
  Trainer t(tiny_train_config(), ds.records);
  const Predictor pred(t.model(), t.text_encoder(), t.normalization(), {5, 0.0, 4});
  // 2x pixel replication downsamples back to the original exactly.
  const GrayImage& src = ds.records[0].image;
  GrayImage big{2 * src.width, 2 * src.height, std::vector<std::uint8_t>(4 * src.pixels.size())};
  for (int y = 0; y < big.height; ++y)
    for (int x = 0; x < big.width; ++x) big.pixels[y * big.width + x] = src.at(x / 2, y / 2);
  const auto small = pred.run_one(src, Prompt::left);
  const auto large = pred.run_one(big, Prompt::left);
  ASSERT_FALSE(small.detections.empty());
  ASSERT_EQ(small.detections.size(), large.detections.size());
  for (std::size_t i = 0; i < small.detections.size(); ++i) {
    EXPECT_DOUBLE_EQ(large.detections[i].x, 2 * small.detections[i].x);
    EXPECT_DOUBLE_EQ(large.detections[i].y, 2 * small.detections[i].y);
    EXPECT_EQ(large.detections[i].score, small.detections[i].score);
  }
  const double ap = evaluate_ap75(t.predictor(), ds.records, t.config().box_side());
  EXPECT_GE(ap, 0.0);
  EXPECT_LE(ap, 1.0);
}

TEST(TrainFold, RejectsOutOfRangeFold) {
  const auto ds = tiny_dataset(5);
  try {
    train_fold(tiny_train_config(), ds.records, 9);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fold must be 0..4"), std::string::npos);
  }
}

TEST(TrainFold, IdenticalFoldsGiveIdenticalAp) {
  // Folds 0 and 1 hold the same sample, so both runs train on identical data.
  auto ds = tiny_dataset(3);
  std::vector<SampleRecord> recs{ds.records[0], ds.records[0], ds.records[1], ds.records[2]};
  recs[0].fold = 0;
  recs[1].fold = 1;
  recs[2].fold = recs[3].fold = 2;
  auto cfg = tiny_train_config();
  cfg.folds = 3;
  const auto out = run_crossval(cfg, recs, {0, 1});
  EXPECT_EQ(out.folds[0].ap75, out.folds[1].ap75);
  EXPECT_EQ(out.folds[0].checkpoint, out.folds[1].checkpoint);
  EXPECT_NEAR(out.result.mean, (out.folds[0].ap75 + out.folds[1].ap75) / 2, 1e-12);
}

TEST(TrainFold, SameSeedReproducesCheckpointAndMetrics) {
  const auto ds = tiny_dataset(5);
  auto cfg = tiny_train_config();
  const auto dir = temp_dir("fold_repro");
  const auto a = train_fold(cfg, ds.records, 2, {nullptr, (dir / "a").string()});
  const auto b = train_fold(cfg, ds.records, 2, {nullptr, (dir / "b").string()});
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.ap75, b.ap75);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const auto csv = slurp(dir / "a" / "fold2_metrics.csv");
  EXPECT_EQ(csv, slurp(dir / "b" / "fold2_metrics.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,L_h,L_o,L_align,L_total,val_AP75");
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "fold2.ckpt"));
  cfg.seed = 1;
  EXPECT_NE(train_fold(cfg, ds.records, 2).checkpoint, a.checkpoint);
}

TEST(Ablation, OneRowPerSwitchCombination) {
  const auto ds = tiny_dataset(5);
  auto cfg = tiny_train_config();
  cfg.epochs = 1;
  const auto rows = run_ablation(cfg, ds.records, {}, {0});
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].switches, ablation_rows()[i]);
    EXPECT_EQ(rows[i].result.per_fold.size(), 1u);
  }
}
