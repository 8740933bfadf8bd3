#include "dino/errors.hpp"
#include "dino/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace dino {
namespace {

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.image_size = 32;
  cfg.hidden_dim = 16;
  cfg.nheads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.num_queries = 8;
  cfg.enc_n_points = 2;
  cfg.dec_n_points = 2;
  cfg.dim_feedforward = 32;
  cfg.cdn_pair_capacity = 6;
  cfg.train_images = 8;
  cfg.val_images = 4;
  cfg.batch_size = 2;
  cfg.epochs = 2;
  cfg.lr_drop_epoch = 1;
  cfg.lr = 1e-3;
  cfg.lr_backbone = 1e-4;
  return cfg;
}

Trainer make_trainer(const RunConfig& cfg) {
  auto [train, val] = load_run_data(cfg);
  return Trainer(cfg, std::move(train), std::move(val));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream s;
  s << is.rdbuf();
  return s.str();
}

class TempDir : public ::testing::Test {
 protected:
  std::filesystem::path dir =
      std::filesystem::temp_directory_path() / ("dino_train_test_" + std::string(
                                                    ::testing::UnitTest::GetInstance()->current_test_info()->name()));
  void SetUp() override { std::filesystem::remove_all(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST(Trainer, StepsCoverTheEpochIncludingPartialBatch) {
  RunConfig cfg = tiny_run();
  cfg.train_images = 7;
  cfg.batch_size = 3;
  Trainer t = make_trainer(cfg);
  EXPECT_EQ(t.steps_per_epoch(), 3);
  EXPECT_EQ(t.step().images, 3);
  EXPECT_EQ(t.step().images, 3);
  EXPECT_EQ(t.step().images, 1);
}

TEST(Trainer, RepeatedStepsOnOneBatchReduceItsLoss) {
  RunConfig cfg = tiny_run();
  cfg.train_images = 2;
  cfg.aug_hflip = false;
  cfg.aug_scale_min = 1.0;
  cfg.cdn_on = false;
  cfg.epochs = 40;
  cfg.lr_drop_epoch = 40;
  Trainer t = make_trainer(cfg);
  const double first = t.step().total;
  double last = first;
  for (int i = 0; i < 30; ++i) {
    t.run_epoch();
    if (i == 29) last = t.step().total;
  }
  EXPECT_LT(last, 0.7 * first);
}

TEST(Trainer, DenoisingOffMeansZeroDenoisingLoss) {
  RunConfig cfg = tiny_run();
  cfg.cdn_on = false;
  Trainer t = make_trainer(cfg);
  const MetricsRow row = t.run_epoch();
  EXPECT_EQ(row.loss_dn, 0.0);
  EXPECT_EQ(row.dn_groups_mean, 0.0);
  EXPECT_EQ(t.metrics_rows().size(), 1u);

  cfg.cdn_on = true;
  Trainer with = make_trainer(cfg);
  const MetricsRow dn_row = with.run_epoch();
  EXPECT_GT(dn_row.loss_dn, 0.0);
  EXPECT_GT(dn_row.dn_groups_mean, 0.0);
  // Positive noise within the inner scale, negatives in the shell.
  EXPECT_LT(dn_row.dn_pos_noise_mean, cfg.lambda1);
  EXPECT_GT(dn_row.dn_neg_noise_mean, cfg.lambda1);
  EXPECT_LE(dn_row.dn_neg_noise_mean, cfg.lambda2);
}

TEST(Trainer, LearningRateDrops) {
  RunConfig cfg = tiny_run();
  Trainer t = make_trainer(cfg);
  EXPECT_EQ(t.current_lr(false), cfg.lr);
  EXPECT_EQ(t.current_lr(true), cfg.lr_backbone);
  EXPECT_EQ(t.run_epoch().lr, cfg.lr);
  EXPECT_DOUBLE_EQ(t.current_lr(false), 0.1 * cfg.lr);
  EXPECT_DOUBLE_EQ(t.run_epoch().lr, 0.1 * cfg.lr);
  EXPECT_TRUE(t.finished());
  EXPECT_THROW(t.step(), ConfigError);
}

TEST_F(TempDir, ResumeReproducesNextStepBitExactly) {
  const RunConfig cfg = tiny_run();
  Trainer a = make_trainer(cfg);
  a.run_epoch();
  a.step();
  save_checkpoint(dir / "mid.ckpt", a.checkpoint());
  const StepStats next = a.step();

  Trainer b = make_trainer(cfg);
  b.restore(load_checkpoint(dir / "mid.ckpt"));
  EXPECT_EQ(b.epoch(), 1);
  EXPECT_EQ(b.step_in_epoch(), 1);
  const StepStats resumed = b.step();
  EXPECT_EQ(resumed.total, next.total);
  EXPECT_EQ(resumed.dn, next.dn);
  const auto& pa = a.model().params().items();
  const auto& pb = b.model().params().items();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.data(), pb[i].second.data()) << pa[i].first;
  // The finished epochs agree too.
  EXPECT_EQ(a.run_epoch().loss_total, b.run_epoch().loss_total);
  EXPECT_EQ(a.metrics_rows(), b.metrics_rows());
}

TEST(Trainer, NonFiniteLossAbortsWithoutUpdating) {
  Trainer t = make_trainer(tiny_run());
  Tensor w = t.model().class_head(0).weight;
  w.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  Tensor other = t.model().params().get(t.model().params().items().front().first);
  const Buffer before = other.data();
  EXPECT_THROW(t.step(), NumericError);
  EXPECT_EQ(other.data(), before);
  EXPECT_EQ(t.step_in_epoch(), 0);
}

TEST_F(TempDir, FullRunIsDeterministic) {
  const RunConfig cfg = tiny_run();
  fit(cfg, dir / "a", std::nullopt, nullptr);
  fit(cfg, dir / "b", std::nullopt, nullptr);
  const std::string csv = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(csv, slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(slurp(dir / "a" / "predictions_val.json"), slurp(dir / "b" / "predictions_val.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "checkpoint.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "checkpoint_lr_drop.ckpt"));
  EXPECT_EQ(parse_run_config(slurp(dir / "a" / "config.txt")).seed, cfg.seed);
}

TEST_F(TempDir, ResumedRunWritesTheSameMetrics) {
  RunConfig cfg = tiny_run();
  cfg.epochs = 3;
  cfg.lr_drop_epoch = 2;
  fit(cfg, dir / "full", std::nullopt, nullptr);
  RunConfig shorter = cfg;
  shorter.epochs = 2;
  fit(shorter, dir / "part", std::nullopt, nullptr);
  fit(cfg, dir / "part", dir / "part" / "checkpoint.ckpt", nullptr);
  EXPECT_EQ(slurp(dir / "full" / "metrics.csv"), slurp(dir / "part" / "metrics.csv"));

  RunConfig other = cfg;
  other.lr = 5e-4;
  EXPECT_THROW(fit(other, dir / "bad", dir / "part" / "checkpoint.ckpt", nullptr), ConfigError);
}

TEST_F(TempDir, EvaluationIsRepeatableAndChecksShapes) {
  const RunConfig cfg = tiny_run();
  Trainer t = make_trainer(cfg);
  t.run_epoch();
  const EvalReport a = evaluate_model(t.model(), t.val_data(), cfg);
  const EvalReport b = evaluate_model(t.model(), t.val_data(), cfg);
  EXPECT_EQ(a.result.ap, b.result.ap);
  EXPECT_EQ(a.result.atd100, b.result.atd100);
  EXPECT_EQ(a.detections.size(), t.val_data().size());
  EXPECT_THROW(evaluate_model(t.model(), Dataset{}, cfg), UndefinedMetricError);

  const Checkpoint ckpt = t.checkpoint();
  EXPECT_TRUE(differing_keys(checkpoint_config(ckpt), cfg).empty());
  RunConfig wider = cfg;
  wider.hidden_dim = 32;
  Detector wrong(wider.model(), 0);
  try {
    load_parameters(wrong, ckpt);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match"), std::string::npos);
  }
  Detector right(cfg.model(), 99);
  load_parameters(right, ckpt);
  const EvalReport c = evaluate_model(right, t.val_data(), cfg);
  EXPECT_EQ(c.result.ap, a.result.ap);
}

TEST(CocoResults, PixelBoxesUseSourceSize) {
  Dataset d;
  d.category_ids = {3, 9};
  Sample s;
  s.id = 12;
  s.source_width = 200;
  s.source_height = 100;
  d.samples.push_back(s);
  const auto r = to_coco_results(d, {{{{0.5, 0.5, 0.2, 0.4}, 1, 0.75}, {{0.5, 0.5, 0.2, 0.4}, 5, 0.5}}});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].image_id, 12);
  EXPECT_EQ(r[0].category_id, 9);
  EXPECT_NEAR(r[0].bbox[0], 80, 1e-9);
  EXPECT_NEAR(r[0].bbox[1], 30, 1e-9);
  EXPECT_NEAR(r[0].bbox[2], 40, 1e-9);
  EXPECT_NEAR(r[0].bbox[3], 40, 1e-9);
}

// Strong-baseline versus full wiring, checked on the built graph.
TEST(Ablation, TogglesChangeTheWiring) {
  RunConfig baseline = tiny_run();
  baseline.qs_mode = QuerySelection::Pure;
  baseline.cdn_on = false;
  baseline.lft_on = false;
  RunConfig full = tiny_run();

  for (const RunConfig* cfg : {&baseline, &full}) {
    Trainer t = make_trainer(*cfg);
    const Sample& s = t.train_data().samples[0];
    Rng rng(0);
    const auto dn = t.make_dn_batch(s.targets, rng);
    EXPECT_EQ(dn.has_value(), cfg->cdn_on);
    const ModelOutput out = t.model().forward(s.image.tensor(), dn ? &*dn : nullptr);
    EXPECT_EQ(out.dn_layers.empty(), !cfg->cdn_on);
    EXPECT_TRUE(out.encoder.has_value());
    EXPECT_EQ(t.model().config().query_selection, cfg->qs_mode);
    EXPECT_EQ(t.model().config().look_forward, cfg->lft_on ? LookForward::Twice : LookForward::Once);
  }
}

}  // namespace
}  // namespace dino
