#include "dino/config.hpp"
#include "dino/errors.hpp"
#include "dino/random.hpp"

#include <gtest/gtest.h>

namespace dino {
namespace {

TEST(RunConfig, DefaultsValidate) {
  const RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.lr, 1e-4);
  EXPECT_EQ(cfg.weight_decay, 1e-4);
  EXPECT_EQ(cfg.clip_max_norm, 0.1);
  EXPECT_EQ(cfg.nheads, 8);
  EXPECT_EQ(cfg.focal_alpha, 0.25);
  EXPECT_EQ(cfg.dn_box_noise_scale, 0.4);
  EXPECT_EQ(cfg.dn_label_noise_ratio, 0.5);
  EXPECT_EQ(cfg.lambda1, 1.0);
  EXPECT_EQ(cfg.lambda2, 2.0);
}

TEST(RunConfig, SerializeParseRoundTrip) {
  RunConfig cfg;
  cfg.lr = 0.1 + 0.2;  // not exactly representable in short decimal form
  cfg.lambda2 = 2.5;
  cfg.qs_mode = QuerySelection::Pure;
  cfg.cdn_on = false;
  cfg.data_dir = "some/dir";
  cfg.seed = 18446744073709551615ULL;
  const RunConfig back = parse_run_config(serialize_run_config(cfg));
  EXPECT_TRUE(differing_keys(cfg, back).empty());
  EXPECT_EQ(back.lr, cfg.lr);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(serialize_run_config(back), serialize_run_config(cfg));
}

TEST(RunConfig, RandomRoundTrips) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    RunConfig cfg;
    cfg.lr = uniform(rng, 1e-6, 1e-2);
    cfg.weight_decay = uniform(rng, 0, 1e-2);
    cfg.lambda1 = uniform(rng, 0.1, 1.0);
    cfg.lambda2 = cfg.lambda1 + uniform(rng, 0.01, 2.0);
    cfg.batch_size = 1 + static_cast<Index>(uniform_index(rng, 8));
    cfg.lft_on = bernoulli(rng, 0.5);
    const RunConfig back = parse_run_config(serialize_run_config(cfg));
    EXPECT_TRUE(differing_keys(cfg, back).empty());
    EXPECT_EQ(back.lambda1, cfg.lambda1);
  }
}

TEST(RunConfig, CommentsAndBlankLines) {
  const RunConfig cfg = parse_run_config("# desk run\n\n  lr = 0.001   # faster\nepochs=3\n");
  EXPECT_EQ(cfg.lr, 0.001);
  EXPECT_EQ(cfg.epochs, 3);
}

TEST(RunConfig, UnknownKeyRejected) {
  EXPECT_THROW(parse_run_config("learning_rate = 0.1\n"), ConfigError);
  RunConfig cfg;
  EXPECT_THROW(apply_override(cfg, "lamda1=0.5"), ConfigError);
}

TEST(RunConfig, MalformedValuesRejected) {
  EXPECT_THROW(parse_run_config("lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_run_config("epochs = 2.5\n"), ConfigError);
  EXPECT_THROW(parse_run_config("cdn_on = maybe\n"), ConfigError);
  EXPECT_THROW(parse_run_config("qs_mode = random\n"), ConfigError);
  EXPECT_THROW(parse_run_config("just some words\n"), ConfigError);
}

TEST(RunConfig, ValidationRejectsInconsistentValues) {
  EXPECT_THROW(parse_run_config("lambda1 = 2\nlambda2 = 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("dropout = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("hidden_dim = 60\nnheads = 8\n"), ConfigError);
  EXPECT_THROW(parse_run_config("image_size = 60\n"), ConfigError);
  EXPECT_THROW(parse_run_config("batch_size = 0\n"), ConfigError);
}

TEST(RunConfig, OverrideApplies) {
  RunConfig cfg;
  apply_override(cfg, "num_queries = 30");
  apply_override(cfg, "lft_on=false");
  EXPECT_EQ(cfg.num_queries, 30);
  EXPECT_FALSE(cfg.lft_on);
  EXPECT_EQ(differing_keys(RunConfig{}, cfg), (std::vector<std::string>{"num_queries", "lft_on"}));
}

TEST(RunConfig, TogglesMapOntoModelAndDenoising) {
  RunConfig cfg;
  cfg.qs_mode = QuerySelection::Pure;
  cfg.lft_on = false;
  cfg.lambda1 = 0.5;
  cfg.cdn_pair_capacity = 7;
  EXPECT_EQ(cfg.model().query_selection, QuerySelection::Pure);
  EXPECT_EQ(cfg.model().look_forward, LookForward::Once);
  EXPECT_EQ(cfg.dn().lambda1, 0.5);
  EXPECT_EQ(cfg.dn().cdn_pair_capacity, 7);
  cfg.lft_on = true;
  EXPECT_EQ(cfg.model().look_forward, LookForward::Twice);
  EXPECT_EQ(cfg.cost().cost_bbox, 5.0);
  EXPECT_EQ(cfg.loss().giou_coef, 2.0);
  EXPECT_EQ(cfg.loss().encoder_weight, 1.0);
  apply_override(cfg, "enc_loss_coef=0.5");
  EXPECT_EQ(cfg.loss().encoder_weight, 0.5);
}

}  // namespace
}  // namespace dino
