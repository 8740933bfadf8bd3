#include "dino/checkpoint.hpp"
#include "dino/errors.hpp"
#include "dino/matching.hpp"
#include "dino/model.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace dino {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.hidden_dim = 16;
  cfg.nheads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.num_queries = 5;
  cfg.enc_n_points = 2;
  cfg.dec_n_points = 2;
  cfg.num_levels = 2;
  cfg.dim_feedforward = 16;
  cfg.num_classes = 3;
  return cfg;
}

Tensor random_image(Rng& rng, Index size) { return testing::random_tensor({size, size, 3}, rng, 0.0, 1.0); }

// Randomizes every parameter so zero-initialized heads and offsets also carry signal.
void perturb_params(Detector& model, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& [name, t] : model.params().items()) {
    Tensor handle = t;
    for (Index i = 0; i < handle.numel(); ++i) handle.mutable_data()[i] += uniform(rng, -scale, scale);
  }
}

Targets sample_targets(Rng& rng, Index n, Index classes) {
  Targets t;
  for (Index i = 0; i < n; ++i) {
    t.boxes.push_back({uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75), uniform(rng, 0.1, 0.4), uniform(rng, 0.1, 0.4)});
    t.labels.push_back(static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(classes))));
  }
  return t;
}

TEST(Backbone, LevelShapes) {
  ModelConfig cfg;
  Detector model(cfg, 1);
  const MultiScaleFeatures f = model.backbone(Tensor::zeros({64, 64, 3}));
  ASSERT_EQ(f.shapes.size(), 2u);
  EXPECT_EQ(f.shapes[0].height, 8);
  EXPECT_EQ(f.shapes[0].width, 8);
  EXPECT_EQ(f.shapes[1].height, 4);
  EXPECT_EQ(f.shapes[1].width, 4);
  EXPECT_EQ(f.size(), 80);
  EXPECT_TRUE(f.tokens.data().allFinite());
  EXPECT_TRUE(f.pos.data().allFinite());
}

TEST(Backbone, IndivisibleImage) {
  Detector model(tiny_config(), 1);
  EXPECT_THROW(model.backbone(Tensor::zeros({30, 32, 3})), ShapeError);
  EXPECT_THROW(model.backbone(Tensor::zeros({32, 32, 1})), ShapeError);
}

TEST(Backbone, ConvGradient) {
  Detector model(tiny_config(), 2);
  perturb_params(model, 3);
  Rng rng(4);
  const Tensor image = random_image(rng, 32);
  const Tensor w = model.params().get("backbone.conv1.weight");
  const auto r = testing::grad_check(
      [&](const std::vector<Tensor>&) { return testing::probe(model.backbone(image).tokens); }, {w}, 1e-5, 40, 5);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(DeformableAttention, ConstantFeatureMap) {
  const ModelConfig cfg = tiny_config();
  Detector model(cfg, 5);
  const DeformableAttention& attn = model.decoder_layer(0).cross_attn;
  const std::vector<LevelShape> shapes{{4, 4}, {2, 2}};
  Rng rng(6);
  Buffer row = testing::random_tensor({cfg.hidden_dim}, rng).data();
  RowMatrix value = row.transpose().replicate(20, 1);
  RowMatrix refs(3, 4);
  refs << 0.5, 0.5, 0.2, 0.2, 0.45, 0.55, 0.1, 0.3, 0.52, 0.48, 0.3, 0.1;
  const Tensor query = testing::random_tensor({3, cfg.hidden_dim}, rng);
  const Tensor out = attn(query, Tensor::from_matrix(refs), ReferenceKind::Box, Tensor::from_matrix(value), shapes);
  const Tensor expected = attn.out(attn.value_proj(Tensor::from_matrix(value.topRows(1))));
  for (Index q = 0; q < 3; ++q)
    for (Index c = 0; c < cfg.hidden_dim; ++c) EXPECT_NEAR(out.mat()(q, c), expected.at(c), 1e-12);
}

TEST(DeformableAttention, UniformWeightsAtInit) {
  Detector model(tiny_config(), 7);
  const DeformableAttention& attn = model.decoder_layer(0).cross_attn;
  Rng rng(8);
  const Tensor query = testing::random_tensor({4, 16}, rng);
  const Index lp = attn.levels * attn.points;
  const Tensor w = softmax(reshape(attn.weights(query), {4 * attn.heads, lp}), 1);
  for (Index i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.at(i), 1.0 / static_cast<double>(lp));
}

TEST(QuerySelection, MixedContentIsImageIndependent) {
  Detector model(tiny_config(), 9);
  Rng rng(10);
  const Tensor a = random_image(rng, 32), b = random_image(rng, 32);
  const auto fa = model.backbone(a), fb = model.backbone(b);
  const QueryInit qa = model.select_queries(fa, model.encode(fa));
  const QueryInit qb = model.select_queries(fb, model.encode(fb));
  EXPECT_EQ(qa.content.data(), qb.content.data());
  EXPECT_NE(qa.anchors.data(), qb.anchors.data());
}

TEST(QuerySelection, PureContentDependsOnImage) {
  ModelConfig cfg = tiny_config();
  cfg.query_selection = QuerySelection::Pure;
  Detector model(cfg, 11);
  Rng rng(12);
  const auto fa = model.backbone(random_image(rng, 32)), fb = model.backbone(random_image(rng, 32));
  const QueryInit qa = model.select_queries(fa, model.encode(fa));
  const QueryInit qb = model.select_queries(fb, model.encode(fb));
  EXPECT_NE(qa.content.data(), qb.content.data());
}

TEST(QuerySelection, StaticSkipsSelection) {
  ModelConfig cfg = tiny_config();
  cfg.query_selection = QuerySelection::Static;
  Detector model(cfg, 13);
  Rng rng(14);
  const auto out = model.forward(random_image(rng, 32));
  EXPECT_FALSE(out.encoder.has_value());
  EXPECT_EQ(out.final().size(), cfg.num_queries);
}

TEST(QuerySelection, TopOneIsArgmax) {
  ModelConfig cfg = tiny_config();
  cfg.num_queries = 1;
  Detector model(cfg, 15);
  perturb_params(model, 16);
  Rng rng(17);
  for (int t = 0; t < 5; ++t) {
    const auto f = model.backbone(random_image(rng, 32));
    const QueryInit q = model.select_queries(f, model.encode(f));
    const auto logits = q.selection->all_logits.mat();
    Index best = 0;
    for (Index i = 1; i < logits.rows(); ++i)
      if (logits.row(i).maxCoeff() > logits.row(best).maxCoeff()) best = i;
    EXPECT_EQ(q.selection->indices[0], best);
    EXPECT_EQ(q.anchors.mat().row(0), q.selection->all_boxes.mat().row(best));
  }
}

TEST(QuerySelection, CapsAtFeatureCount) {
  ModelConfig cfg = tiny_config();
  cfg.num_queries = 50;  // 32x32 input has 16 + 4 tokens
  Detector model(cfg, 18);
  const auto out = model.forward(Tensor::zeros({32, 32, 3}));
  EXPECT_EQ(out.final().size(), 20);
}

TEST(Decoder, ZeroOffsetsKeepInitialAnchors) {
  // Box heads end in a zero layer at initialization, so every offset is 0.
  Detector model(tiny_config(), 19);
  Rng rng(20);
  const auto out = model.forward(random_image(rng, 32));
  for (const auto& layer : out.layers) {
    const RowMatrix diff = layer.boxes.to_matrix() - out.initial_anchors;
    EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Decoder, OutputCounts) {
  const ModelConfig cfg = tiny_config();
  Detector model(cfg, 21);
  Rng rng(22);
  const Tensor image = random_image(rng, 32);
  EXPECT_EQ(model.forward(image).final().size(), cfg.num_queries);
  DnConfig dn_cfg;
  dn_cfg.cdn_pair_capacity = 10;
  dn_cfg.num_classes = cfg.num_classes;
  const Targets gt = sample_targets(rng, 3, cfg.num_classes);
  const DnBatch batch = build_dn_batch(gt.boxes, gt.labels, dn_cfg, cfg.num_queries, rng);
  const auto out = model.forward(image, &batch);
  ASSERT_EQ(out.dn_layers.size(), static_cast<std::size_t>(cfg.dec_layers));
  EXPECT_EQ(out.dn_layers[0].size(), batch.group_count * 2 * 3);
  EXPECT_EQ(out.dn_layers[0].size(), 18);
  EXPECT_EQ(out.final().size(), cfg.num_queries);
}

TEST(Decoder, MaskMismatchIsAlignmentError) {
  const ModelConfig cfg = tiny_config();
  Detector model(cfg, 23);
  Rng rng(24);
  DnConfig dn_cfg;
  dn_cfg.num_classes = cfg.num_classes;
  const Targets gt = sample_targets(rng, 2, cfg.num_classes);
  const DnBatch batch = build_dn_batch(gt.boxes, gt.labels, dn_cfg, cfg.num_queries + 1, rng);
  EXPECT_THROW(model.forward(random_image(rng, 32), &batch), AlignmentError);
}

TEST(Decoder, DeterministicForward) {
  Detector model(tiny_config(), 25);
  perturb_params(model, 26);
  Rng rng(27);
  const Tensor image = random_image(rng, 32);
  const auto a = model.forward(image), b = model.forward(image);
  EXPECT_EQ(a.final().boxes.data(), b.final().boxes.data());
  EXPECT_EQ(a.final().logits.data(), b.final().logits.data());
}

TEST(Decoder, AnchorsStayValid) {
  Detector model(tiny_config(), 28);
  perturb_params(model, 29, 1.0);
  Rng rng(30);
  const auto out = model.forward(random_image(rng, 32));
  for (const auto& layer : out.layers) {
    const auto m = layer.boxes.mat();
    EXPECT_GT(m.minCoeff(), 0.0);
    EXPECT_LT(m.maxCoeff(), 1.0);
  }
}

// Layer-2 box loss as a function of the layer-1 box head, everything else fixed.
struct LookForwardProbe {
  ModelConfig cfg;
  Detector model;
  Tensor image;
  Targets gt;
  MatchAssignment assignment;

  explicit LookForwardProbe(LookForward mode)
      : cfg([&] {
          ModelConfig c = tiny_config();
          c.look_forward = mode;
          c.shared_heads = false;
          return c;
        }()),
        model(cfg, 31) {
    perturb_params(model, 32);
    Rng rng(33);
    image = random_image(rng, 32);
    gt = sample_targets(rng, 2, cfg.num_classes);
    assignment = match(model.forward(image).layers[1], gt, CostConfig{});
  }

  Tensor layer2_box_loss() const {
    const auto out = model.forward(image);
    const LossTerms t = prediction_loss(out.layers[1], gt, assignment, LossConfig{}, 2.0);
    return scale(t.l1, 5.0) + scale(t.giou, 2.0);
  }

  std::vector<Tensor> head_params() const {
    std::vector<Tensor> out;
    for (const auto& l : model.box_head(0).layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }
};

TEST(LookForward, OnceBlocksLayerTwoGradient) {
  LookForwardProbe probe(LookForward::Once);
  probe.model.params().zero_grad();
  probe.layer2_box_loss().backward();
  for (const auto& p : probe.head_params()) EXPECT_TRUE(p.grad().isZero(0.0));
}

TEST(LookForward, TwiceRoutesLayerTwoGradient) {
  LookForwardProbe probe(LookForward::Twice);
  probe.model.params().zero_grad();
  probe.layer2_box_loss().backward();
  double norm = 0.0;
  for (const auto& p : probe.head_params()) norm += p.grad().squaredNorm();
  EXPECT_GT(norm, 0.0);

  // Oracle: the box path alone, with the layer-1 decoder output, the initial
  // anchors and the layer-2 offsets frozen at their forward values.
  const auto out = probe.model.forward(probe.image);
  const Tensor h0 = detach(out.hidden[0]);
  const Tensor b0 = Tensor::from_matrix(out.initial_anchors);
  const Tensor delta2 = detach(probe.model.box_head(1)(out.hidden[1]));
  const Mlp& head = probe.model.box_head(0);
  auto box_path_loss = [&](const std::vector<Tensor>&) {
    const Tensor b1 = box_update(b0, head(h0));
    const Predictions p{out.layers[1].logits, box_update(b1, delta2)};
    const LossTerms t = prediction_loss(p, probe.gt, probe.assignment, LossConfig{}, 2.0);
    return scale(t.l1, 5.0) + scale(t.giou, 2.0);
  };
  // Same value as the full model's layer-2 box loss.
  EXPECT_EQ(box_path_loss({}).item(), probe.layer2_box_loss().item());
  std::vector<Buffer> full_grads;
  for (const auto& p : probe.head_params()) full_grads.push_back(p.grad());
  const auto r = testing::grad_check(box_path_loss, probe.head_params());
  EXPECT_LT(r.max_rel_error, 1e-4);
  // grad_check recomputed the gradient through the oracle; it must agree with the full model.
  const auto params = probe.head_params();
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_LT((params[i].grad() - full_grads[i]).cwiseAbs().maxCoeff(), 1e-12) << "tensor " << i;
}

TEST(LookForward, ModesAgreeInValue) {
  LookForwardProbe once(LookForward::Once), twice(LookForward::Twice);
  const auto a = once.model.forward(once.image), b = twice.model.forward(twice.image);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].boxes.data(), b.layers[i].boxes.data());
    EXPECT_EQ(a.layers[i].logits.data(), b.layers[i].logits.data());
  }
}

TEST(Mask, DenoisingInputsNeverReachMatchingQueries) {
  const ModelConfig cfg = tiny_config();
  Detector model(cfg, 34);
  perturb_params(model, 35);
  Rng rng(36);
  const Tensor image = random_image(rng, 32);
  const auto f = model.backbone(image);
  const Tensor memory = model.encode(f);
  const QueryInit init = model.select_queries(f, memory);
  DnConfig dn_cfg;
  dn_cfg.num_classes = cfg.num_classes;
  dn_cfg.cdn_pair_capacity = 6;
  const Targets gt = sample_targets(rng, 2, cfg.num_classes);
  const DnBatch batch = build_dn_batch(gt.boxes, gt.labels, dn_cfg, cfg.num_queries, rng);
  const Index dn = batch.dn_query_count();
  auto run = [&](std::uint64_t seed) {
    Rng r(seed);
    const Tensor dn_content = testing::random_tensor({dn, cfg.hidden_dim}, r, -5, 5);
    const Tensor dn_boxes = testing::random_tensor({dn, 4}, r, 0.1, 0.9);
    return model.decode(concat({dn_boxes, init.anchors}, 0), concat({dn_content, init.content}, 0), dn, memory, f,
                        batch.attention_mask);
  };
  const ModelOutput a = run(1), b = run(2);
  for (std::size_t i = 0; i < a.self_attention_outputs.size(); ++i)
    EXPECT_TRUE(a.self_attention_outputs[i] == b.self_attention_outputs[i]) << "layer " << i;
  EXPECT_EQ(a.final().boxes.data(), b.final().boxes.data());
  EXPECT_NE(a.dn_layers[0].boxes.data(), b.dn_layers[0].boxes.data());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Detector model(tiny_config(), 37);
  perturb_params(model, 38);
  Checkpoint ckpt;
  ckpt.meta["step"] = 12;
  for (const auto& [name, t] : model.params().items()) ckpt.tensors.push_back({name, t.shape(), t.data()});
  const auto path = std::filesystem::temp_directory_path() / "dino_desk_model_test.ckpt";
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.meta["step"].get<int>(), 12);
  ASSERT_EQ(back.tensors.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ckpt.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ckpt.tensors[i].shape);
    EXPECT_EQ(std::memcmp(back.tensors[i].data.data(), ckpt.tensors[i].data.data(),
                          sizeof(double) * static_cast<std::size_t>(ckpt.tensors[i].data.size())),
              0);
  }
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "dino_desk_garbage.ckpt";
  {
    std::ofstream os(path);
    os << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

}  // namespace
}  // namespace dino
