#pragma once

// Bipartite matching between predictions and ground truth, and the set /
// denoising losses built on top of it.

#include "dino/box.hpp"
#include "dino/denoising.hpp"
#include "dino/tensor.hpp"

#include <Eigen/Core>

#include <optional>
#include <utility>
#include <vector>

namespace dino {

struct CostConfig {
  double cost_class = 2.0;
  double cost_bbox = 5.0;
  double cost_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct LossConfig {
  double cls_coef = 1.0;
  double l1_coef = 5.0;
  double giou_coef = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  /// Multiplier on the encoder selection head's loss relative to a decoder layer.
  double encoder_weight = 1.0;
};

/// Ground truth of one image.
struct Targets {
  std::vector<Box> boxes;
  std::vector<Index> labels;

  Index size() const { return static_cast<Index>(boxes.size()); }
};

/// Class logits [N, C] and boxes [N, 4] (cxcywh) from one prediction head.
struct Predictions {
  Tensor logits;
  Tensor boxes;

  Index size() const { return logits.dim(0); }
};

struct MatchAssignment {
  std::vector<std::pair<Index, Index>> pairs;  // (prediction, gt), sorted by prediction

  std::vector<Index> predictions() const;
  std::vector<Index> gts() const;
};

/// Minimum-cost assignment over a [P x G] cost matrix (Kuhn-Munkres with
/// potentials). Matches min(P, G) pairs; deterministic for tied optima.
MatchAssignment hungarian(const Eigen::Ref<const Eigen::MatrixXd>& cost);
double assignment_cost(const Eigen::Ref<const Eigen::MatrixXd>& cost, const MatchAssignment& a);

/// Sigmoid focal loss of one probability against a binary target.
double focal_loss(double prob, int target, double alpha, double gamma);

/// Focal-style class cost at probability p: positive term minus negative term.
double focal_class_cost(double prob, double alpha, double gamma);

/// [P x G] cost: class + L1 + (1 - GIoU), weighted by cfg.
Eigen::MatrixXd matching_cost(const Eigen::Ref<const RowMatrix>& pred_probs,
                              const Eigen::Ref<const RowMatrix>& pred_boxes, const Targets& gt,
                              const CostConfig& cfg);

MatchAssignment match(const Predictions& pred, const Targets& gt, const CostConfig& cfg);

/// Summed sigmoid focal loss of logits [N, C] against 0/1 targets [N, C].
Tensor sigmoid_focal_loss(const Tensor& logits, const RowMatrix& targets, double alpha, double gamma);

/// Loss terms of one prediction set, each divided by `normalizer`.
struct LossTerms {
  Tensor cls;
  Tensor l1;
  Tensor giou;

  Tensor weighted(const LossConfig& cfg) const;
};

/// Matched pairs get class + L1 + GIoU; every other prediction is pushed to
/// background by the focal term.
LossTerms prediction_loss(const Predictions& pred, const Targets& gt, const MatchAssignment& assignment,
                          const LossConfig& cfg, double normalizer);

struct SetLoss {
  Tensor total;
  std::vector<double> per_layer;  // weighted loss of each decoder layer
  double encoder = 0.0;           // weighted loss of the selection head
  double cls = 0.0, l1 = 0.0, giou = 0.0;  // unweighted sums over layers and encoder
};

std::vector<MatchAssignment> match_layers(const std::vector<Predictions>& layers, const Targets& gt,
                                          const CostConfig& cfg);

/// Sum of per-layer losses plus the optional encoder head loss.
SetLoss set_loss(const std::vector<Predictions>& layers, const std::optional<Predictions>& encoder,
                 const Targets& gt, const std::vector<MatchAssignment>& layer_assignments,
                 const std::optional<MatchAssignment>& encoder_assignment, const LossConfig& cfg);

/// Denoising reconstruction loss: positives regress their source GT with
/// class + L1 + GIoU, negatives get background focal only. No matching.
Tensor dn_loss(const std::vector<Predictions>& dn_layers, const DnBatch& batch, const Targets& gt,
               const LossConfig& cfg);

}  // namespace dino
