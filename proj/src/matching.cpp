#include "dino/matching.hpp"

#include "dino/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dino {

std::vector<Index> MatchAssignment::predictions() const {
  std::vector<Index> out;
  for (const auto& [p, g] : pairs) out.push_back(p);
  return out;
}

std::vector<Index> MatchAssignment::gts() const {
  std::vector<Index> out;
  for (const auto& [p, g] : pairs) out.push_back(g);
  return out;
}

namespace {

// Rows are assigned to distinct columns; requires rows <= cols. Returns the
// column of each row.
std::vector<Index> solve_rows(const Eigen::MatrixXd& a) {
  const Index n = a.rows(), m = a.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<Index> p(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> col_of(n, -1);
  for (Index j = 1; j <= m; ++j)
    if (p[j] != 0) col_of[p[j] - 1] = j - 1;
  return col_of;
}

}  // namespace

MatchAssignment hungarian(const Eigen::Ref<const Eigen::MatrixXd>& cost) {
  if (!cost.allFinite()) throw InvalidCostError("hungarian: cost matrix has non-finite entries");
  MatchAssignment out;
  const Index preds = cost.rows(), gts = cost.cols();
  if (preds == 0 || gts == 0) return out;
  if (gts <= preds) {
    // One row per GT; scanning predictions in index order favors low indices on ties.
    const auto pred_of = solve_rows(cost.transpose());
    for (Index g = 0; g < gts; ++g) out.pairs.emplace_back(pred_of[g], g);
  } else {
    const auto gt_of = solve_rows(cost);
    for (Index p = 0; p < preds; ++p) out.pairs.emplace_back(p, gt_of[p]);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

double assignment_cost(const Eigen::Ref<const Eigen::MatrixXd>& cost, const MatchAssignment& a) {
  double total = 0.0;
  for (const auto& [p, g] : a.pairs) total += cost(p, g);
  return total;
}

namespace {
constexpr double kProbEps = 1e-8;
}

double focal_loss(double prob, int target, double alpha, double gamma) {
  const double p = std::clamp(prob, kProbEps, 1.0 - kProbEps);
  if (target == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double focal_class_cost(double prob, double alpha, double gamma) {
  return focal_loss(prob, 1, alpha, gamma) - focal_loss(prob, 0, alpha, gamma);
}

Eigen::MatrixXd matching_cost(const Eigen::Ref<const RowMatrix>& pred_probs,
                              const Eigen::Ref<const RowMatrix>& pred_boxes, const Targets& gt,
                              const CostConfig& cfg) {
  const Index p = pred_probs.rows(), g = gt.size();
  if (pred_boxes.rows() != p) {
    throw AlignmentError("matching_cost: " + std::to_string(p) + " class rows vs " +
                         std::to_string(pred_boxes.rows()) + " box rows");
  }
  Eigen::MatrixXd c(p, g);
  for (Index i = 0; i < p; ++i) {
    const Box pb{pred_boxes(i, 0), pred_boxes(i, 1), pred_boxes(i, 2), pred_boxes(i, 3)};
    for (Index j = 0; j < g; ++j) {
      const Box& gb = gt.boxes[static_cast<std::size_t>(j)];
      const double prob = pred_probs(i, gt.labels[static_cast<std::size_t>(j)]);
      c(i, j) = cfg.cost_class * focal_class_cost(prob, cfg.focal_alpha, cfg.focal_gamma) +
                cfg.cost_bbox * l1_box_distance(pb, gb) +
                cfg.cost_giou * (1.0 - giou(to_xyxy(pb), to_xyxy(gb)));
    }
  }
  return c;
}

MatchAssignment match(const Predictions& pred, const Targets& gt, const CostConfig& cfg) {
  const RowMatrix probs = (1.0 + (-pred.logits.mat().array()).exp()).inverse().matrix();
  return hungarian(matching_cost(probs, pred.boxes.mat(), gt, cfg));
}

Tensor sigmoid_focal_loss(const Tensor& logits, const RowMatrix& targets, double alpha, double gamma) {
  if (logits.rank() != 2 || logits.dim(0) != targets.rows() || logits.dim(1) != targets.cols()) {
    throw ShapeError("sigmoid_focal_loss: logits " + shape_to_string(logits.shape()) + " vs targets [" +
                     std::to_string(targets.rows()) + "x" + std::to_string(targets.cols()) + "]");
  }
  const Tensor t = Tensor::from_matrix(targets);
  const Tensor not_t = Tensor::from_matrix((1.0 - targets.array()).matrix());
  const Tensor p = sigmoid(logits);
  const Tensor pc = clamp(p, kProbEps, 1.0 - kProbEps);
  const Tensor pos = t * pow(1.0 - p, gamma) * log(pc);
  const Tensor neg = not_t * pow(p, gamma) * log(1.0 - pc);
  return sum(scale(pos, -alpha) + scale(neg, -(1.0 - alpha)));
}

Tensor LossTerms::weighted(const LossConfig& cfg) const {
  return scale(cls, cfg.cls_coef) + scale(l1, cfg.l1_coef) + scale(giou, cfg.giou_coef);
}

namespace {

// Class targets plus the box terms over an explicit list of (query, gt) pairs.
LossTerms pairs_loss(const Predictions& pred, const Targets& gt, const std::vector<Index>& queries,
                     const std::vector<Index>& gt_rows, const std::vector<Index>& box_queries,
                     const std::vector<Index>& box_gts, const LossConfig& cfg, double normalizer) {
  const Index n = pred.size(), c = pred.logits.dim(1);
  RowMatrix targets = RowMatrix::Zero(n, c);
  for (std::size_t i = 0; i < queries.size(); ++i)
    targets(queries[i], gt.labels[static_cast<std::size_t>(gt_rows[i])]) = 1.0;
  LossTerms terms;
  const double inv = 1.0 / normalizer;
  terms.cls = scale(sigmoid_focal_loss(pred.logits, targets, cfg.focal_alpha, cfg.focal_gamma), inv);
  if (box_queries.empty()) {
    terms.l1 = Tensor::scalar(0.0);
    terms.giou = Tensor::scalar(0.0);
    return terms;
  }
  RowMatrix target_boxes(static_cast<Index>(box_gts.size()), 4);
  for (std::size_t i = 0; i < box_gts.size(); ++i)
    target_boxes.row(static_cast<Index>(i)) = gt.boxes[static_cast<std::size_t>(box_gts[i])].vec().transpose();
  const Tensor matched = gather(pred.boxes, box_queries);
  const Tensor target = Tensor::from_matrix(target_boxes);
  terms.l1 = scale(sum(paired_l1(matched, target)), inv);
  terms.giou = scale(sum(1.0 - paired_giou(matched, target)), inv);
  return terms;
}

double normalizer_for(const Targets& gt) { return std::max<double>(1.0, static_cast<double>(gt.size())); }

}  // namespace

LossTerms prediction_loss(const Predictions& pred, const Targets& gt, const MatchAssignment& assignment,
                          const LossConfig& cfg, double normalizer) {
  const auto q = assignment.predictions();
  const auto g = assignment.gts();
  return pairs_loss(pred, gt, q, g, q, g, cfg, normalizer);
}

std::vector<MatchAssignment> match_layers(const std::vector<Predictions>& layers, const Targets& gt,
                                          const CostConfig& cfg) {
  std::vector<MatchAssignment> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(match(l, gt, cfg));
  return out;
}

SetLoss set_loss(const std::vector<Predictions>& layers, const std::optional<Predictions>& encoder,
                 const Targets& gt, const std::vector<MatchAssignment>& layer_assignments,
                 const std::optional<MatchAssignment>& encoder_assignment, const LossConfig& cfg) {
  if (layers.size() != layer_assignments.size()) {
    throw AlignmentError("set_loss: " + std::to_string(layers.size()) + " layers vs " +
                         std::to_string(layer_assignments.size()) + " assignments");
  }
  if (encoder.has_value() != encoder_assignment.has_value()) {
    throw AlignmentError("set_loss: encoder predictions and assignment must be given together");
  }
  const double norm = normalizer_for(gt);
  SetLoss out;
  std::vector<Tensor> parts;
  auto accumulate = [&](const LossTerms& t) {
    out.cls += t.cls.item();
    out.l1 += t.l1.item();
    out.giou += t.giou.item();
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LossTerms t = prediction_loss(layers[i], gt, layer_assignments[i], cfg, norm);
    accumulate(t);
    parts.push_back(t.weighted(cfg));
    out.per_layer.push_back(parts.back().item());
  }
  if (encoder) {
    const LossTerms t = prediction_loss(*encoder, gt, *encoder_assignment, cfg, norm);
    accumulate(t);
    parts.push_back(scale(t.weighted(cfg), cfg.encoder_weight));
    out.encoder = parts.back().item();
  }
  if (parts.empty()) {
    out.total = Tensor::scalar(0.0);
  } else {
    Tensor total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) total = total + parts[i];
    out.total = total;
  }
  return out;
}

Tensor dn_loss(const std::vector<Predictions>& dn_layers, const DnBatch& batch, const Targets& gt,
               const LossConfig& cfg) {
  if (batch.gt_count != gt.size()) {
    throw AlignmentError("dn_loss: batch built from " + std::to_string(batch.gt_count) + " GTs, got " +
                         std::to_string(gt.size()));
  }
  std::vector<Index> pos_queries, pos_gts;
  for (Index g = 0; g < batch.group_count; ++g) {
    const auto& group = batch.groups[static_cast<std::size_t>(g)];
    for (Index i = 0; i < batch.gt_count; ++i) {
      pos_queries.push_back(batch.positive_index(g, i));
      pos_gts.push_back(group.gt_index[static_cast<std::size_t>(i)]);
    }
  }
  const double norm = normalizer_for(gt);
  Tensor total = Tensor::scalar(0.0);
  for (const auto& layer : dn_layers) {
    if (layer.size() != batch.dn_query_count() || layer.boxes.dim(0) != batch.dn_query_count()) {
      throw AlignmentError("dn_loss: " + std::to_string(layer.size()) + " predictions for " +
                           std::to_string(batch.dn_query_count()) + " denoising queries");
    }
    if (batch.dn_query_count() == 0) continue;
    const LossTerms t = pairs_loss(layer, gt, pos_queries, pos_gts, pos_queries, pos_gts, cfg, norm);
    total = total + t.weighted(cfg);
  }
  return total;
}

}  // namespace dino
