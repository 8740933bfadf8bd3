#include "dino/diagnostics.hpp"

#include "dino/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

namespace dino {

std::vector<double> EvalOptions::coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double box_area(const Box& b) { return b.w * b.h; }

// Score-descending order with ties kept in index order.
template <typename Score>
std::vector<std::size_t> rank_by_score(std::size_t n, Score score) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score(a) > score(b); });
  return order;
}

double nan_mean(const std::vector<double>& v) {
  double sum = 0.0;
  int n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      sum += x;
      ++n;
    }
  return n == 0 ? kNaN : sum / n;
}

}  // namespace

double average_precision(const std::vector<std::vector<Detection>>& preds, const std::vector<Targets>& gts,
                         Index label, double iou_threshold, double area_lo, double area_hi, Index max_detections) {
  if (preds.size() != gts.size()) {
    throw AlignmentError("average_precision: " + std::to_string(preds.size()) + " prediction sets for " +
                         std::to_string(gts.size()) + " images");
  }
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> scored;
  Index positives = 0;
  const double t = std::min(iou_threshold, 1.0 - 1e-10);
  auto in_range = [&](const Box& b) { return box_area(b) >= area_lo && box_area(b) < area_hi; };

  for (std::size_t img = 0; img < gts.size(); ++img) {
    // Ground truth of this class, in-range objects first.
    std::vector<Box> gt;
    std::vector<char> gt_ignore;
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t g = 0; g < gts[img].boxes.size(); ++g) {
        if (gts[img].labels[g] != label) continue;
        const bool ignore = !in_range(gts[img].boxes[g]);
        if (ignore != (pass == 1)) continue;
        gt.push_back(gts[img].boxes[g]);
        gt_ignore.push_back(ignore);
        if (!ignore) ++positives;
      }
    std::vector<Detection> dets;
    for (const auto& d : preds[img])
      if (d.label == label) dets.push_back(d);
    const auto order = rank_by_score(dets.size(), [&](std::size_t i) { return dets[i].score; });
    const std::size_t keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(max_detections));

    std::vector<char> taken(gt.size(), 0);
    for (std::size_t r = 0; r < keep; ++r) {
      const Detection& d = dets[order[r]];
      double best_iou = t;
      int best = -1;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (taken[g]) continue;
        // Once matched to a counted GT, never trade down to an ignored one.
        if (best >= 0 && !gt_ignore[static_cast<std::size_t>(best)] && gt_ignore[g]) break;
        const double o = iou(to_xyxy(d.box), to_xyxy(gt[g]));
        if (o < best_iou) continue;
        best_iou = o;
        best = static_cast<int>(g);
      }
      if (best >= 0) {
        taken[static_cast<std::size_t>(best)] = 1;
        if (!gt_ignore[static_cast<std::size_t>(best)]) scored.push_back({d.score, true});
      } else if (in_range(d.box)) {
        scored.push_back({d.score, false});
      }
    }
  }
  if (positives == 0) return kNaN;

  const auto order = rank_by_score(scored.size(), [&](std::size_t i) { return scored[i].score; });
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (std::size_t i : order) {
    (scored[i].tp ? tp : fp) += 1;
    recall.push_back(tp / static_cast<double>(positives));
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

EvalResult evaluate_ap(const std::vector<std::vector<Detection>>& preds, const std::vector<Targets>& gts,
                       const EvalOptions& opts) {
  std::set<Index> labels;
  for (const auto& g : gts) labels.insert(g.labels.begin(), g.labels.end());
  if (labels.empty()) throw UndefinedMetricError("evaluate_ap: no ground-truth objects");

  const double inf = std::numeric_limits<double>::infinity();
  const std::array<std::pair<double, double>, 4> ranges{{{0.0, inf},
                                                         {0.0, opts.areas.small_max},
                                                         {opts.areas.small_max, opts.areas.medium_max},
                                                         {opts.areas.medium_max, inf}}};
  // per_range[r][t]: class-averaged AP at threshold t.
  std::array<std::vector<double>, 4> per_range;
  for (std::size_t r = 0; r < ranges.size(); ++r)
    for (double t : opts.iou_thresholds) {
      std::vector<double> per_class;
      for (Index c : labels)
        per_class.push_back(
            average_precision(preds, gts, c, t, ranges[r].first, ranges[r].second, opts.max_detections));
      per_range[r].push_back(nan_mean(per_class));
    }
  auto at = [&](double t) {
    for (std::size_t i = 0; i < opts.iou_thresholds.size(); ++i)
      if (std::abs(opts.iou_thresholds[i] - t) < 1e-9) return per_range[0][i];
    return kNaN;
  };
  EvalResult r;
  r.ap = nan_mean(per_range[0]);
  r.ap50 = at(0.5);
  r.ap75 = at(0.75);
  r.ap_small = nan_mean(per_range[1]);
  r.ap_medium = nan_mean(per_range[2]);
  r.ap_large = nan_mean(per_range[3]);
  r.duplicate_rate = duplicate_rate(preds, opts.duplicate_score, opts.duplicate_iou);
  return r;
}

namespace {

std::pair<Index, Index> count_duplicates(const std::vector<Detection>& preds, double score_thresh,
                                         double iou_thresh) {
  std::vector<Detection> kept;
  for (const auto& d : preds)
    if (d.score >= score_thresh) kept.push_back(d);
  const auto order = rank_by_score(kept.size(), [&](std::size_t i) { return kept[i].score; });
  Index dup = 0;
  for (std::size_t r = 1; r < order.size(); ++r) {
    const Detection& d = kept[order[r]];
    for (std::size_t q = 0; q < r; ++q) {
      const Detection& e = kept[order[q]];
      if (e.label == d.label && iou(to_xyxy(d.box), to_xyxy(e.box)) >= iou_thresh) {
        ++dup;
        break;
      }
    }
  }
  return {dup, static_cast<Index>(kept.size())};
}

}  // namespace

double duplicate_rate(const std::vector<Detection>& preds, double score_thresh, double iou_thresh) {
  const auto [dup, total] = count_duplicates(preds, score_thresh, iou_thresh);
  return total == 0 ? 0.0 : static_cast<double>(dup) / static_cast<double>(total);
}

double duplicate_rate(const std::vector<std::vector<Detection>>& preds, double score_thresh, double iou_thresh) {
  Index dup = 0, total = 0;
  for (const auto& p : preds) {
    const auto [d, t] = count_duplicates(p, score_thresh, iou_thresh);
    dup += d;
    total += t;
  }
  return total == 0 ? 0.0 : static_cast<double>(dup) / static_cast<double>(total);
}

std::vector<Detection> detections_from(const Predictions& final_layer) {
  const auto logits = final_layer.logits.mat();
  const auto boxes = final_layer.boxes.mat();
  std::vector<Detection> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  for (Index q = 0; q < logits.rows(); ++q) {
    Index label = 0;
    const double best = logits.row(q).maxCoeff(&label);
    out.push_back({{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)}, label, 1.0 / (1.0 + std::exp(-best))});
  }
  return out;
}

std::vector<std::pair<Box, Box>> anchor_pairs(const ModelOutput& out, const Targets& gt, const CostConfig& cost) {
  std::vector<std::pair<Box, Box>> pairs;
  if (gt.size() == 0) return pairs;
  const MatchAssignment a = match(out.final(), gt, cost);
  const RowMatrix& anchors = out.initial_anchors;
  for (const auto& [p, g] : a.pairs)
    pairs.emplace_back(gt.boxes[static_cast<std::size_t>(g)],
                       Box{anchors(p, 0), anchors(p, 1), anchors(p, 2), anchors(p, 3)});
  return pairs;
}

AtdResult track_atd(const Detector& model, const std::vector<Tensor>& images, const std::vector<Targets>& gts,
                    Index k, const CostConfig& cost, const AreaThresholds& areas) {
  if (images.size() != gts.size()) throw AlignmentError("track_atd: images and targets differ in length");
  std::vector<std::pair<Box, Box>> all, small;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (gts[i].size() == 0) continue;
    for (const auto& pr : anchor_pairs(model.forward(images[i]), gts[i], cost)) {
      all.push_back(pr);
      if (box_area(pr.first) < areas.small_max) small.push_back(pr);
    }
  }
  if (all.empty()) throw UndefinedMetricError("track_atd: no ground-truth object was matched");
  AtdResult r;
  r.all = atd(all, k);
  if (!small.empty()) r.small = atd(small, k);
  return r;
}

std::string metrics_csv_header() {
  return "epoch,loss_total,loss_cls,loss_bbox,loss_giou,loss_dn,loss_enc,lr,AP,AP50,AP75,AP_S,AP_M,AP_L,"
         "ATD100,ATD100_small,duplicate_rate,dn_groups_mean,dn_pos_noise_mean,dn_neg_noise_mean";
}

namespace {

std::string fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string scientific(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6e", v);
  return buf;
}

}  // namespace

std::string metrics_csv_row(const MetricsRow& row) {
  const EvalResult& e = row.eval;
  const std::vector<std::string> cells{
      std::to_string(row.epoch),  fixed(row.loss_total),     fixed(row.loss_cls),    fixed(row.loss_bbox),
      fixed(row.loss_giou),       fixed(row.loss_dn),        fixed(row.loss_enc),    scientific(row.lr),
      fixed(100 * e.ap, 4),       fixed(100 * e.ap50, 4),    fixed(100 * e.ap75, 4), fixed(100 * e.ap_small, 4),
      fixed(100 * e.ap_medium, 4), fixed(100 * e.ap_large, 4), fixed(e.atd100),        fixed(e.atd100_small),
      fixed(e.duplicate_rate),    fixed(row.dn_groups_mean), fixed(row.dn_pos_noise_mean),
      fixed(row.dn_neg_noise_mean)};
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

}  // namespace dino
