#pragma once

// Evaluation: COCO-style average precision, ATD tracking over a dataset,
// duplicate-prediction rate, and the per-epoch metrics CSV.

#include "dino/box.hpp"
#include "dino/matching.hpp"
#include "dino/model.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace dino {

struct Detection {
  Box box;  // normalized cxcywh
  Index label = 0;
  double score = 0.0;
};

/// Normalized-area buckets. Objects with area < small_max are small, those
/// in [small_max, medium_max) medium, the rest large.
struct AreaThresholds {
  double small_max = 0.15 * 0.15;
  double medium_max = 0.35 * 0.35;
};

struct EvalOptions {
  std::vector<double> iou_thresholds = coco_thresholds();
  AreaThresholds areas;
  Index max_detections = 100;
  double duplicate_score = 0.3;
  double duplicate_iou = 0.9;

  static std::vector<double> coco_thresholds();
};

/// AP values lie in [0, 1]; a bucket without ground truth is NaN.
struct EvalResult {
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
  double ap_small = 0.0, ap_medium = 0.0, ap_large = 0.0;
  double atd100 = std::numeric_limits<double>::quiet_NaN();
  double atd100_small = std::numeric_limits<double>::quiet_NaN();
  double duplicate_rate = 0.0;
};

/// Greedy score-descending matching per IoU threshold with 101-point
/// interpolated precision, averaged over thresholds and over classes that
/// have ground truth. Throws UndefinedMetricError when no image has any GT.
EvalResult evaluate_ap(const std::vector<std::vector<Detection>>& preds, const std::vector<Targets>& gts,
                       const EvalOptions& opts = {});

/// AP of one class at one IoU threshold over an area range [lo, hi);
/// NaN when that class has no ground truth in the range.
double average_precision(const std::vector<std::vector<Detection>>& preds, const std::vector<Targets>& gts,
                         Index label, double iou_threshold, double area_lo, double area_hi, Index max_detections);

/// Fraction of predictions with score >= score_thresh whose IoU with a
/// higher-ranked same-class prediction (by score, ties by index) is at
/// least iou_thresh.
double duplicate_rate(const std::vector<Detection>& preds, double score_thresh, double iou_thresh);
/// Pooled over images: duplicates / above-threshold predictions.
double duplicate_rate(const std::vector<std::vector<Detection>>& preds, double score_thresh, double iou_thresh);

/// One detection per matching query: best class, its sigmoid score, the box.
std::vector<Detection> detections_from(const Predictions& final_layer);

/// (gt, initial anchor) for each GT, pairing the GT with the first-layer
/// anchor of the query whose final prediction was matched to it.
std::vector<std::pair<Box, Box>> anchor_pairs(const ModelOutput& out, const Targets& gt, const CostConfig& cost);

struct AtdResult {
  double all = 0.0;
  double small = std::numeric_limits<double>::quiet_NaN();  // NaN without small GTs
};

/// ATD(k) over the matching part of a dataset; throws UndefinedMetricError
/// when nothing was matched.
AtdResult track_atd(const Detector& model, const std::vector<Tensor>& images, const std::vector<Targets>& gts,
                    Index k = 100, const CostConfig& cost = {}, const AreaThresholds& areas = {});

/// One row of the per-epoch metrics file.
struct MetricsRow {
  Index epoch = 0;
  double loss_total = 0, loss_cls = 0, loss_bbox = 0, loss_giou = 0, loss_dn = 0, loss_enc = 0;
  double lr = 0;
  EvalResult eval;
  double dn_groups_mean = 0;
  double dn_pos_noise_mean = 0;  // mean |noise| / bound factor over positive coordinates
  double dn_neg_noise_mean = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

}  // namespace dino
