#include "dino/denoising.hpp"

#include "dino/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace dino {

void DnConfig::validate() const {
  if (!(lambda1 > 0 && lambda1 < lambda2)) {
    throw ConfigError("denoising: require 0 < lambda1 < lambda2, got lambda1=" + std::to_string(lambda1) +
                      " lambda2=" + std::to_string(lambda2));
  }
  if (!(label_noise_ratio >= 0 && label_noise_ratio <= 1)) {
    throw ConfigError("denoising: label_noise_ratio must lie in [0, 1]");
  }
  if (box_noise_scale < 0) throw ConfigError("denoising: box_noise_scale must be non-negative");
  if (cdn_pair_capacity < 1) throw ConfigError("denoising: cdn_pair_capacity must be positive");
  if (num_classes < 1) throw ConfigError("denoising: num_classes must be positive");
}

Box clamp_box(const Box& b, double eps) {
  return {std::clamp(b.cx, eps, 1.0 - eps), std::clamp(b.cy, eps, 1.0 - eps),
          std::clamp(b.w, 2.0 * eps, 1.0 - eps), std::clamp(b.h, 2.0 * eps, 1.0 - eps)};
}

namespace {

double random_sign(Rng& rng) { return (rng() >> 63) ? -1.0 : 1.0; }

// Per-coordinate bound factors (w/2, h/2, w, h).
std::array<double, 4> bound_factors(const Box& gt) { return {gt.w / 2, gt.h / 2, gt.w, gt.h}; }

NoisedBox apply_noise(const Box& gt, const std::array<double, 4>& magnitude, Rng& rng, double eps) {
  const auto f = bound_factors(gt);
  Delta d;
  d.dx = random_sign(rng) * magnitude[0] * f[0];
  d.dy = random_sign(rng) * magnitude[1] * f[1];
  d.dw = random_sign(rng) * magnitude[2] * f[2];
  d.dh = random_sign(rng) * magnitude[3] * f[3];
  const Box raw{gt.cx + d.dx, gt.cy + d.dy, gt.w + d.dw, gt.h + d.dh};
  return {clamp_box(raw, eps), d};
}

}  // namespace

NoisedBox noise_box_positive(const Box& gt, double lambda1, Rng& rng, double clamp_eps) {
  // Magnitude lambda1 * u with u in [0, 1) keeps every bound strict.
  std::array<double, 4> m{};
  for (auto& v : m) v = lambda1 * uniform01(rng);
  return apply_noise(gt, m, rng, clamp_eps);
}

NoisedBox noise_box_negative(const Box& gt, double lambda1, double lambda2, Rng& rng, double clamp_eps) {
  std::array<double, 4> m{};
  for (auto& v : m) {
    // 1 - u lies in (0, 1], so the magnitude lies in (lambda1, lambda2].
    v = lambda1 + (lambda2 - lambda1) * (1.0 - uniform01(rng));
    if (v <= lambda1) v = std::nextafter(lambda1, std::numeric_limits<double>::infinity());
  }
  return apply_noise(gt, m, rng, clamp_eps);
}

NoisedBox noise_box_plain(const Box& gt, double scale, Rng& rng, double clamp_eps) {
  return noise_box_positive(gt, scale, rng, clamp_eps);
}

std::vector<Index> noise_labels(const std::vector<Index>& labels, double ratio, Index num_classes, Rng& rng) {
  std::vector<Index> out = labels;
  if (num_classes < 2) return out;
  for (auto& l : out) {
    if (!bernoulli(rng, ratio / 2)) continue;
    auto r = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(num_classes - 1)));
    l = r >= l ? r + 1 : r;
  }
  return out;
}

RowMatrix DnBatch::query_boxes() const {
  RowMatrix m(dn_query_count(), 4);
  Index row = 0;
  for (const auto& g : groups) {
    for (const auto& b : g.positive_boxes) m.row(row++) = b.vec().transpose();
    for (const auto& b : g.negative_boxes) m.row(row++) = b.vec().transpose();
  }
  return m;
}

std::vector<Index> DnBatch::query_labels() const {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(dn_query_count()));
  for (const auto& g : groups) out.insert(out.end(), g.noised_labels.begin(), g.noised_labels.end());
  return out;
}

Index dn_group_count(Index capacity, Index gt_count) {
  if (gt_count <= 0) return 0;
  return std::max<Index>(1, capacity / gt_count);
}

BoolMatrix build_dn_attention_mask(Index gt_count, Index group_count, Index matching_count) {
  const Index group_size = 2 * gt_count;
  const Index dn = group_size * group_count;
  const Index total = dn + matching_count;
  BoolMatrix mask = BoolMatrix::Constant(total, total, false);
  for (Index g = 0; g < group_count; ++g)
    mask.block(g * group_size, g * group_size, group_size, group_size).setConstant(true);
  mask.block(dn, dn, matching_count, matching_count).setConstant(true);
  return mask;
}

DnBatch build_dn_batch(const std::vector<Box>& gt_boxes, const std::vector<Index>& gt_labels,
                       const DnConfig& cfg, Index matching_count, Rng& rng) {
  if (gt_boxes.size() != gt_labels.size()) {
    throw AlignmentError("build_dn_batch: " + std::to_string(gt_boxes.size()) + " boxes vs " +
                         std::to_string(gt_labels.size()) + " labels");
  }
  DnBatch batch;
  batch.gt_count = static_cast<Index>(gt_boxes.size());
  batch.matching_count = matching_count;
  batch.group_count = dn_group_count(cfg.cdn_pair_capacity, batch.gt_count);
  for (Index g = 0; g < batch.group_count; ++g) {
    DenoiseGroup group;
    const auto labels = noise_labels(gt_labels, cfg.label_noise_ratio, cfg.num_classes, rng);
    for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
      const auto pos = noise_box_positive(gt_boxes[i], cfg.lambda1, rng, cfg.clamp_eps);
      const auto neg = noise_box_negative(gt_boxes[i], cfg.lambda1, cfg.lambda2, rng, cfg.clamp_eps);
      group.positive_boxes.push_back(pos.box);
      group.positive_noise.push_back(pos.noise);
      group.negative_boxes.push_back(neg.box);
      group.negative_noise.push_back(neg.noise);
      group.gt_index.push_back(static_cast<Index>(i));
    }
    group.noised_labels = labels;
    group.noised_labels.insert(group.noised_labels.end(), labels.begin(), labels.end());
    batch.groups.push_back(std::move(group));
  }
  batch.attention_mask = build_dn_attention_mask(batch.gt_count, batch.group_count, matching_count);
  return batch;
}

double atd(const std::vector<std::pair<Box, Box>>& gt_anchor_pairs, Index k) {
  if (k < 1) throw ConfigError("atd: k must be at least 1, got " + std::to_string(k));
  if (gt_anchor_pairs.empty()) throw UndefinedMetricError("atd: no matched ground-truth boxes");
  std::vector<double> d;
  d.reserve(gt_anchor_pairs.size());
  for (const auto& [gt, anchor] : gt_anchor_pairs) d.push_back(l1_box_distance(gt, anchor));
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end(), std::greater<>());
  double total = 0.0;
  for (std::size_t i = 0; i < take; ++i) total += d[i];
  return total / static_cast<double>(take);
}

}  // namespace dino
