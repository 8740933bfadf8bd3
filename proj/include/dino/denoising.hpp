#pragma once

// Contrastive denoising queries: noised ground-truth copies fed to the
// decoder next to the matching queries, organized in groups that are
// isolated from each other and from the matching part by an attention mask.

#include "dino/box.hpp"
#include "dino/random.hpp"

#include <Eigen/Core>

#include <utility>
#include <vector>

namespace dino {

struct DnConfig {
  double lambda1 = 1.0;  // inner noise scale: positives
  double lambda2 = 2.0;  // outer noise scale: negatives live in (lambda1, lambda2]
  double box_noise_scale = 0.4;  // single-scale noise used by plain denoising
  double label_noise_ratio = 0.5;
  Index cdn_pair_capacity = 100;
  Index num_classes = 2;
  double clamp_eps = 1e-3;

  void validate() const;
};

/// A noised box together with the noise that produced it, before clamping.
struct NoisedBox {
  Box box;
  Delta noise;  // (dx, dy, dw, dh) in normalized coordinate space
};

NoisedBox noise_box_positive(const Box& gt, double lambda1, Rng& rng, double clamp_eps = 1e-3);
NoisedBox noise_box_negative(const Box& gt, double lambda1, double lambda2, Rng& rng,
                             double clamp_eps = 1e-3);
/// Plain single-scale noise: every bound scaled by `scale`, magnitude in [0, scale).
NoisedBox noise_box_plain(const Box& gt, double scale, Rng& rng, double clamp_eps = 1e-3);

/// Each label independently flips, with probability ratio / 2, to a uniformly
/// drawn different class.
std::vector<Index> noise_labels(const std::vector<Index>& labels, double ratio, Index num_classes, Rng& rng);

/// Clamp to [eps, 1 - eps] per coordinate with w, h >= 2 eps.
Box clamp_box(const Box& b, double eps);

struct DenoiseGroup {
  std::vector<Box> positive_boxes;
  std::vector<Box> negative_boxes;
  std::vector<Delta> positive_noise;  // pre-clamp
  std::vector<Delta> negative_noise;  // pre-clamp
  /// One label per query: positives first, then negatives. Negatives reuse
  /// their positive partner's (possibly flipped) label.
  std::vector<Index> noised_labels;
  std::vector<Index> gt_index;  // source GT of each positive (and its negative)

  Index size() const { return static_cast<Index>(positive_boxes.size() + negative_boxes.size()); }
};

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Denoising part of one image. Query layout: group g occupies rows
/// [2n g, 2n (g + 1)), positives before negatives; matching queries follow
/// all denoising queries.
struct DnBatch {
  std::vector<DenoiseGroup> groups;
  Index group_count = 0;
  Index gt_count = 0;
  Index matching_count = 0;
  /// attention_mask(i, j) == true means query i may attend to query j.
  BoolMatrix attention_mask;

  Index dn_query_count() const { return 2 * gt_count * group_count; }
  Index total_query_count() const { return dn_query_count() + matching_count; }
  RowMatrix query_boxes() const;
  std::vector<Index> query_labels() const;
  /// Index of the positive query for (group, gt) and of its negative partner.
  Index positive_index(Index group, Index gt) const { return 2 * gt_count * group + gt; }
  Index negative_index(Index group, Index gt) const { return 2 * gt_count * group + gt_count + gt; }
};

/// max(1, floor(capacity / n)) groups for n > 0, zero groups when n == 0.
Index dn_group_count(Index capacity, Index gt_count);

/// Mask over (dn + matching) queries: denoising groups see only themselves,
/// matching queries see only matching queries.
BoolMatrix build_dn_attention_mask(Index gt_count, Index group_count, Index matching_count);

DnBatch build_dn_batch(const std::vector<Box>& gt_boxes, const std::vector<Index>& gt_labels,
                       const DnConfig& cfg, Index matching_count, Rng& rng);

/// Average of the k largest L1 distances between GT boxes and the initial
/// anchors assigned to them; averages over all pairs when k exceeds their count.
double atd(const std::vector<std::pair<Box, Box>>& gt_anchor_pairs, Index k);

}  // namespace dino
