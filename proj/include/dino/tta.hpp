#pragma once

// One-to-one test-time-augmentation ensembling: every main prediction keeps
// its identity and absorbs at most one partner box from each other
// augmentation.

#include "dino/box.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dino {

struct AugmentedPrediction {
  std::vector<BoxCorners> boxes;  // in the main augmentation's frame
  std::vector<Index> labels;
  std::vector<double> scores;
  double weight = 1.0;

  std::size_t size() const { return boxes.size(); }
  void validate() const;
};

/// Normalized divides the weighted box sum by the summed weights w * s, so
/// the fused box is a convex combination. Literal divides by the number of
/// contributors.
enum class FusionMode { Normalized, Literal };

std::string to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);

/// Partners must share the main label and exceed `iou_threshold`. The fused
/// label and score are the main prediction's.
AugmentedPrediction ensemble(const AugmentedPrediction& main, const std::vector<AugmentedPrediction>& others,
                             double iou_threshold = 0.5, FusionMode mode = FusionMode::Normalized);

struct Augmentation {
  enum class Kind { Identity, HFlip, Scale };
  Kind kind = Kind::Identity;
  double value = 1.0;  // image width for HFlip, factor for Scale

  /// "identity", "hflip:<width>" or "scale:<factor>".
  static Augmentation parse(const std::string& descriptor);
};

/// Maps boxes from the main frame into the augmented frame.
AugmentedPrediction apply_augmentation(const AugmentedPrediction& preds, const Augmentation& aug);
/// Maps boxes from the augmented frame back to the main frame.
AugmentedPrediction invert_augmentation(const AugmentedPrediction& preds, const Augmentation& aug);

/// One entry of a COCO results file; bbox is [x, y, width, height] in pixels.
struct CocoResult {
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  std::array<double, 4> bbox{};
  double score = 0.0;
};

std::vector<CocoResult> read_coco_results(const std::filesystem::path& path);
void write_coco_results(const std::filesystem::path& path, const std::vector<CocoResult>& results);

struct AuxResults {
  std::vector<CocoResult> results;
  double weight = 1.0;
};

/// Ensembles results files image by image; output follows the main file's order.
std::vector<CocoResult> ensemble_results(const std::vector<CocoResult>& main, double main_weight,
                                         const std::vector<AuxResults>& aux, double iou_threshold,
                                         FusionMode mode);

}  // namespace dino
