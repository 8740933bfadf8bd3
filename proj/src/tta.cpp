#include "dino/tta.hpp"

#include "dino/errors.hpp"
#include "dino/json_io.hpp"

#include <map>

namespace dino {

void AugmentedPrediction::validate() const {
  if (labels.size() != boxes.size() || scores.size() != boxes.size()) {
    throw AlignmentError("augmented prediction: " + std::to_string(boxes.size()) + " boxes, " +
                         std::to_string(labels.size()) + " labels, " + std::to_string(scores.size()) + " scores");
  }
  if (!(weight > 0.0)) throw ConfigError("augmented prediction: weight must be positive");
}

std::string to_string(FusionMode m) { return m == FusionMode::Normalized ? "normalized" : "literal"; }

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "normalized") return FusionMode::Normalized;
  if (s == "literal") return FusionMode::Literal;
  throw ConfigError("unknown fusion mode '" + s + "' (expected normalized or literal)");
}

AugmentedPrediction ensemble(const AugmentedPrediction& main, const std::vector<AugmentedPrediction>& others,
                             double iou_threshold, FusionMode mode) {
  main.validate();
  for (const auto& o : others) o.validate();
  AugmentedPrediction out = main;
  for (std::size_t i = 0; i < main.size(); ++i) {
    const BoxCorners& b = main.boxes[i];
    double ws = main.weight * main.scores[i];
    Eigen::Vector4d weighted = ws * b.vec();
    Eigen::Vector4d plain = b.vec();
    double weight_sum = ws;
    int contributors = 1;
    for (const auto& aug : others) {
      int best = -1;
      double best_iou = iou_threshold;
      for (std::size_t j = 0; j < aug.size(); ++j) {
        if (aug.labels[j] != main.labels[i]) continue;
        const double o = iou(b, aug.boxes[j]);
        if (o > best_iou) {
          best_iou = o;
          best = static_cast<int>(j);
        }
      }
      if (best < 0) continue;
      const auto j = static_cast<std::size_t>(best);
      ws = aug.weight * aug.scores[j];
      weighted += ws * aug.boxes[j].vec();
      plain += aug.boxes[j].vec();
      weight_sum += ws;
      ++contributors;
    }
    if (contributors == 1) continue;
    Eigen::Vector4d fused;
    if (mode == FusionMode::Literal) {
      fused = weighted / contributors;
    } else {
      // All-zero scores leave no preference; fall back to the plain mean.
      fused = weight_sum > 0.0 ? Eigen::Vector4d(weighted / weight_sum) : Eigen::Vector4d(plain / contributors);
    }
    out.boxes[i] = {fused[0], fused[1], fused[2], fused[3]};
  }
  return out;
}

Augmentation Augmentation::parse(const std::string& descriptor) {
  if (descriptor == "identity") return {};
  const auto colon = descriptor.find(':');
  const std::string kind = descriptor.substr(0, colon);
  double value = 0.0;
  if (colon != std::string::npos) {
    try {
      std::size_t used = 0;
      value = std::stod(descriptor.substr(colon + 1), &used);
      if (used != descriptor.size() - colon - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("augmentation '" + descriptor + "': bad numeric argument");
    }
  }
  if (colon != std::string::npos && !(value > 0.0)) {
    throw ConfigError("augmentation '" + descriptor + "': argument must be positive");
  }
  if (kind == "hflip" && colon != std::string::npos) return {Kind::HFlip, value};
  if (kind == "scale" && colon != std::string::npos) return {Kind::Scale, value};
  throw ConfigError("unknown augmentation '" + descriptor + "' (expected identity, hflip:<width> or scale:<factor>)");
}

namespace {

AugmentedPrediction map_boxes(const AugmentedPrediction& preds, const Augmentation& aug, bool forward) {
  preds.validate();
  AugmentedPrediction out = preds;
  for (auto& b : out.boxes) {
    switch (aug.kind) {
      case Augmentation::Kind::Identity:
        break;
      case Augmentation::Kind::HFlip:
        b = {aug.value - b.x1, b.y0, aug.value - b.x0, b.y1};
        break;
      case Augmentation::Kind::Scale:
        if (forward) {
          b = {b.x0 * aug.value, b.y0 * aug.value, b.x1 * aug.value, b.y1 * aug.value};
        } else {
          b = {b.x0 / aug.value, b.y0 / aug.value, b.x1 / aug.value, b.y1 / aug.value};
        }
        break;
    }
  }
  return out;
}

}  // namespace

AugmentedPrediction apply_augmentation(const AugmentedPrediction& preds, const Augmentation& aug) {
  return map_boxes(preds, aug, true);
}

AugmentedPrediction invert_augmentation(const AugmentedPrediction& preds, const Augmentation& aug) {
  return map_boxes(preds, aug, false);
}

std::vector<CocoResult> read_coco_results(const std::filesystem::path& path) {
  const nlohmann::json doc = read_json_file(path);
  if (!doc.is_array()) throw ConfigError(path.string() + ": expected a JSON array of results");
  std::vector<CocoResult> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    try {
      CocoResult r;
      r.image_id = e.at("image_id").get<std::int64_t>();
      r.category_id = e.at("category_id").get<std::int64_t>();
      const auto& bbox = e.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4) throw ConfigError("bbox must have 4 numbers");
      for (std::size_t k = 0; k < 4; ++k) r.bbox[k] = bbox[k].get<double>();
      r.score = e.at("score").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(path.string() + ": result " + std::to_string(i) + ": " + ex.what());
    } catch (const ConfigError& ex) {
      throw ConfigError(path.string() + ": result " + std::to_string(i) + ": " + ex.what());
    }
  }
  return out;
}

void write_coco_results(const std::filesystem::path& path, const std::vector<CocoResult>& results) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : results)
    doc.push_back({{"image_id", r.image_id}, {"category_id", r.category_id}, {"bbox", r.bbox}, {"score", r.score}});
  write_file_atomic(path, doc.dump() + "\n");
}

namespace {

struct ImageSet {
  AugmentedPrediction pred;
  std::vector<std::size_t> source;  // index into the results file
};

std::map<std::int64_t, ImageSet> by_image(const std::vector<CocoResult>& results, double weight) {
  std::map<std::int64_t, ImageSet> out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const CocoResult& r = results[i];
    ImageSet& s = out[r.image_id];
    s.pred.weight = weight;
    s.pred.boxes.push_back({r.bbox[0], r.bbox[1], r.bbox[0] + r.bbox[2], r.bbox[1] + r.bbox[3]});
    s.pred.labels.push_back(static_cast<Index>(r.category_id));
    s.pred.scores.push_back(r.score);
    s.source.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<CocoResult> ensemble_results(const std::vector<CocoResult>& main, double main_weight,
                                         const std::vector<AuxResults>& aux, double iou_threshold,
                                         FusionMode mode) {
  const auto main_sets = by_image(main, main_weight);
  std::vector<std::map<std::int64_t, ImageSet>> aux_sets;
  for (const auto& a : aux) aux_sets.push_back(by_image(a.results, a.weight));

  std::vector<CocoResult> out = main;
  for (const auto& [image, set] : main_sets) {
    std::vector<AugmentedPrediction> others;
    for (const auto& sets : aux_sets) {
      const auto it = sets.find(image);
      if (it != sets.end()) others.push_back(it->second.pred);
    }
    const AugmentedPrediction fused = ensemble(set.pred, others, iou_threshold, mode);
    for (std::size_t k = 0; k < fused.size(); ++k) {
      const BoxCorners& b = fused.boxes[k];
      out[set.source[k]].bbox = {b.x0, b.y0, b.x1 - b.x0, b.y1 - b.y0};
    }
  }
  return out;
}

}  // namespace dino
