#pragma once

// Training loop: per-image forward with optional contrastive denoising,
// set loss plus denoising loss, global-norm clipping, and an AdamW update.
// All randomness is derived from (seed, epoch, sample), so a run resumed
// from a checkpoint continues exactly like an uninterrupted one.

#include "dino/checkpoint.hpp"
#include "dino/config.hpp"
#include "dino/data.hpp"
#include "dino/diagnostics.hpp"
#include "dino/model.hpp"
#include "dino/tta.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>

namespace dino {

/// Per-image averages of the loss terms over one optimizer step.
struct StepStats {
  double total = 0, cls = 0, l1 = 0, giou = 0, dn = 0, enc = 0;
  double dn_groups = 0;
  double dn_pos_noise = 0, dn_neg_noise = 0;  // mean |noise| / bound factor
  Index images = 0;
  Index noise_images = 0;  // images that produced denoising queries
};

struct EvalReport {
  EvalResult result;
  std::vector<std::vector<Detection>> detections;  // per sample, matching queries of the final layer
};

/// COCO results for a dataset's detections, boxes in source-image pixels.
std::vector<CocoResult> to_coco_results(const Dataset& data, const std::vector<std::vector<Detection>>& detections);

/// Final-layer detections of every sample.
std::vector<std::vector<Detection>> predict(const Detector& model, const Dataset& data);

/// Runs the eval-mode forward over a dataset: AP, duplicate rate and ATD(k).
/// Throws UndefinedMetricError for an empty dataset.
EvalReport evaluate_model(const Detector& model, const Dataset& data, const RunConfig& cfg);

/// Loads a checkpoint's parameters into `model`; throws ShapeError naming
/// the first missing or mismatched tensor.
void load_parameters(Detector& model, const Checkpoint& ckpt);
/// The run config stored in a checkpoint.
RunConfig checkpoint_config(const Checkpoint& ckpt);

class Trainer {
 public:
  Trainer(const RunConfig& cfg, Dataset train, Dataset val);

  const RunConfig& config() const { return cfg_; }
  const Detector& model() const { return model_; }
  Detector& model() { return model_; }
  const Dataset& train_data() const { return train_; }
  const Dataset& val_data() const { return val_; }

  Index steps_per_epoch() const;
  Index epoch() const { return epoch_; }
  Index step_in_epoch() const { return step_in_epoch_; }
  bool finished() const { return epoch_ >= cfg_.epochs; }
  double current_lr(bool backbone) const;

  /// Denoising batch for one image, or nothing when denoising is off or the
  /// image has no objects.
  std::optional<DnBatch> make_dn_batch(const Targets& gt, Rng& rng) const;

  /// One optimizer step at the current position. Throws NumericError on a
  /// non-finite loss without touching the parameters.
  StepStats step();
  /// Finishes the current epoch and evaluates on the validation set.
  MetricsRow run_epoch();
  /// CSV rows of all completed epochs.
  const std::vector<std::string>& metrics_rows() const { return rows_; }

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  RunConfig cfg_;
  Dataset train_, val_;
  Detector model_;
  Index matching_queries_;
  std::vector<Buffer> adam_m_, adam_v_;
  Index global_step_ = 0;
  Index epoch_ = 0;
  Index step_in_epoch_ = 0;
  StepStats epoch_sums_;  // weighted by images
  std::vector<std::string> rows_;

  std::vector<std::size_t> epoch_order(Index epoch) const;
};

/// Output directory: DINO_OUTPUT_DIR when set, else the config's output_dir.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

/// Training and validation data for a config: a synthetic pair, or the
/// train/ and val/ subdirectories of data_dir.
std::pair<Dataset, Dataset> load_run_data(const RunConfig& cfg);

/// Full run: writes config.txt, metrics.csv (rewritten after every epoch),
/// checkpoint.ckpt after every epoch, checkpoint_lr_drop.ckpt before the
/// learning-rate drop, and predictions_val.json at the end. On a non-finite
/// loss, writes nan_dump.json and rethrows; earlier checkpoints stay intact.
void fit(const RunConfig& cfg, const std::filesystem::path& out_dir,
         const std::optional<std::filesystem::path>& resume, std::ostream* log);

}  // namespace dino
