#pragma once

// Run configuration: a flat `key = value` text file whose keys follow the
// usual DETR-family hyper-parameter names. Unknown keys are errors.

#include "dino/denoising.hpp"
#include "dino/diagnostics.hpp"
#include "dino/matching.hpp"
#include "dino/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dino {

struct RunConfig {
  // Model shape.
  Index image_size = 64;
  Index hidden_dim = 64;
  Index enc_layers = 2;
  Index dec_layers = 2;
  Index nheads = 8;
  Index num_queries = 20;
  Index enc_n_points = 4;
  Index dec_n_points = 4;
  Index num_feature_levels = 2;
  Index dim_feedforward = 128;
  Index num_classes = 2;
  double dropout = 0.0;
  double pe_temperature = 20.0;

  // Matching and loss.
  double set_cost_class = 2.0;
  double set_cost_bbox = 5.0;
  double set_cost_giou = 2.0;
  double cls_loss_coef = 1.0;
  double bbox_loss_coef = 5.0;
  double giou_loss_coef = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double enc_loss_coef = 1.0;  // encoder selection head, relative to a decoder layer

  // Denoising.
  double dn_box_noise_scale = 0.4;
  double dn_label_noise_ratio = 0.5;
  double lambda1 = 1.0;
  double lambda2 = 2.0;
  Index cdn_pair_capacity = 10;

  // Ablation toggles.
  QuerySelection qs_mode = QuerySelection::Mixed;
  bool cdn_on = true;
  bool lft_on = true;

  // Optimization.
  double lr = 1e-4;
  double lr_backbone = 1e-5;
  double weight_decay = 1e-4;
  double clip_max_norm = 0.1;
  Index batch_size = 4;
  Index epochs = 12;
  /// Epoch index (0-based) from which the learning rates are divided by 10.
  Index lr_drop_epoch = 11;
  std::uint64_t seed = 0;

  // Data. An empty data_dir means a synthetic dataset generated in memory.
  std::string data_dir;
  Index train_images = 500;
  Index val_images = 100;
  std::uint64_t data_seed = 0;
  bool aug_hflip = true;
  double aug_scale_min = 0.75;  // 1.0 disables scale jitter

  // Evaluation.
  Index atd_k = 100;
  double duplicate_score = 0.3;
  double duplicate_iou = 0.9;
  double area_small = 0.15 * 0.15;
  double area_medium = 0.35 * 0.35;

  std::string output_dir = "runs/default";

  void validate() const;

  ModelConfig model() const;
  DnConfig dn() const;
  CostConfig cost() const;
  LossConfig loss() const;
  EvalOptions eval_options() const;
};

/// Parses text; every line is blank, a `#` comment, or `key = value`.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key in a fixed order; doubles are written so they parse back exactly.
std::string serialize_run_config(const RunConfig& cfg);
/// Applies one `key=value` override.
void apply_override(RunConfig& cfg, const std::string& assignment);
std::vector<std::string> run_config_keys();

/// Keys whose values differ, in key order.
std::vector<std::string> differing_keys(const RunConfig& a, const RunConfig& b);

}  // namespace dino
