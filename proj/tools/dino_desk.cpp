// Command-line front end: data generation, training, evaluation, ATD
// tracking and TTA ensembling. Errors exit with their category code.

#include "dino/config.hpp"
#include "dino/data.hpp"
#include "dino/errors.hpp"
#include "dino/train.hpp"
#include "dino/tta.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <set>

namespace {

using namespace dino;

const std::set<std::string> kModelKeys = {
    "image_size",      "hidden_dim",  "enc_layers", "dec_layers", "nheads",         "num_queries", "enc_n_points",
    "dec_n_points",    "num_feature_levels", "dim_feedforward", "num_classes", "pe_temperature", "qs_mode", "lft_on"};

RunConfig build_config(const std::string& file, const std::vector<std::string>& overrides) {
  RunConfig cfg = file.empty() ? RunConfig{} : load_run_config(file);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

// The checkpoint's config, checked against an explicitly requested one.
RunConfig config_for_checkpoint(const Checkpoint& ckpt, const std::string& file,
                                const std::vector<std::string>& overrides) {
  RunConfig stored = checkpoint_config(ckpt);
  if (file.empty() && overrides.empty()) return stored;
  const RunConfig requested = build_config(file, overrides);
  std::string diff;
  for (const auto& key : differing_keys(stored, requested))
    if (kModelKeys.count(key)) diff += " " + key;
  if (!diff.empty()) throw ConfigError("requested model differs from the checkpoint in:" + diff);
  // Evaluation settings may differ; the architecture may not.
  return requested;
}

Detector load_model(const Checkpoint& ckpt, const RunConfig& cfg) {
  Detector model(cfg.model(), cfg.seed);
  load_parameters(model, ckpt);
  return model;
}

void print_eval(const EvalResult& r) {
  std::printf("AP        %.4f\nAP50      %.4f\nAP75      %.4f\nAP_S      %.4f\nAP_M      %.4f\nAP_L      %.4f\n",
              100 * r.ap, 100 * r.ap50, 100 * r.ap75, 100 * r.ap_small, 100 * r.ap_medium, 100 * r.ap_large);
  std::printf("ATD       %.6f\nATD_small %.6f\nduplicate_rate %.6f\n", r.atd100, r.atd100_small, r.duplicate_rate);
}

// "file" or "file:weight".
std::pair<std::string, double> split_weight(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos) return {spec, 1.0};
  try {
    std::size_t used = 0;
    const std::string tail = spec.substr(colon + 1);
    const double w = std::stod(tail, &used);
    if (used == tail.size()) {
      if (!(w > 0)) throw ConfigError("ensemble weight must be positive in '" + spec + "'");
      return {spec.substr(0, colon), w};
    }
  } catch (const std::logic_error&) {
  }
  return {spec, 1.0};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale DINO detector: data, training, evaluation and TTA ensembling"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic shapes dataset (train/ and val/)");
  std::string gen_out;
  Index gen_train = 500, gen_val = 100, gen_size = 64, gen_classes = 2;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory (default: $DINO_OUTPUT_DIR/data or ./data)");
  gen->add_option("--train", gen_train, "Training images")->capture_default_str();
  gen->add_option("--val", gen_val, "Validation images")->capture_default_str();
  gen->add_option("--image-size", gen_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--classes", gen_classes, "Number of shape classes (1-4)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Data seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a detector");
  std::string train_config, train_resume;
  std::vector<std::string> train_set;
  train->add_option("--config", train_config, "Config file (key = value lines)");
  train->add_option("--set", train_set, "Override, key=value; repeatable");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  std::string eval_ckpt, eval_data, eval_config, eval_predictions;
  std::vector<std::string> eval_set;
  Index eval_limit = -1;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory (annotations.json + images/)")->required();
  eval->add_option("--config", eval_config, "Config the model must agree with");
  eval->add_option("--set", eval_set, "Override, key=value; repeatable");
  eval->add_option("--limit", eval_limit, "Evaluate at most this many images");
  eval->add_option("--predictions", eval_predictions, "COCO results output (default: <output dir>/predictions_eval.json)");

  auto* atd_cmd = app.add_subcommand("atd", "Average top-k distance of initial anchors to matched objects");
  std::string atd_ckpt, atd_data;
  Index atd_k = 100, atd_limit = -1;
  atd_cmd->add_option("--checkpoint", atd_ckpt, "Checkpoint file")->required();
  atd_cmd->add_option("--data", atd_data, "Dataset directory")->required();
  atd_cmd->add_option("--k", atd_k, "Number of worst anchors averaged")->capture_default_str();
  atd_cmd->add_option("--limit", atd_limit, "Use at most this many images");

  auto* ens = app.add_subcommand("ensemble", "Fuse COCO results files one-to-one");
  std::string ens_main, ens_out, ens_mode = "normalized";
  std::vector<std::string> ens_aux;
  double ens_iou = 0.5;
  ens->add_option("--main", ens_main, "Main results file, FILE[:weight]")->required();
  ens->add_option("--aux", ens_aux, "Other results file, FILE[:weight]; repeatable");
  ens->add_option("--iou-threshold", ens_iou, "Minimum IoU for a partner")->capture_default_str();
  ens->add_option("--mode", ens_mode, "normalized or literal")->capture_default_str();
  ens->add_option("--out", ens_out, "Output file (default: <output dir>/ensemble.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::Config);
  }

  try {
    const char* env = std::getenv("DINO_OUTPUT_DIR");
    const std::filesystem::path env_dir = env != nullptr && *env != '\0' ? env : "";

    if (*gen) {
      const std::filesystem::path out = !gen_out.empty() ? std::filesystem::path(gen_out)
                                        : !env_dir.empty() ? env_dir / "data"
                                                           : std::filesystem::path("data");
      SyntheticConfig s;
      s.image_size = gen_size;
      s.num_classes = gen_classes;
      s.count = gen_train;
      s.seed = derive_rng(gen_seed, {1})();
      save_dataset(gen_synthetic(s), out / "train");
      s.count = gen_val;
      s.seed = derive_rng(gen_seed, {2})();
      save_dataset(gen_synthetic(s), out / "val");
      std::cout << "wrote " << gen_train << " training and " << gen_val << " validation images to " << out.string()
                << "\n";
    } else if (*train) {
      const RunConfig cfg = build_config(train_config, train_set);
      const auto out = resolve_output_dir(cfg);
      std::optional<std::filesystem::path> resume;
      if (!train_resume.empty()) resume = train_resume;
      fit(cfg, out, resume, &std::cerr);
      std::cout << "run written to " << out.string() << "\n";
    } else if (*eval) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const RunConfig cfg = config_for_checkpoint(ckpt, eval_config, eval_set);
      const Detector model = load_model(ckpt, cfg);
      const Dataset data = load_dataset_dir(eval_data, cfg.image_size, eval_limit);
      const EvalReport report = evaluate_model(model, data, cfg);
      const std::filesystem::path pred_path =
          !eval_predictions.empty() ? std::filesystem::path(eval_predictions)
                                    : resolve_output_dir(cfg) / "predictions_eval.json";
      write_coco_results(pred_path, to_coco_results(data, report.detections));
      print_eval(report.result);
    } else if (*atd_cmd) {
      const Checkpoint ckpt = load_checkpoint(atd_ckpt);
      const RunConfig cfg = checkpoint_config(ckpt);
      const Detector model = load_model(ckpt, cfg);
      const Dataset data = load_dataset_dir(atd_data, cfg.image_size, atd_limit);
      std::vector<Tensor> images;
      std::vector<Targets> gts;
      for (const Sample& s : data.samples) {
        images.push_back(s.image.tensor());
        gts.push_back(s.targets);
      }
      const AtdResult r = track_atd(model, images, gts, atd_k, cfg.cost(), {cfg.area_small, cfg.area_medium});
      std::printf("ATD(%lld) all   %.6f\nATD(%lld) small %.6f\n", static_cast<long long>(atd_k), r.all,
                  static_cast<long long>(atd_k), r.small);
    } else if (*ens) {
      const FusionMode mode = parse_fusion_mode(ens_mode);
      const auto [main_file, main_weight] = split_weight(ens_main);
      std::vector<AuxResults> aux;
      for (const auto& spec : ens_aux) {
        const auto [file, weight] = split_weight(spec);
        aux.push_back({read_coco_results(file), weight});
      }
      const auto fused = ensemble_results(read_coco_results(main_file), main_weight, aux, ens_iou, mode);
      const std::filesystem::path out = !ens_out.empty() ? std::filesystem::path(ens_out)
                                        : !env_dir.empty() ? env_dir / "ensemble.json"
                                                           : std::filesystem::path("ensemble.json");
      write_coco_results(out, fused);
      std::cout << "wrote " << fused.size() << " fused results to " << out.string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::Internal);
  }
  return 0;
}
