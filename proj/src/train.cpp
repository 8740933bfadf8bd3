#include "dino/train.hpp"

#include "dino/errors.hpp"
#include "dino/json_io.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <ostream>

namespace dino {

namespace {

enum : std::uint64_t { kShuffleStream = 11, kAugmentStream = 12, kDenoiseStream = 13 };
enum : std::uint64_t { kTrainSplit = 1, kValSplit = 2 };

constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

Index token_count(const ModelConfig& m) {
  Index n = 0;
  for (Index l = 0; l < m.num_levels; ++l) {
    const Index side = m.image_size / (ModelConfig::kBaseStride << l);
    n += side * side;
  }
  return n;
}

// Mean |noise| relative to the coordinate's bound factor (w/2, h/2, w, h).
double noise_ratio(const std::vector<Delta>& noise, const std::vector<Index>& gt_index, const Targets& gt) {
  if (noise.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < noise.size(); ++i) {
    const Box& b = gt.boxes[static_cast<std::size_t>(gt_index[i])];
    sum += std::abs(noise[i].dx) / (b.w / 2) + std::abs(noise[i].dy) / (b.h / 2) + std::abs(noise[i].dw) / b.w +
           std::abs(noise[i].dh) / b.h;
  }
  return sum / (4.0 * static_cast<double>(noise.size()));
}

nlohmann::json stats_to_json(const StepStats& s) {
  return {{"total", s.total},         {"cls", s.cls},
          {"l1", s.l1},               {"giou", s.giou},
          {"dn", s.dn},               {"enc", s.enc},
          {"dn_groups", s.dn_groups}, {"dn_pos_noise", s.dn_pos_noise},
          {"dn_neg_noise", s.dn_neg_noise}, {"images", s.images},
          {"noise_images", s.noise_images}};
}

StepStats stats_from_json(const nlohmann::json& j) {
  StepStats s;
  s.total = j.at("total").get<double>();
  s.cls = j.at("cls").get<double>();
  s.l1 = j.at("l1").get<double>();
  s.giou = j.at("giou").get<double>();
  s.dn = j.at("dn").get<double>();
  s.enc = j.at("enc").get<double>();
  s.dn_groups = j.at("dn_groups").get<double>();
  s.dn_pos_noise = j.at("dn_pos_noise").get<double>();
  s.dn_neg_noise = j.at("dn_neg_noise").get<double>();
  s.images = j.at("images").get<Index>();
  s.noise_images = j.at("noise_images").get<Index>();
  return s;
}

void accumulate(StepStats& into, const StepStats& s) {
  into.total += s.total;
  into.cls += s.cls;
  into.l1 += s.l1;
  into.giou += s.giou;
  into.dn += s.dn;
  into.enc += s.enc;
  into.dn_groups += s.dn_groups;
  into.dn_pos_noise += s.dn_pos_noise;
  into.dn_neg_noise += s.dn_neg_noise;
  into.images += s.images;
  into.noise_images += s.noise_images;
}

}  // namespace

std::vector<CocoResult> to_coco_results(const Dataset& data, const std::vector<std::vector<Detection>>& detections) {
  std::vector<CocoResult> out;
  for (std::size_t i = 0; i < data.size() && i < detections.size(); ++i) {
    const Sample& s = data.samples[i];
    const double W = static_cast<double>(s.source_width), H = static_cast<double>(s.source_height);
    for (const Detection& d : detections[i]) {
      if (d.label < 0 || d.label >= static_cast<Index>(data.category_ids.size())) continue;
      const BoxCorners c = to_xyxy(d.box);
      out.push_back({s.id,
                     data.category_ids[static_cast<std::size_t>(d.label)],
                     {c.x0 * W, c.y0 * H, (c.x1 - c.x0) * W, (c.y1 - c.y0) * H},
                     d.score});
    }
  }
  return out;
}

std::vector<std::vector<Detection>> predict(const Detector& model, const Dataset& data) {
  std::vector<std::vector<Detection>> out;
  for (const Sample& s : data.samples) out.push_back(detections_from(model.forward(s.image.tensor()).final()));
  return out;
}

EvalReport evaluate_model(const Detector& model, const Dataset& data, const RunConfig& cfg) {
  if (data.empty()) throw UndefinedMetricError("evaluation dataset is empty");
  EvalReport report;
  std::vector<Targets> gts;
  std::vector<std::pair<Box, Box>> all, small;
  const CostConfig cost = cfg.cost();
  for (const Sample& s : data.samples) {
    const ModelOutput out = model.forward(s.image.tensor());
    report.detections.push_back(detections_from(out.final()));
    gts.push_back(s.targets);
    for (const auto& pr : anchor_pairs(out, s.targets, cost)) {
      all.push_back(pr);
      if (pr.first.w * pr.first.h < cfg.area_small) small.push_back(pr);
    }
  }
  report.result = evaluate_ap(report.detections, gts, cfg.eval_options());
  if (!all.empty()) report.result.atd100 = atd(all, cfg.atd_k);
  if (!small.empty()) report.result.atd100_small = atd(small, cfg.atd_k);
  return report;
}

void load_parameters(Detector& model, const Checkpoint& ckpt) {
  for (auto& [name, t] : model.params().items()) {
    const NamedBuffer* b = ckpt.find("param/" + name);
    if (b == nullptr) throw ShapeError("checkpoint has no parameter '" + name + "'");
    if (b->shape != t.shape()) {
      throw ShapeError("parameter '" + name + "': checkpoint shape " + shape_to_string(b->shape) +
                       " does not match model shape " + shape_to_string(t.shape()));
    }
    Tensor handle = t;
    handle.mutable_data() = b->data;
  }
}

RunConfig checkpoint_config(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("config")) throw ConfigError("checkpoint carries no run config");
  return parse_run_config(ckpt.meta.at("config").get<std::string>());
}

Trainer::Trainer(const RunConfig& cfg, Dataset train, Dataset val)
    : cfg_(cfg), train_(std::move(train)), val_(std::move(val)), model_((cfg.validate(), cfg.model()), cfg.seed) {
  const ModelConfig m = cfg_.model();
  matching_queries_ =
      m.query_selection == QuerySelection::Static ? m.num_queries : std::min(m.num_queries, token_count(m));
  for (const auto& [name, t] : model_.params().items()) {
    adam_m_.push_back(Buffer::Zero(t.numel()));
    adam_v_.push_back(Buffer::Zero(t.numel()));
  }
  for (const Sample& s : train_.samples) {
    if (s.image.height != cfg_.image_size || s.image.width != cfg_.image_size) {
      throw ShapeError("training image " + std::to_string(s.id) + " is not " + std::to_string(cfg_.image_size) +
                       " pixels square");
    }
    for (Index l : s.targets.labels)
      if (l >= cfg_.num_classes) throw ConfigError("training label exceeds num_classes");
  }
}

Index Trainer::steps_per_epoch() const {
  const Index n = static_cast<Index>(train_.size());
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

double Trainer::current_lr(bool backbone) const {
  const double base = backbone ? cfg_.lr_backbone : cfg_.lr;
  return epoch_ >= cfg_.lr_drop_epoch ? base * 0.1 : base;
}

std::vector<std::size_t> Trainer::epoch_order(Index epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(cfg_.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)});
  // Fisher-Yates with the exact uniform_index so the order is portable.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

std::optional<DnBatch> Trainer::make_dn_batch(const Targets& gt, Rng& rng) const {
  if (!cfg_.cdn_on || gt.size() == 0) return std::nullopt;
  return build_dn_batch(gt.boxes, gt.labels, cfg_.dn(), matching_queries_, rng);
}

StepStats Trainer::step() {
  if (finished()) throw ConfigError("training already finished");
  const std::vector<std::size_t> order = epoch_order(epoch_);
  const std::size_t begin = static_cast<std::size_t>(step_in_epoch_ * cfg_.batch_size);
  const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
  const double inv_batch = 1.0 / static_cast<double>(end - begin);
  const CostConfig cost = cfg_.cost();
  const LossConfig loss_cfg = cfg_.loss();

  model_.params().zero_grad();
  StepStats stats;
  for (std::size_t r = begin; r < end; ++r) {
    const std::size_t idx = order[r];
    const auto e = static_cast<std::uint64_t>(epoch_);
    Rng aug_rng = derive_rng(cfg_.seed, {kAugmentStream, e, idx});
    const Sample sample = augment(train_.samples[idx], cfg_.aug_hflip, cfg_.aug_scale_min, aug_rng);
    const Targets& gt = sample.targets;
    Rng dn_rng = derive_rng(cfg_.seed, {kDenoiseStream, e, idx});
    const std::optional<DnBatch> dn = make_dn_batch(gt, dn_rng);

    const ModelOutput out = model_.forward(sample.image.tensor(), dn ? &*dn : nullptr);
    const auto assignments = match_layers(out.layers, gt, cost);
    std::optional<MatchAssignment> enc_assignment;
    if (out.encoder) enc_assignment = match(*out.encoder, gt, cost);
    const SetLoss set = set_loss(out.layers, out.encoder, gt, assignments, enc_assignment, loss_cfg);
    Tensor total = set.total;
    double dn_value = 0.0;
    if (dn) {
      const Tensor d = dn_loss(out.dn_layers, *dn, gt, loss_cfg);
      dn_value = d.item();
      total = add(total, d);
    }
    const double value = total.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch_) + ", step " +
                         std::to_string(step_in_epoch_) + ", image id " + std::to_string(sample.id));
    }
    scale(total, inv_batch).backward();

    stats.total += value;
    stats.cls += set.cls;
    stats.l1 += set.l1;
    stats.giou += set.giou;
    stats.enc += set.encoder;
    stats.dn += dn_value;
    ++stats.images;
    if (dn) {
      stats.dn_groups += static_cast<double>(dn->group_count);
      std::vector<Delta> pos, neg;
      std::vector<Index> src;
      for (const auto& g : dn->groups) {
        pos.insert(pos.end(), g.positive_noise.begin(), g.positive_noise.end());
        neg.insert(neg.end(), g.negative_noise.begin(), g.negative_noise.end());
        src.insert(src.end(), g.gt_index.begin(), g.gt_index.end());
      }
      stats.dn_pos_noise += noise_ratio(pos, src, gt);
      stats.dn_neg_noise += noise_ratio(neg, src, gt);
      ++stats.noise_images;
    }
  }

  auto& items = model_.params().items();
  double sq = 0.0;
  for (const auto& [name, t] : items) sq += t.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NumericError("non-finite gradient norm at epoch " + std::to_string(epoch_) + ", step " +
                       std::to_string(step_in_epoch_));
  }
  const double clip = cfg_.clip_max_norm > 0 && norm > cfg_.clip_max_norm ? cfg_.clip_max_norm / (norm + 1e-6) : 1.0;

  ++global_step_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(global_step_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(global_step_));
  for (std::size_t p = 0; p < items.size(); ++p) {
    Tensor t = items[p].second;
    // Parameters off every loss path this step (e.g. unused query modes) stay put.
    if (t.node()->grad.size() != t.numel()) continue;
    const double lr = current_lr(Detector::is_backbone_param(items[p].first));
    const Buffer g = t.grad() * clip;
    Buffer& w = t.mutable_data();
    w *= 1.0 - lr * cfg_.weight_decay;
    adam_m_[p] = kBeta1 * adam_m_[p] + (1.0 - kBeta1) * g;
    adam_v_[p] = kBeta2 * adam_v_[p] + (1.0 - kBeta2) * g.cwiseProduct(g);
    w.array() -= lr * (adam_m_[p].array() / bc1) / ((adam_v_[p].array() / bc2).sqrt() + kAdamEps);
  }
  model_.params().zero_grad();
  ++step_in_epoch_;

  StepStats mean = stats;
  const double n = static_cast<double>(stats.images);
  for (double* v : {&mean.total, &mean.cls, &mean.l1, &mean.giou, &mean.dn, &mean.enc, &mean.dn_groups}) *v /= n;
  if (stats.noise_images > 0) {
    mean.dn_pos_noise /= static_cast<double>(stats.noise_images);
    mean.dn_neg_noise /= static_cast<double>(stats.noise_images);
  }
  accumulate(epoch_sums_, stats);
  return mean;
}

MetricsRow Trainer::run_epoch() {
  while (step_in_epoch_ < steps_per_epoch()) step();
  MetricsRow row;
  row.epoch = epoch_;
  const StepStats& s = epoch_sums_;
  const double n = std::max<double>(1.0, static_cast<double>(s.images));
  const double nd = std::max<double>(1.0, static_cast<double>(s.noise_images));
  row.loss_total = s.total / n;
  row.loss_cls = s.cls / n;
  row.loss_bbox = s.l1 / n;
  row.loss_giou = s.giou / n;
  row.loss_dn = s.dn / n;
  row.loss_enc = s.enc / n;
  row.lr = current_lr(false);
  row.dn_groups_mean = s.dn_groups / n;
  row.dn_pos_noise_mean = s.dn_pos_noise / nd;
  row.dn_neg_noise_mean = s.dn_neg_noise / nd;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row.eval.ap = row.eval.ap50 = row.eval.ap75 = nan;
  row.eval.ap_small = row.eval.ap_medium = row.eval.ap_large = nan;
  row.eval.duplicate_rate = nan;
  if (!val_.empty()) {
    try {
      row.eval = evaluate_model(model_, val_, cfg_).result;
    } catch (const UndefinedMetricError&) {
      // A validation set without objects leaves the metric columns at nan.
    }
  }
  rows_.push_back(metrics_csv_row(row));
  ++epoch_;
  step_in_epoch_ = 0;
  epoch_sums_ = {};
  return row;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["format"] = "dino-desk-run";
  ckpt.meta["config"] = serialize_run_config(cfg_);
  ckpt.meta["epoch"] = epoch_;
  ckpt.meta["step_in_epoch"] = step_in_epoch_;
  ckpt.meta["global_step"] = global_step_;
  ckpt.meta["rows"] = rows_;
  ckpt.meta["epoch_sums"] = stats_to_json(epoch_sums_);
  const auto& items = model_.params().items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    const auto& [name, t] = items[p];
    ckpt.tensors.push_back({"param/" + name, t.shape(), t.data()});
    ckpt.tensors.push_back({"adam_m/" + name, t.shape(), adam_m_[p]});
    ckpt.tensors.push_back({"adam_v/" + name, t.shape(), adam_v_[p]});
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.meta.value("format", "") != "dino-desk-run") throw ConfigError("checkpoint is not a training checkpoint");
  load_parameters(model_, ckpt);
  const auto& items = model_.params().items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    for (auto [prefix, buf] : {std::pair{"adam_m/", &adam_m_[p]}, std::pair{"adam_v/", &adam_v_[p]}}) {
      const NamedBuffer* b = ckpt.find(prefix + items[p].first);
      if (b == nullptr || b->data.size() != items[p].second.numel()) {
        throw ShapeError("checkpoint optimizer state for '" + items[p].first + "' is missing or mis-sized");
      }
      *buf = b->data;
    }
  }
  try {
    epoch_ = ckpt.meta.at("epoch").get<Index>();
    step_in_epoch_ = ckpt.meta.at("step_in_epoch").get<Index>();
    global_step_ = ckpt.meta.at("global_step").get<Index>();
    rows_ = ckpt.meta.at("rows").get<std::vector<std::string>>();
    epoch_sums_ = stats_from_json(ckpt.meta.at("epoch_sums"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint metadata: ") + e.what());
  }
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
  const char* env = std::getenv("DINO_OUTPUT_DIR");
  if (env != nullptr && *env != '\0') return env;
  return cfg.output_dir;
}

std::pair<Dataset, Dataset> load_run_data(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    const std::filesystem::path root = cfg.data_dir;
    return {load_dataset_dir(root / "train", cfg.image_size, cfg.train_images),
            load_dataset_dir(root / "val", cfg.image_size, cfg.val_images)};
  }
  SyntheticConfig s;
  s.image_size = cfg.image_size;
  s.num_classes = cfg.num_classes;
  s.count = cfg.train_images;
  s.seed = derive_rng(cfg.data_seed, {kTrainSplit})();
  Dataset train = gen_synthetic(s);
  s.count = cfg.val_images;
  s.seed = derive_rng(cfg.data_seed, {kValSplit})();
  return {std::move(train), gen_synthetic(s)};
}

namespace {

std::string csv_text(const std::vector<std::string>& rows) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& r : rows) out += r + "\n";
  return out;
}

}  // namespace

void fit(const RunConfig& cfg, const std::filesystem::path& out_dir,
         const std::optional<std::filesystem::path>& resume, std::ostream* log) {
  cfg.validate();
  auto [train, val] = load_run_data(cfg);
  Trainer trainer(cfg, std::move(train), std::move(val));
  if (resume) {
    const Checkpoint ckpt = load_checkpoint(*resume);
    std::vector<std::string> conflicts;
    for (const auto& key : differing_keys(checkpoint_config(ckpt), cfg))
      if (key != "epochs" && key != "output_dir") conflicts.push_back(key);
    if (!conflicts.empty()) {
      std::string keys;
      for (const auto& k : conflicts) keys += " " + k;
      throw ConfigError("resume: config differs from the checkpoint in:" + keys);
    }
    trainer.restore(ckpt);
  }
  write_file_atomic(out_dir / "config.txt", serialize_run_config(cfg));

  while (!trainer.finished()) {
    if (trainer.epoch() == cfg.lr_drop_epoch && trainer.step_in_epoch() == 0 && cfg.lr_drop_epoch > 0) {
      save_checkpoint(out_dir / "checkpoint_lr_drop.ckpt", trainer.checkpoint());
    }
    const Index epoch = trainer.epoch();
    MetricsRow row;
    try {
      row = trainer.run_epoch();
    } catch (const NumericError& e) {
      nlohmann::json dump{{"epoch", epoch}, {"step", trainer.step_in_epoch()}, {"error", e.what()}};
      write_file_atomic(out_dir / "nan_dump.json", dump.dump(1) + "\n");
      throw;
    }
    write_file_atomic(out_dir / "metrics.csv", csv_text(trainer.metrics_rows()));
    save_checkpoint(out_dir / "checkpoint.ckpt", trainer.checkpoint());
    if (log != nullptr) {
      *log << "epoch " << row.epoch << ": loss " << row.loss_total << " (dn " << row.loss_dn << "), AP50 "
           << 100 * row.eval.ap50 << ", duplicates " << row.eval.duplicate_rate << "\n";
    }
  }
  if (!trainer.val_data().empty()) {
    write_coco_results(out_dir / "predictions_val.json",
                       to_coco_results(trainer.val_data(), predict(trainer.model(), trainer.val_data())));
  }
}

}  // namespace dino
