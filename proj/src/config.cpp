#include "dino/config.hpp"

#include "dino/errors.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace dino {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& s) {
  Int v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) bad_value(key, s, "an integer");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) bad_value(key, s, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, s, "a number");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  bad_value(key, s, "true or false");
}

Field int_field(const std::string& key, Index RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m, key](RunConfig& c, const std::string& s) { c.*m = parse_integer<Index>(key, s); }};
}

Field u64_field(const std::string& key, std::uint64_t RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m, key](RunConfig& c, const std::string& s) { c.*m = parse_integer<std::uint64_t>(key, s); }};
}

Field double_field(const std::string& key, double RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return format_double(c.*m); },
          [m, key](RunConfig& c, const std::string& s) { c.*m = parse_double(key, s); }};
}

Field bool_field(const std::string& key, bool RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m, key](RunConfig& c, const std::string& s) { c.*m = parse_bool(key, s); }};
}

Field string_field(const std::string& key, std::string RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return c.*m; }, [m](RunConfig& c, const std::string& s) { c.*m = s; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      int_field("image_size", &RunConfig::image_size),
      int_field("hidden_dim", &RunConfig::hidden_dim),
      int_field("enc_layers", &RunConfig::enc_layers),
      int_field("dec_layers", &RunConfig::dec_layers),
      int_field("nheads", &RunConfig::nheads),
      int_field("num_queries", &RunConfig::num_queries),
      int_field("enc_n_points", &RunConfig::enc_n_points),
      int_field("dec_n_points", &RunConfig::dec_n_points),
      int_field("num_feature_levels", &RunConfig::num_feature_levels),
      int_field("dim_feedforward", &RunConfig::dim_feedforward),
      int_field("num_classes", &RunConfig::num_classes),
      double_field("dropout", &RunConfig::dropout),
      double_field("pe_temperature", &RunConfig::pe_temperature),
      double_field("set_cost_class", &RunConfig::set_cost_class),
      double_field("set_cost_bbox", &RunConfig::set_cost_bbox),
      double_field("set_cost_giou", &RunConfig::set_cost_giou),
      double_field("cls_loss_coef", &RunConfig::cls_loss_coef),
      double_field("bbox_loss_coef", &RunConfig::bbox_loss_coef),
      double_field("giou_loss_coef", &RunConfig::giou_loss_coef),
      double_field("focal_alpha", &RunConfig::focal_alpha),
      double_field("focal_gamma", &RunConfig::focal_gamma),
      double_field("enc_loss_coef", &RunConfig::enc_loss_coef),
      double_field("dn_box_noise_scale", &RunConfig::dn_box_noise_scale),
      double_field("dn_label_noise_ratio", &RunConfig::dn_label_noise_ratio),
      double_field("lambda1", &RunConfig::lambda1),
      double_field("lambda2", &RunConfig::lambda2),
      int_field("cdn_pair_capacity", &RunConfig::cdn_pair_capacity),
      {"qs_mode", [](const RunConfig& c) { return to_string(c.qs_mode); },
       [](RunConfig& c, const std::string& s) { c.qs_mode = parse_query_selection(s); }},
      bool_field("cdn_on", &RunConfig::cdn_on),
      bool_field("lft_on", &RunConfig::lft_on),
      double_field("lr", &RunConfig::lr),
      double_field("lr_backbone", &RunConfig::lr_backbone),
      double_field("weight_decay", &RunConfig::weight_decay),
      double_field("clip_max_norm", &RunConfig::clip_max_norm),
      int_field("batch_size", &RunConfig::batch_size),
      int_field("epochs", &RunConfig::epochs),
      int_field("lr_drop_epoch", &RunConfig::lr_drop_epoch),
      u64_field("seed", &RunConfig::seed),
      string_field("data_dir", &RunConfig::data_dir),
      int_field("train_images", &RunConfig::train_images),
      int_field("val_images", &RunConfig::val_images),
      u64_field("data_seed", &RunConfig::data_seed),
      bool_field("aug_hflip", &RunConfig::aug_hflip),
      double_field("aug_scale_min", &RunConfig::aug_scale_min),
      int_field("atd_k", &RunConfig::atd_k),
      double_field("duplicate_score", &RunConfig::duplicate_score),
      double_field("duplicate_iou", &RunConfig::duplicate_iou),
      double_field("area_small", &RunConfig::area_small),
      double_field("area_medium", &RunConfig::area_medium),
      string_field("output_dir", &RunConfig::output_dir),
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void assign(RunConfig& cfg, const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  try {
    field(key).set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model().validate();
  dn().validate();
  if (dropout != 0.0) throw ConfigError("dropout: only 0.0 is supported");
  if (!(lr > 0) || !(lr_backbone >= 0)) throw ConfigError("lr must be positive and lr_backbone non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_max_norm >= 0)) throw ConfigError("clip_max_norm must be non-negative (0 disables clipping)");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (lr_drop_epoch < 0) throw ConfigError("lr_drop_epoch must be non-negative");
  if (train_images < 0 || val_images < 0) throw ConfigError("image counts must be non-negative");
  if (!(aug_scale_min > 0 && aug_scale_min <= 1)) throw ConfigError("aug_scale_min must lie in (0, 1]");
  if (atd_k < 1) throw ConfigError("atd_k must be positive");
  if (!(area_small > 0 && area_small < area_medium)) throw ConfigError("require 0 < area_small < area_medium");
  for (double c : {set_cost_class, set_cost_bbox, set_cost_giou, cls_loss_coef, bbox_loss_coef, giou_loss_coef,
                   enc_loss_coef})
    if (!(c >= 0)) throw ConfigError("cost and loss coefficients must be non-negative");
  if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ConfigError("focal_alpha must lie in [0, 1]");
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.image_size = image_size;
  m.hidden_dim = hidden_dim;
  m.enc_layers = enc_layers;
  m.dec_layers = dec_layers;
  m.nheads = nheads;
  m.num_queries = num_queries;
  m.enc_n_points = enc_n_points;
  m.dec_n_points = dec_n_points;
  m.num_levels = num_feature_levels;
  m.dim_feedforward = dim_feedforward;
  m.num_classes = num_classes;
  m.look_forward = lft_on ? LookForward::Twice : LookForward::Once;
  m.query_selection = qs_mode;
  m.pe_temperature = pe_temperature;
  return m;
}

DnConfig RunConfig::dn() const {
  DnConfig d;
  d.lambda1 = lambda1;
  d.lambda2 = lambda2;
  d.box_noise_scale = dn_box_noise_scale;
  d.label_noise_ratio = dn_label_noise_ratio;
  d.cdn_pair_capacity = cdn_pair_capacity;
  d.num_classes = num_classes;
  return d;
}

CostConfig RunConfig::cost() const {
  CostConfig c;
  c.cost_class = set_cost_class;
  c.cost_bbox = set_cost_bbox;
  c.cost_giou = set_cost_giou;
  c.focal_alpha = focal_alpha;
  c.focal_gamma = focal_gamma;
  return c;
}

LossConfig RunConfig::loss() const {
  LossConfig l;
  l.cls_coef = cls_loss_coef;
  l.l1_coef = bbox_loss_coef;
  l.giou_coef = giou_loss_coef;
  l.focal_alpha = focal_alpha;
  l.focal_gamma = focal_gamma;
  l.encoder_weight = enc_loss_coef;
  return l;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.areas = {area_small, area_medium};
  o.duplicate_score = duplicate_score;
  o.duplicate_iou = duplicate_iou;
  return o;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    assign(cfg, line, "line " + std::to_string(n));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  try {
    return parse_run_config(text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

void apply_override(RunConfig& cfg, const std::string& assignment) { assign(cfg, assignment, "--set"); }

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::vector<std::string> differing_keys(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> keys;
  for (const auto& f : fields())
    if (f.get(a) != f.get(b)) keys.push_back(f.key);
  return keys;
}

}  // namespace dino
