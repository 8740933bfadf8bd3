#include "dino/model.hpp"

#include "dino/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>

namespace dino {

std::string to_string(LookForward m) { return m == LookForward::Once ? "once" : "twice"; }

std::string to_string(QuerySelection m) {
  switch (m) {
    case QuerySelection::Static: return "static";
    case QuerySelection::Pure: return "pure";
    case QuerySelection::Mixed: return "mixed";
  }
  return "?";
}

LookForward parse_look_forward(const std::string& s) {
  if (s == "once") return LookForward::Once;
  if (s == "twice") return LookForward::Twice;
  throw ConfigError("look_forward must be once or twice, got '" + s + "'");
}

QuerySelection parse_query_selection(const std::string& s) {
  if (s == "static") return QuerySelection::Static;
  if (s == "pure") return QuerySelection::Pure;
  if (s == "mixed") return QuerySelection::Mixed;
  throw ConfigError("query selection must be static, pure or mixed, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive(hidden_dim, "hidden_dim");
  positive(nheads, "nheads");
  positive(num_queries, "num_queries");
  positive(enc_n_points, "enc_n_points");
  positive(dec_n_points, "dec_n_points");
  positive(dec_layers, "dec_layers");
  positive(dim_feedforward, "dim_feedforward");
  positive(num_classes, "num_classes");
  if (enc_layers < 0) throw ConfigError("enc_layers must be non-negative");
  if (hidden_dim % nheads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by nheads " +
                      std::to_string(nheads));
  }
  if (hidden_dim % 2 != 0) throw ConfigError("hidden_dim must be even for the sine embedding");
  if (num_levels < 1 || num_levels > 4) throw ConfigError("num_levels must lie in [1, 4]");
  if (image_size < 1 || image_size % total_stride() != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by the total stride " +
                      std::to_string(total_stride()));
  }
  if (!(pe_temperature > 0)) throw ConfigError("pe_temperature must be positive");
  if (!(inverse_sigmoid_eps > 0 && inverse_sigmoid_eps < 0.5)) {
    throw ConfigError("inverse_sigmoid_eps must lie in (0, 0.5)");
  }
}

// ---------------------------------------------------------------------------
// Parameters

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw Error(ErrorCategory::Internal, "duplicate parameter " + name);
  value.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, value);
  return value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCategory::Internal, "unknown parameter " + name);
  return items_[it->second].second;
}

Index ParamStore::numel() const {
  Index n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

namespace {

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  const Index n = shape_numel(shape);
  Buffer b(n);
  for (Index i = 0; i < n; ++i) b[i] = uniform(rng, -limit, limit);
  return Tensor::from_buffer(std::move(shape), std::move(b));
}

Linear make_linear(ParamStore& ps, Rng& rng, const std::string& name, Index in, Index out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  return {ps.add(name + ".weight", uniform_tensor({in, out}, limit, rng)),
          ps.add(name + ".bias", Tensor::zeros({out}))};
}

LayerNorm make_norm(ParamStore& ps, const std::string& name, Index dim) {
  return {ps.add(name + ".gamma", Tensor::full({dim}, 1.0)), ps.add(name + ".beta", Tensor::zeros({dim}))};
}

Mlp make_mlp(ParamStore& ps, Rng& rng, const std::string& name, Index in, Index hidden, Index out, int layers) {
  Mlp m;
  for (int i = 0; i < layers; ++i) {
    const Index a = i == 0 ? in : hidden;
    const Index b = i == layers - 1 ? out : hidden;
    m.layers.push_back(make_linear(ps, rng, name + "." + std::to_string(i), a, b));
  }
  return m;
}

MultiHeadAttention make_mha(ParamStore& ps, Rng& rng, const std::string& name, Index dim, Index heads) {
  return {make_linear(ps, rng, name + ".q", dim, dim), make_linear(ps, rng, name + ".k", dim, dim),
          make_linear(ps, rng, name + ".v", dim, dim), make_linear(ps, rng, name + ".out", dim, dim), heads};
}

DeformableAttention make_deformable(ParamStore& ps, Rng& rng, const std::string& name, Index dim, Index heads,
                                    Index levels, Index points) {
  DeformableAttention a;
  a.heads = heads;
  a.levels = levels;
  a.points = points;
  a.value_proj = make_linear(ps, rng, name + ".value_proj", dim, dim);
  a.out = make_linear(ps, rng, name + ".out", dim, dim);
  // Offsets start on a star around the reference: one direction per head,
  // point p reaching p + 1 units out.
  Buffer bias(heads * levels * points * 2);
  for (Index h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(heads);
    double cx = std::cos(theta), cy = std::sin(theta);
    const double norm = std::max(std::abs(cx), std::abs(cy));
    cx /= norm;
    cy /= norm;
    for (Index l = 0; l < levels; ++l)
      for (Index p = 0; p < points; ++p) {
        const Index s = (h * levels + l) * points + p;
        bias[2 * s] = cx * static_cast<double>(p + 1);
        bias[2 * s + 1] = cy * static_cast<double>(p + 1);
      }
  }
  a.offsets = {ps.add(name + ".offsets.weight", Tensor::zeros({dim, heads * levels * points * 2})),
               ps.add(name + ".offsets.bias", Tensor::from_buffer({heads * levels * points * 2}, bias))};
  a.weights = {ps.add(name + ".weights.weight", Tensor::zeros({dim, heads * levels * points})),
               ps.add(name + ".weights.bias", Tensor::zeros({heads * levels * points}))};
  return a;
}

double prior_bias() { return -std::log((1.0 - 0.01) / 0.01); }

// Columns of the location layout, (h, l, p, xy) with xy fastest.
RowMatrix coordinate_selector(Index rows, Index heads, Index levels, Index points, Index x_row, Index y_row,
                              double scale) {
  const Index cols = heads * levels * points * 2;
  RowMatrix e = RowMatrix::Zero(rows, cols);
  for (Index c = 0; c < cols; c += 2) {
    e(x_row, c) = scale;
    e(y_row, c + 1) = scale;
  }
  return e;
}

std::vector<Index> iota(Index begin, Index end) {
  std::vector<Index> v(static_cast<std::size_t>(std::max<Index>(0, end - begin)));
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Building blocks

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                                      const std::optional<Tensor>& mask) const {
  const Tensor qp = q(query), kp = k(key), vp = v(value);
  const Index dim = qp.dim(1), dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    const Tensor qh = slice(qp, 1, h * dh, (h + 1) * dh);
    const Tensor kh = slice(kp, 1, h * dh, (h + 1) * dh);
    const Tensor vh = slice(vp, 1, h * dh, (h + 1) * dh);
    Tensor logits = matmul(qh, transpose(kh)) * scale;
    if (mask) logits = logits + *mask;
    parts.push_back(matmul(softmax(logits, 1), vh));
  }
  return out(concat(parts, 1));
}

Tensor DeformableAttention::operator()(const Tensor& query, const Tensor& refs, ReferenceKind kind,
                                       const Tensor& value_in, const std::vector<LevelShape>& shapes) const {
  const Index q = query.dim(0);
  const Index samples = heads * levels * points;
  const Tensor value = value_proj(value_in);
  const Tensor off = offsets(query);
  const Tensor w = reshape(softmax(reshape(weights(query), {q * heads, levels * points}), 1), {q, samples});
  Tensor loc;
  if (kind == ReferenceKind::Point) {
    const Tensor center = matmul(refs, Tensor::from_matrix(coordinate_selector(2, heads, levels, points, 0, 1, 1.0)));
    RowMatrix pixel = RowMatrix::Zero(1, samples * 2);
    for (Index h = 0; h < heads; ++h)
      for (Index l = 0; l < levels; ++l)
        for (Index p = 0; p < points; ++p) {
          const Index s = (h * levels + l) * points + p;
          pixel(0, 2 * s) = 1.0 / static_cast<double>(shapes[static_cast<std::size_t>(l)].width);
          pixel(0, 2 * s + 1) = 1.0 / static_cast<double>(shapes[static_cast<std::size_t>(l)].height);
        }
    loc = center + off * Tensor::from_matrix(pixel.replicate(q, 1));
  } else {
    const double unit = 0.5 / static_cast<double>(points);
    const Tensor center = matmul(refs, Tensor::from_matrix(coordinate_selector(4, heads, levels, points, 0, 1, 1.0)));
    const Tensor extent = matmul(refs, Tensor::from_matrix(coordinate_selector(4, heads, levels, points, 2, 3, unit)));
    loc = center + off * extent;
  }
  return out(ms_deform_sample(value, shapes, loc, w, heads, points));
}

Tensor EncoderLayer::operator()(const Tensor& src, const Tensor& pos, const Tensor& refs,
                                const std::vector<LevelShape>& shapes) const {
  Tensor x = norm1(src + attn(src + pos, refs, ReferenceKind::Point, src, shapes));
  return norm2(x + ffn2(relu(ffn1(x))));
}

Tensor DecoderLayer::self_attention(const Tensor& content, const Tensor& pos,
                                    const std::optional<Tensor>& mask) const {
  const Tensor qk = content + pos;
  return norm1(content + self_attn(qk, qk, content, mask));
}

Tensor DecoderLayer::operator()(const Tensor& content, const Tensor& pos, const Tensor& refs,
                                const Tensor& memory, const std::vector<LevelShape>& shapes,
                                const std::optional<Tensor>& mask) const {
  Tensor x = self_attention(content, pos, mask);
  x = norm2(x + cross_attn(x + pos, refs, ReferenceKind::Box, memory, shapes));
  return norm3(x + ffn2(relu(ffn1(x))));
}

Tensor sine_embedding(const Tensor& coords, Index feats, double temperature) {
  const Index n = coords.dim(0), k = coords.dim(1);
  RowMatrix freq = RowMatrix::Zero(k, k * feats);
  RowMatrix even = RowMatrix::Zero(n, k * feats), odd = RowMatrix::Zero(n, k * feats);
  for (Index c = 0; c < k; ++c)
    for (Index j = 0; j < feats; ++j) {
      const double e = static_cast<double>(2 * (j / 2)) / static_cast<double>(feats);
      freq(c, c * feats + j) = 2.0 * std::numbers::pi / std::pow(temperature, e);
      (j % 2 == 0 ? even : odd).col(c * feats + j).setOnes();
    }
  const Tensor angles = matmul(coords, Tensor::from_matrix(freq));
  return sin(angles) * Tensor::from_matrix(even) + cos(angles) * Tensor::from_matrix(odd);
}

Tensor attention_bias(const BoolMatrix& allowed) {
  RowMatrix b(allowed.rows(), allowed.cols());
  for (Index i = 0; i < b.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j)
      b(i, j) = allowed(i, j) ? 0.0 : -std::numeric_limits<double>::infinity();
  return Tensor::from_matrix(b);
}

// ---------------------------------------------------------------------------
// Detector

Detector::Detector(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = derive_rng(seed, {0x6d6f64656cULL});
  const Index d = cfg_.hidden_dim;
  auto conv = [&](const std::string& name, Index cin, Index cout) {
    const double limit = std::sqrt(6.0 / static_cast<double>(9 * cin));
    return ConvBlock{params_.add(name + ".weight", uniform_tensor({9 * cin, cout}, limit, rng)),
                     params_.add(name + ".bias", Tensor::zeros({cout})), 3, 2, 1};
  };
  const std::array<Index, 4> widths{3, 16, 32, 64};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    stem_.push_back(conv("backbone.conv" + std::to_string(i), widths[i], widths[i + 1]));
  level0_proj_ = make_linear(params_, rng, "input_proj.0", widths.back(), d);
  level_norms_.push_back(make_norm(params_, "input_proj.0.norm", d));
  for (Index l = 1; l < cfg_.num_levels; ++l) {
    const std::string name = "input_proj." + std::to_string(l);
    extra_levels_.push_back(conv(name, l == 1 ? widths.back() : d, d));
    level_norms_.push_back(make_norm(params_, name + ".norm", d));
  }
  {
    Buffer b(cfg_.num_levels * d);
    for (Index i = 0; i < b.size(); ++i) b[i] = normal(rng);
    level_embed_ = params_.add("level_embed", Tensor::from_buffer({cfg_.num_levels, d}, b));
  }
  for (Index i = 0; i < cfg_.enc_layers; ++i) {
    const std::string name = "encoder." + std::to_string(i);
    EncoderLayer layer;
    layer.attn = make_deformable(params_, rng, name + ".attn", d, cfg_.nheads, cfg_.num_levels, cfg_.enc_n_points);
    layer.norm1 = make_norm(params_, name + ".norm1", d);
    layer.ffn1 = make_linear(params_, rng, name + ".ffn1", d, cfg_.dim_feedforward);
    layer.ffn2 = make_linear(params_, rng, name + ".ffn2", cfg_.dim_feedforward, d);
    layer.norm2 = make_norm(params_, name + ".norm2", d);
    encoder_.push_back(layer);
  }
  enc_output_ = make_linear(params_, rng, "enc_output", d, d);
  enc_output_norm_ = make_norm(params_, "enc_output.norm", d);
  enc_class_ = make_linear(params_, rng, "enc_class", d, cfg_.num_classes);
  enc_class_.bias.mutable_data().setConstant(prior_bias());
  enc_box_ = make_mlp(params_, rng, "enc_box", d, d, 4, 3);
  enc_box_.layers.back().weight.mutable_data().setZero();
  if (cfg_.query_selection == QuerySelection::Pure) pure_content_ = make_linear(params_, rng, "pure_content", d, d);
  if (cfg_.query_selection != QuerySelection::Pure) {
    Buffer b(cfg_.num_queries * d);
    for (Index i = 0; i < b.size(); ++i) b[i] = normal(rng);
    query_content_ = params_.add("query_content", Tensor::from_buffer({cfg_.num_queries, d}, b));
  }
  if (cfg_.query_selection == QuerySelection::Static) {
    RowMatrix a(cfg_.num_queries, 4);
    for (Index i = 0; i < cfg_.num_queries; ++i)
      a.row(i) << inverse_sigmoid(uniform(rng, 0.05, 0.95)), inverse_sigmoid(uniform(rng, 0.05, 0.95)),
          inverse_sigmoid(0.1), inverse_sigmoid(0.1);
    anchor_logits_ = params_.add("anchor_logits", Tensor::from_matrix(a));
  }
  {
    Buffer b(cfg_.num_classes * d);
    for (Index i = 0; i < b.size(); ++i) b[i] = normal(rng);
    label_embed_ = params_.add("label_embed", Tensor::from_buffer({cfg_.num_classes, d}, b));
  }
  ref_point_head_ = make_mlp(params_, rng, "ref_point_head", 2 * d, d, d, 2);
  for (Index i = 0; i < cfg_.dec_layers; ++i) {
    const std::string name = "decoder." + std::to_string(i);
    DecoderLayer layer;
    layer.self_attn = make_mha(params_, rng, name + ".self_attn", d, cfg_.nheads);
    layer.norm1 = make_norm(params_, name + ".norm1", d);
    layer.cross_attn =
        make_deformable(params_, rng, name + ".cross_attn", d, cfg_.nheads, cfg_.num_levels, cfg_.dec_n_points);
    layer.norm2 = make_norm(params_, name + ".norm2", d);
    layer.ffn1 = make_linear(params_, rng, name + ".ffn1", d, cfg_.dim_feedforward);
    layer.ffn2 = make_linear(params_, rng, name + ".ffn2", cfg_.dim_feedforward, d);
    layer.norm3 = make_norm(params_, name + ".norm3", d);
    decoder_.push_back(layer);
  }
  const Index heads = cfg_.shared_heads ? 1 : cfg_.dec_layers;
  for (Index i = 0; i < heads; ++i) {
    const std::string suffix = cfg_.shared_heads ? "" : "." + std::to_string(i);
    Linear cls = make_linear(params_, rng, "class_head" + suffix, d, cfg_.num_classes);
    cls.bias.mutable_data().setConstant(prior_bias());
    class_heads_.push_back(cls);
    Mlp box = make_mlp(params_, rng, "box_head" + suffix, d, d, 4, 3);
    box.layers.back().weight.mutable_data().setZero();
    box_heads_.push_back(box);
  }
}

const Mlp& Detector::box_head(Index layer) const {
  return box_heads_[cfg_.shared_heads ? 0 : static_cast<std::size_t>(layer)];
}

const Linear& Detector::class_head(Index layer) const {
  return class_heads_[cfg_.shared_heads ? 0 : static_cast<std::size_t>(layer)];
}

MultiScaleFeatures Detector::backbone(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("backbone: expected an [H, W, 3] image, got " + shape_to_string(image.shape()));
  }
  const Index stride = cfg_.total_stride();
  if (image.dim(0) % stride != 0 || image.dim(1) % stride != 0) {
    throw ShapeError("backbone: image " + shape_to_string(image.shape()) + " is not divisible by stride " +
                     std::to_string(stride));
  }
  Tensor x = image;
  for (const auto& c : stem_) x = relu(conv2d(x, c.weight, c.bias, c.kernel, c.stride, c.padding));
  MultiScaleFeatures f;
  std::vector<Tensor> levels;
  f.shapes.push_back({x.dim(0), x.dim(1)});
  levels.push_back(level_norms_[0](level0_proj_(reshape(x, {x.dim(0) * x.dim(1), x.dim(2)}))));
  Tensor prev = x;
  for (std::size_t l = 0; l < extra_levels_.size(); ++l) {
    const auto& c = extra_levels_[l];
    prev = conv2d(prev, c.weight, c.bias, c.kernel, c.stride, c.padding);
    f.shapes.push_back({prev.dim(0), prev.dim(1)});
    levels.push_back(level_norms_[l + 1](reshape(prev, {prev.dim(0) * prev.dim(1), prev.dim(2)})));
  }
  f.tokens = concat(levels, 0);

  const Index total = f.tokens.dim(0);
  f.points.resize(total, 2);
  std::vector<Index> level_of(static_cast<std::size_t>(total));
  Index row = 0;
  for (std::size_t l = 0; l < f.shapes.size(); ++l) {
    const auto [h, w] = f.shapes[l];
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx, ++row) {
        f.points(row, 0) = (static_cast<double>(xx) + 0.5) / static_cast<double>(w);
        f.points(row, 1) = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
        level_of[static_cast<std::size_t>(row)] = static_cast<Index>(l);
      }
  }
  const Tensor sine = sine_embedding(Tensor::from_matrix(f.points), cfg_.hidden_dim / 2, cfg_.pe_temperature);
  f.pos = sine + gather(level_embed_, level_of);
  return f;
}

Tensor Detector::encode(const MultiScaleFeatures& f) const {
  const Tensor refs = Tensor::from_matrix(f.points);
  Tensor x = f.tokens;
  for (const auto& layer : encoder_) x = layer(x, f.pos, refs, f.shapes);
  return x;
}

QueryInit Detector::select_queries(const MultiScaleFeatures& f, const Tensor& memory) const {
  QueryInit init;
  const Index k_cfg = cfg_.num_queries;
  if (cfg_.query_selection == QuerySelection::Static) {
    init.anchors = sigmoid(anchor_logits_);
    init.content = query_content_;
    return init;
  }
  Selection s;
  s.memory_features = enc_output_norm_(enc_output_(memory));
  s.all_logits = enc_class_(s.memory_features);
  RowMatrix proposals(f.size(), 4);
  {
    Index row = 0;
    for (std::size_t l = 0; l < f.shapes.size(); ++l) {
      const double wh = 0.05 * std::pow(2.0, static_cast<double>(l));
      const Index n = f.shapes[l].height * f.shapes[l].width;
      for (Index i = 0; i < n; ++i, ++row) proposals.row(row) << f.points(row, 0), f.points(row, 1), wh, wh;
    }
  }
  s.all_boxes = box_update(Tensor::from_matrix(proposals), enc_box_(s.memory_features), cfg_.inverse_sigmoid_eps);

  Index k = k_cfg;
  if (k > f.size()) {
    std::cerr << "warning: num_queries " << k << " exceeds " << f.size() << " encoder features; using "
              << f.size() << "\n";
    k = f.size();
  }
  const auto logits = s.all_logits.mat();
  std::vector<double> score(static_cast<std::size_t>(f.size()));
  for (Index i = 0; i < f.size(); ++i) score[static_cast<std::size_t>(i)] = logits.row(i).maxCoeff();
  std::vector<Index> order = iota(0, f.size());
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(k));
  for (Index& i : order) i = static_cast<Index>(take_branch(static_cast<std::uint64_t>(i)));
  s.indices = order;
  s.selected = {gather(s.all_logits, order), gather(s.all_boxes, order)};

  init.anchors = cfg_.detach_selected_anchors ? detach(s.selected.boxes) : s.selected.boxes;
  if (cfg_.query_selection == QuerySelection::Mixed) {
    init.content = k == k_cfg ? query_content_ : slice(query_content_, 0, 0, k);
  } else {
    init.content = pure_content_(detach(gather(s.memory_features, order)));
  }
  init.selection = std::move(s);
  return init;
}

ModelOutput Detector::decode(const Tensor& anchors, const Tensor& content, Index dn_count, const Tensor& memory,
                             const MultiScaleFeatures& f, const std::optional<BoolMatrix>& mask) const {
  const Index n = content.dim(0);
  if (anchors.dim(0) != n || dn_count > n) {
    throw AlignmentError("decode: " + std::to_string(anchors.dim(0)) + " anchors, " + std::to_string(n) +
                         " content rows, " + std::to_string(dn_count) + " denoising queries");
  }
  std::optional<Tensor> bias;
  if (mask) {
    if (mask->rows() != n || mask->cols() != n) {
      throw AlignmentError("decode: attention mask is " + std::to_string(mask->rows()) + "x" +
                           std::to_string(mask->cols()) + " for " + std::to_string(n) + " queries");
    }
    bias = attention_bias(*mask);
  }
  const double eps = cfg_.inverse_sigmoid_eps;
  ModelOutput out;
  out.initial_anchors = anchors.mat().bottomRows(n - dn_count);
  Tensor x = content;
  Tensor prev = anchors;  // b'_{i-1}
  for (Index i = 0; i < cfg_.dec_layers; ++i) {
    const DecoderLayer& layer = decoder_[static_cast<std::size_t>(i)];
    // The first layer reads the initial anchors as given; later layers read
    // the detached refinement of the layer before.
    const Tensor ref = i == 0 ? prev : detach(prev);
    const Tensor pos = ref_point_head_(sine_embedding(ref, cfg_.hidden_dim / 2, cfg_.pe_temperature));
    x = layer.self_attention(x, pos, bias);
    out.self_attention_outputs.push_back(x.mat().bottomRows(n - dn_count));
    x = layer.norm2(x + layer.cross_attn(x + pos, ref, ReferenceKind::Box, memory, f.shapes));
    x = layer.norm3(x + layer.ffn2(relu(layer.ffn1(x))));
    out.hidden.push_back(x);

    const Tensor delta = box_head(i)(x);
    const Tensor logits = class_head(i)(x);
    const Tensor refined = box_update(ref, delta, eps);
    const Tensor pred =
        cfg_.look_forward == LookForward::Twice && i > 0 ? box_update(prev, delta, eps) : refined;
    prev = refined;

    out.layers.push_back({slice(logits, 0, dn_count, n), slice(pred, 0, dn_count, n)});
    if (dn_count > 0) out.dn_layers.push_back({slice(logits, 0, 0, dn_count), slice(pred, 0, 0, dn_count)});
  }
  return out;
}

ModelOutput Detector::forward(const Tensor& image, const DnBatch* dn) const {
  const MultiScaleFeatures f = backbone(image);
  const Tensor memory = encode(f);
  QueryInit init = select_queries(f, memory);
  const Index k = init.content.dim(0);
  Tensor anchors = init.anchors, content = init.content;
  Index dn_count = 0;
  std::optional<BoolMatrix> mask;
  if (dn != nullptr && dn->dn_query_count() > 0) {
    if (dn->matching_count != k) {
      throw AlignmentError("forward: denoising batch built for " + std::to_string(dn->matching_count) +
                           " matching queries, model has " + std::to_string(k));
    }
    dn_count = dn->dn_query_count();
    anchors = concat({Tensor::from_matrix(dn->query_boxes()), anchors}, 0);
    const auto labels = dn->query_labels();
    content = concat({gather(label_embed_, labels), content}, 0);
    mask = dn->attention_mask;
  }
  ModelOutput out = decode(anchors, content, dn_count, memory, f, mask);
  if (init.selection) out.encoder = init.selection->selected;
  return out;
}

}  // namespace dino
