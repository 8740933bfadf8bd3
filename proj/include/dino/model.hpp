#pragma once

// Desk-scale detector: strided conv backbone, deformable encoder, query
// selection, and a decoder that refines anchor boxes layer by layer while
// carrying the denoising queries alongside the matching queries.

#include "dino/box.hpp"
#include "dino/denoising.hpp"
#include "dino/matching.hpp"
#include "dino/random.hpp"
#include "dino/tensor.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dino {

enum class LookForward { Once, Twice };
enum class QuerySelection { Static, Pure, Mixed };

std::string to_string(LookForward m);
std::string to_string(QuerySelection m);
LookForward parse_look_forward(const std::string& s);
QuerySelection parse_query_selection(const std::string& s);

struct ModelConfig {
  Index image_size = 64;
  Index hidden_dim = 64;
  Index enc_layers = 2;
  Index dec_layers = 2;
  Index nheads = 8;
  Index num_queries = 20;
  Index enc_n_points = 4;
  Index dec_n_points = 4;
  Index num_levels = 2;
  Index dim_feedforward = 128;
  Index num_classes = 2;
  LookForward look_forward = LookForward::Twice;
  QuerySelection query_selection = QuerySelection::Mixed;
  /// One class head and one box head for every decoder layer.
  bool shared_heads = true;
  /// Stop gradients from the decoder into the selected encoder boxes.
  bool detach_selected_anchors = true;
  double pe_temperature = 20.0;
  double inverse_sigmoid_eps = 1e-3;

  /// Spatial stride of the finest feature level.
  static constexpr Index kBaseStride = 8;
  Index total_stride() const { return kBaseStride << (num_levels - 1); }
  void validate() const;
};

/// Named learnable tensors in registration order.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  Index numel() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gamma, beta;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

/// Stack of linear layers with relu between them.
struct Mlp {
  std::vector<Linear> layers;

  Tensor operator()(const Tensor& x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, out;
  Index heads = 1;

  /// `mask` is additive: 0 where attention is allowed, -inf where blocked.
  Tensor operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                    const std::optional<Tensor>& mask = std::nullopt) const;
};

/// Reference of each query: a point (encoder) or a box (decoder).
enum class ReferenceKind { Point, Box };

struct DeformableAttention {
  Linear value_proj, offsets, weights, out;
  Index heads = 1, levels = 1, points = 1;

  /// refs: [Q, 2] points or [Q, 4] cxcywh boxes. Point offsets are in pixels
  /// of each level; box offsets are in units of half the box size / points.
  Tensor operator()(const Tensor& query, const Tensor& refs, ReferenceKind kind, const Tensor& value_in,
                    const std::vector<LevelShape>& shapes) const;
};

struct EncoderLayer {
  DeformableAttention attn;
  LayerNorm norm1, norm2;
  Linear ffn1, ffn2;

  Tensor operator()(const Tensor& src, const Tensor& pos, const Tensor& refs,
                    const std::vector<LevelShape>& shapes) const;
};

struct DecoderLayer {
  MultiHeadAttention self_attn;
  DeformableAttention cross_attn;
  LayerNorm norm1, norm2, norm3;
  Linear ffn1, ffn2;

  /// Masked self-attention plus residual and norm.
  Tensor self_attention(const Tensor& content, const Tensor& pos, const std::optional<Tensor>& mask) const;
  Tensor operator()(const Tensor& content, const Tensor& pos, const Tensor& refs, const Tensor& memory,
                    const std::vector<LevelShape>& shapes, const std::optional<Tensor>& mask) const;
};

struct MultiScaleFeatures {
  std::vector<LevelShape> shapes;
  Tensor tokens;     // [sum H_l W_l, hidden_dim], levels concatenated fine to coarse
  Tensor pos;        // positional + level embedding, same shape
  RowMatrix points;  // [tokens, 2] normalized pixel centers

  Index size() const { return tokens.dim(0); }
};

/// What the encoder's selection head produced.
struct Selection {
  std::vector<Index> indices;  // chosen token per query, best first
  Predictions selected;        // head outputs at the chosen tokens (encoder loss input)
  Tensor all_logits;           // [tokens, classes]
  Tensor all_boxes;            // [tokens, 4]
  Tensor memory_features;      // transformed memory the head reads
};

struct QueryInit {
  Tensor anchors;  // b'_0 for matching queries [K, 4]
  Tensor content;  // [K, hidden_dim]
  std::optional<Selection> selection;
};

struct ModelOutput {
  std::vector<Predictions> layers;     // matching queries, one set per decoder layer
  std::vector<Predictions> dn_layers;  // denoising queries, one set per decoder layer
  std::optional<Predictions> encoder;  // selection head at the selected tokens
  RowMatrix initial_anchors;           // matching-query anchors fed to the first layer
  /// Matching-query content after each decoder self-attention block.
  std::vector<RowMatrix> self_attention_outputs;
  /// Decoder output of every query (denoising rows first) after each layer.
  std::vector<Tensor> hidden;

  const Predictions& final() const { return layers.back(); }
};

/// Sinusoidal encoding of each column of coords [N, k] into `feats` channels,
/// sin on even and cos on odd channels; returns [N, k * feats].
Tensor sine_embedding(const Tensor& coords, Index feats, double temperature);

class Detector {
 public:
  Detector(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  static bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

  /// image: [H, W, 3]. H and W must be divisible by the total stride.
  MultiScaleFeatures backbone(const Tensor& image) const;
  Tensor encode(const MultiScaleFeatures& f) const;
  QueryInit select_queries(const MultiScaleFeatures& f, const Tensor& memory) const;

  /// Runs the decoder over [dn; matching] queries. `mask` covers all queries.
  ModelOutput decode(const Tensor& anchors, const Tensor& content, Index dn_count, const Tensor& memory,
                     const MultiScaleFeatures& f, const std::optional<BoolMatrix>& mask) const;

  /// Full pipeline. Pass a denoising batch during training, nullptr otherwise.
  ModelOutput forward(const Tensor& image, const DnBatch* dn = nullptr) const;

  const DecoderLayer& decoder_layer(Index i) const { return decoder_[static_cast<std::size_t>(i)]; }
  const Mlp& box_head(Index layer) const;
  const Linear& class_head(Index layer) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;

  struct ConvBlock {
    Tensor weight, bias;
    Index kernel, stride, padding;
  };
  std::vector<ConvBlock> stem_;
  Linear level0_proj_;
  std::vector<ConvBlock> extra_levels_;
  std::vector<LayerNorm> level_norms_;
  Tensor level_embed_;
  std::vector<EncoderLayer> encoder_;
  Linear enc_output_;
  LayerNorm enc_output_norm_;
  Linear enc_class_;
  Mlp enc_box_;
  Linear pure_content_;
  Tensor query_content_;  // [num_queries, hidden_dim]
  Tensor anchor_logits_;  // [num_queries, 4], static selection only
  Tensor label_embed_;    // [num_classes, hidden_dim]
  Mlp ref_point_head_;
  std::vector<DecoderLayer> decoder_;
  std::vector<Linear> class_heads_;
  std::vector<Mlp> box_heads_;
};

/// Additive attention bias from a permission mask: 0 allowed, -inf blocked.
Tensor attention_bias(const BoolMatrix& allowed);

}  // namespace dino
