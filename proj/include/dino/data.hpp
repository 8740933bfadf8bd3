#pragma once

// Datasets: a seeded synthetic shapes generator, COCO-format ingestion, and
// the training-time augmentations.

#include "dino/matching.hpp"
#include "dino/random.hpp"
#include "dino/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dino {

/// Row-major H x W x 3 image with values in [0, 1].
struct Image {
  Index height = 0, width = 0;
  Buffer pixels;

  static Image filled(Index height, Index width, double value);
  double& at(Index y, Index x, Index c) { return pixels[(y * width + x) * 3 + c]; }
  double at(Index y, Index x, Index c) const { return pixels[(y * width + x) * 3 + c]; }
  Tensor tensor() const { return Tensor::from_buffer({height, width, 3}, pixels); }
};

struct Sample {
  std::int64_t id = 0;
  Image image;
  Targets targets;
  /// Size of the source image, used to report boxes in absolute pixels.
  Index source_width = 0, source_height = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  /// Contiguous label i corresponds to category_ids[i] in files.
  std::vector<std::int64_t> category_ids;
  std::vector<std::string> category_names;
  std::vector<std::string> missing_images;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Synthetic object classes are shape types, each drawn in its own colour family.
enum class ShapeKind { Rectangle, Ellipse, Triangle, Cross };
constexpr Index kSyntheticClassLimit = 4;

ShapeKind shape_of(Index label);
/// Whether the normalized point (x, y) lies inside the shape spanning `box`.
bool shape_covers(ShapeKind kind, const Box& box, double x, double y);

struct ObjectSpec {
  Index label = 0;
  Box box;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

/// Paints every pixel whose center lies inside the object's shape.
void render_object(Image& image, const ObjectSpec& object);

struct SyntheticConfig {
  Index count = 500;
  Index image_size = 64;
  Index num_classes = 2;
  Index max_objects = 8;
  std::uint64_t seed = 0;
};

/// Objects are placed so that no two overlap by more than 30% of the
/// smaller one. Sizes come from three buckets so small, medium and large
/// objects all occur.
Dataset gen_synthetic(const SyntheticConfig& cfg);
/// The objects gen_synthetic draws for image `index`, in painting order.
std::vector<ObjectSpec> synthetic_objects(const SyntheticConfig& cfg, Index index);

/// Reads COCO-style annotations. Images are resized to image_size squared;
/// crowd annotations are skipped; images are taken by ascending id, at most
/// `limit` of them (negative means all). Missing image files are skipped
/// and listed in missing_images.
Dataset load_coco_json(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                       Index limit, Index image_size);

/// Writes images/<id>.png and annotations.json under `dir`.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads a directory written by save_dataset.
Dataset load_dataset_dir(const std::filesystem::path& dir, Index image_size, Index limit = -1);

Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);
Image resize(const Image& image, Index height, Index width);

/// Random horizontal flip and scale jitter: the image shrinks by a factor in
/// [scale_min, 1] and is pasted at a random offset on a mean-coloured canvas.
Sample augment(const Sample& sample, bool hflip, double scale_min, Rng& rng);

}  // namespace dino
