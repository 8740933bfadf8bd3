#include "dino/data.hpp"

#include "dino/errors.hpp"
#include "dino/json_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>

namespace dino {

Image Image::filled(Index height, Index width, double value) {
  return {height, width, Buffer::Constant(height * width * 3, value)};
}

ShapeKind shape_of(Index label) {
  if (label < 0 || label >= kSyntheticClassLimit) {
    throw ConfigError("synthetic data supports at most " + std::to_string(kSyntheticClassLimit) + " classes");
  }
  return static_cast<ShapeKind>(label);
}

bool shape_covers(ShapeKind kind, const Box& box, double x, double y) {
  const double u = (x - box.cx) / (box.w / 2), v = (y - box.cy) / (box.h / 2);
  if (std::abs(u) > 1 || std::abs(v) > 1) return false;
  switch (kind) {
    case ShapeKind::Rectangle:
      return true;
    case ShapeKind::Ellipse:
      return u * u + v * v <= 1;
    case ShapeKind::Triangle:  // apex at the top edge, base along the bottom edge
      return std::abs(u) <= (v + 1) / 2;
    case ShapeKind::Cross:
      return std::abs(u) <= 1.0 / 3 || std::abs(v) <= 1.0 / 3;
  }
  return false;
}

void render_object(Image& image, const ObjectSpec& object) {
  const ShapeKind kind = shape_of(object.label);
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(image.width);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(image.height);
      if (!shape_covers(kind, object.box, px, py)) continue;
      for (Index c = 0; c < 3; ++c) image.at(y, x, c) = object.color[c];
    }
}

namespace {

enum : std::uint64_t { kObjectsStream = 1, kPixelsStream = 2 };

const Eigen::Vector3d kPalette[kSyntheticClassLimit] = {
    {0.9, 0.2, 0.2}, {0.2, 0.8, 0.3}, {0.25, 0.35, 0.95}, {0.95, 0.85, 0.2}};

double overlap_of_smaller(const Box& a, const Box& b) {
  const BoxCorners p = to_xyxy(a), q = to_xyxy(b);
  const double iw = std::max(0.0, std::min(p.x1, q.x1) - std::max(p.x0, q.x0));
  const double ih = std::max(0.0, std::min(p.y1, q.y1) - std::max(p.y0, q.y0));
  return iw * ih / std::min(a.w * a.h, b.w * b.h);
}

}  // namespace

std::vector<ObjectSpec> synthetic_objects(const SyntheticConfig& cfg, Index index) {
  Rng rng = derive_rng(cfg.seed, {kObjectsStream, static_cast<std::uint64_t>(index)});
  const Index wanted = 1 + static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(cfg.max_objects)));
  std::vector<ObjectSpec> objects;
  for (Index i = 0; i < wanted; ++i) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      // Side lengths per bucket keep area buckets disjoint: small < 0.15^2,
      // medium < 0.35^2, large above.
      const double bucket = uniform01(rng);
      const double side = bucket < 0.4 ? uniform(rng, 0.07, 0.14)
                          : bucket < 0.8 ? uniform(rng, 0.16, 0.33)
                                         : uniform(rng, 0.36, 0.55);
      const double aspect = std::exp(uniform(rng, std::log(0.75), std::log(1.0 / 0.75)));
      const double w = side * aspect, h = side / aspect;
      const Box box{uniform(rng, w / 2, 1 - w / 2), uniform(rng, h / 2, 1 - h / 2), w, h};
      const Index label = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(cfg.num_classes)));
      Eigen::Vector3d color = kPalette[label];
      for (Index c = 0; c < 3; ++c) color[c] = std::clamp(color[c] + uniform(rng, -0.1, 0.1), 0.0, 1.0);
      const bool clear = std::none_of(objects.begin(), objects.end(), [&](const ObjectSpec& o) {
        return overlap_of_smaller(o.box, box) > 0.3;
      });
      if (!clear) continue;
      objects.push_back({label, box, color});
      break;
    }
  }
  return objects;
}

Dataset gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_classes > kSyntheticClassLimit) {
    throw ConfigError("synthetic data: num_classes must lie in [1, " + std::to_string(kSyntheticClassLimit) + "]");
  }
  if (cfg.image_size < 1 || cfg.count < 0 || cfg.max_objects < 1) {
    throw ConfigError("synthetic data: image_size and max_objects must be positive and count non-negative");
  }
  Dataset data;
  for (Index c = 0; c < cfg.num_classes; ++c) {
    data.category_ids.push_back(c + 1);
    static const char* names[] = {"rectangle", "ellipse", "triangle", "cross"};
    data.category_names.emplace_back(names[c]);
  }
  for (Index i = 0; i < cfg.count; ++i) {
    Rng rng = derive_rng(cfg.seed, {kPixelsStream, static_cast<std::uint64_t>(i)});
    Sample s;
    s.id = i + 1;
    s.source_width = s.source_height = cfg.image_size;
    const double base = uniform(rng, 0.3, 0.6);
    s.image = Image::filled(cfg.image_size, cfg.image_size, 0.0);
    for (Index k = 0; k < s.image.pixels.size(); ++k)
      s.image.pixels[k] = std::clamp(base + uniform(rng, -0.08, 0.08), 0.0, 1.0);
    for (const ObjectSpec& o : synthetic_objects(cfg, i)) {
      render_object(s.image, o);
      s.targets.boxes.push_back(o.box);
      s.targets.labels.push_back(o.label);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

namespace {

cv::Mat to_mat(const Image& image) {
  cv::Mat m(static_cast<int>(image.height), static_cast<int>(image.width), CV_64FC3);
  std::copy(image.pixels.data(), image.pixels.data() + image.pixels.size(), m.ptr<double>());
  return m;
}

Image from_mat(const cv::Mat& m) {
  Image out{m.rows, m.cols, Buffer(static_cast<Index>(m.rows) * m.cols * 3)};
  const cv::Mat c = m.isContinuous() ? m : m.clone();
  std::copy(c.ptr<double>(), c.ptr<double>() + out.pixels.size(), out.pixels.data());
  return out;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb, f;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(f, CV_64FC3, 1.0 / 255.0);
  return from_mat(f);
}

void write_image(const std::filesystem::path& path, const Image& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  cv::Mat bytes, bgr;
  to_mat(image).convertTo(bytes, CV_8UC3, 255.0);
  cv::cvtColor(bytes, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

Image resize(const Image& image, Index height, Index width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
             cv::INTER_LINEAR);
  return from_mat(out);
}

namespace {

[[noreturn]] void schema_error(const std::filesystem::path& file, const std::string& what) {
  throw IoError(file.string() + ": " + what);
}

}  // namespace

Dataset load_coco_json(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                       Index limit, Index image_size) {
  const nlohmann::json doc = read_json_file(annotation_file);
  if (!doc.is_object()) schema_error(annotation_file, "expected a JSON object");
  Dataset data;
  try {
    std::map<std::int64_t, std::string> names;
    if (doc.contains("categories"))
      for (const auto& c : doc.at("categories")) names[c.at("id").get<std::int64_t>()] = c.value("name", "");
    std::map<std::int64_t, Index> label_of;
    for (const auto& [id, name] : names) {
      label_of[id] = static_cast<Index>(data.category_ids.size());
      data.category_ids.push_back(id);
      data.category_names.push_back(name);
    }

    struct Entry {
      std::string file;
      double width, height;
      Targets targets;
    };
    std::map<std::int64_t, Entry> images;
    if (doc.contains("images"))
      for (const auto& im : doc.at("images")) {
        Entry e{im.at("file_name").get<std::string>(), im.at("width").get<double>(), im.at("height").get<double>(), {}};
        if (!(e.width > 0 && e.height > 0)) schema_error(annotation_file, "image with non-positive size");
        images[im.at("id").get<std::int64_t>()] = std::move(e);
      }
    if (doc.contains("annotations"))
      for (const auto& a : doc.at("annotations")) {
        if (a.value("iscrowd", 0) != 0) continue;
        const auto it = images.find(a.at("image_id").get<std::int64_t>());
        if (it == images.end()) continue;
        const auto cat = label_of.find(a.at("category_id").get<std::int64_t>());
        if (cat == label_of.end()) schema_error(annotation_file, "annotation with unknown category_id");
        const auto& bb = a.at("bbox");
        if (!bb.is_array() || bb.size() != 4) schema_error(annotation_file, "bbox must have 4 numbers");
        const double W = it->second.width, H = it->second.height;
        const double x0 = std::clamp(bb[0].get<double>(), 0.0, W), y0 = std::clamp(bb[1].get<double>(), 0.0, H);
        const double x1 = std::clamp(bb[0].get<double>() + bb[2].get<double>(), 0.0, W);
        const double y1 = std::clamp(bb[1].get<double>() + bb[3].get<double>(), 0.0, H);
        if (!(x1 > x0 && y1 > y0)) continue;
        it->second.targets.boxes.push_back({(x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H});
        it->second.targets.labels.push_back(cat->second);
      }

    for (auto& [id, e] : images) {
      if (limit >= 0 && static_cast<Index>(data.samples.size() + data.missing_images.size()) >= limit) break;
      const auto path = image_dir / e.file;
      if (!std::filesystem::exists(path)) {
        std::cerr << "warning: image " << path.string() << " not found, skipping\n";
        data.missing_images.push_back(path.string());
        continue;
      }
      Sample s;
      s.id = id;
      s.image = resize(read_image(path), image_size, image_size);
      s.targets = std::move(e.targets);
      s.source_width = static_cast<Index>(e.width);
      s.source_height = static_cast<Index>(e.height);
      data.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& ex) {
    schema_error(annotation_file, ex.what());
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  nlohmann::json doc;
  doc["images"] = nlohmann::json::array();
  doc["annotations"] = nlohmann::json::array();
  doc["categories"] = nlohmann::json::array();
  for (std::size_t c = 0; c < data.category_ids.size(); ++c)
    doc["categories"].push_back({{"id", data.category_ids[c]}, {"name", data.category_names[c]}});
  std::int64_t ann_id = 1;
  for (const Sample& s : data.samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(s.id));
    write_image(dir / "images" / name, s.image);
    const double W = static_cast<double>(s.image.width), H = static_cast<double>(s.image.height);
    doc["images"].push_back({{"id", s.id}, {"file_name", name}, {"width", s.image.width}, {"height", s.image.height}});
    for (Index k = 0; k < s.targets.size(); ++k) {
      const Box& b = s.targets.boxes[static_cast<std::size_t>(k)];
      const double bw = b.w * W, bh = b.h * H;
      doc["annotations"].push_back(
          {{"id", ann_id++},
           {"image_id", s.id},
           {"category_id", data.category_ids[static_cast<std::size_t>(s.targets.labels[static_cast<std::size_t>(k)])]},
           {"bbox", {b.cx * W - bw / 2, b.cy * H - bh / 2, bw, bh}},
           {"area", bw * bh},
           {"iscrowd", 0}});
    }
  }
  write_file_atomic(dir / "annotations.json", doc.dump(1) + "\n");
}

Dataset load_dataset_dir(const std::filesystem::path& dir, Index image_size, Index limit) {
  return load_coco_json(dir / "annotations.json", dir / "images", limit, image_size);
}

Sample augment(const Sample& sample, bool hflip, double scale_min, Rng& rng) {
  Sample out = sample;
  const bool flip = hflip && bernoulli(rng, 0.5);
  const double factor = scale_min < 1.0 ? uniform(rng, scale_min, 1.0) : 1.0;
  if (flip) {
    const Image& src = sample.image;
    for (Index y = 0; y < src.height; ++y)
      for (Index x = 0; x < src.width; ++x)
        for (Index c = 0; c < 3; ++c) out.image.at(y, x, c) = src.at(y, src.width - 1 - x, c);
    for (Box& b : out.targets.boxes) b.cx = 1.0 - b.cx;
  }
  if (factor < 1.0) {
    const Index H = out.image.height, W = out.image.width;
    const Index h = std::max<Index>(1, static_cast<Index>(std::lround(factor * static_cast<double>(H))));
    const Index w = std::max<Index>(1, static_cast<Index>(std::lround(factor * static_cast<double>(W))));
    const Image small = resize(out.image, h, w);
    const Index oy = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(H - h + 1)));
    const Index ox = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(W - w + 1)));
    Image canvas = Image::filled(H, W, 0.0);
    const Eigen::Vector3d mean = out.image.pixels.reshaped(3, H * W).rowwise().mean();
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        for (Index c = 0; c < 3; ++c) canvas.at(y, x, c) = mean[c];
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index c = 0; c < 3; ++c) canvas.at(oy + y, ox + x, c) = small.at(y, x, c);
    const double sx = static_cast<double>(w) / static_cast<double>(W), sy = static_cast<double>(h) / static_cast<double>(H);
    for (Box& b : out.targets.boxes) {
      b.cx = (static_cast<double>(ox) + b.cx * static_cast<double>(w)) / static_cast<double>(W);
      b.cy = (static_cast<double>(oy) + b.cy * static_cast<double>(h)) / static_cast<double>(H);
      b.w *= sx;
      b.h *= sy;
    }
    out.image = std::move(canvas);
  }
  return out;
}

}  // namespace dino
