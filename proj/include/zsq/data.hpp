#pragma once
// Synthetic "shapes" detection dataset and its on-disk format.
//
// Layout of a dataset directory:
//   images/NNNNN.ppm   binary P6, 8-bit RGB
//   labels/NNNNN.txt   one "class cx cy w h" line per object, relative units
//   manifest.json      class names, histograms, split, source
// The first 80% of indices form the training split, the rest validation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zsq/detector.hpp"
#include "zsq/tensor.hpp"

namespace zsq {

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved RGB
};

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross, kRing, kDiamond };
inline constexpr int kNumShapeKinds = 6;
const char* shape_name(ShapeKind kind);

struct DatasetSpec {
  std::size_t num_images = 5000;
  std::size_t image_size = 64;
  int num_classes = 6;
  std::vector<double> class_weights;  // empty: long-tailed default 0.7^k, normalized
  std::size_t max_objects = 6;
  double objects_p = 0.45;            // truncated geometric parameter
  double min_size = 0.18, max_size = 0.42;  // object extent relative to the image
  double max_rotation_deg = 15.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  std::vector<double> weights() const;
  void validate() const;
};

// Geometry of one rendered object in pixel units. Pixel (i, j) covers
// [j, j+1) x [i, i+1); it belongs to the shape when its center does.
struct ShapeInstance {
  ShapeKind kind = ShapeKind::kCircle;
  double cx = 0, cy = 0;   // pixels
  double radius = 0;       // half extent before rotation
  double angle = 0;        // radians
  std::uint8_t color[3] = {255, 255, 255};

  bool contains(double x, double y) const;
  // Analytic axis-aligned bounds in pixels: x1, y1, x2, y2.
  std::array<double, 4> bounds() const;
};

struct Manifest {
  std::string source = "real";  // real | adaptive | tile | multisample | gaussian
  std::size_t image_size = 64;
  int num_classes = 6;
  std::vector<std::string> class_names;
  std::vector<double> class_weights;
  std::size_t num_images = 0;
  std::size_t train_count = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> class_histogram;        // objects per class
  std::vector<std::size_t> label_count_histogram;  // [k] = images with k labels
  std::vector<std::size_t> labels_per_image;
};

struct Dataset {
  Manifest manifest;
  std::vector<Image> images;
  std::vector<std::vector<BoxLabel>> labels;  // batch_index unused on disk

  std::size_t size() const { return images.size(); }
  // Index ranges of the fixed split.
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> val_indices() const;
};

// Renders one image and its labels; depends only on (spec.seed, index).
struct RenderedImage {
  Image image;
  std::vector<BoxLabel> labels;
  std::vector<ShapeInstance> shapes;
};
RenderedImage render_image(const DatasetSpec& spec, std::size_t index);

Dataset generate_dataset(const DatasetSpec& spec);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_image(const Image& image, const std::filesystem::path& path);
Image load_image(const std::filesystem::path& path);
Image parse_ppm(const std::string& bytes, const std::string& origin);

std::string format_labels(const std::vector<BoxLabel>& labels);
std::vector<BoxLabel> parse_labels(const std::string& text, const std::string& origin, int num_classes);

Manifest build_manifest(const std::vector<std::vector<BoxLabel>>& labels, std::size_t image_size,
                        int num_classes, double train_fraction);

// Stacks images into [N, 3, S, S] floats in [0, 1]; labels get batch indices.
Tensor images_to_tensor(const std::vector<const Image*>& images);
Image tensor_to_image(const Tensor& batch, std::size_t index);
std::vector<BoxLabel> batch_labels(const std::vector<const std::vector<BoxLabel>*>& per_image);

// Mirrors an image and its labels left to right.
void hflip(Image& image, std::vector<BoxLabel>& labels);

}  // namespace zsq
