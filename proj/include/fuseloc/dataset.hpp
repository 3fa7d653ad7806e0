#pragma once

// On-disk datasets: index.json plus PCB1 point clouds and PPM images, the
// synthetic generator, augmentation and the geographic split.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fuseloc/image.hpp"
#include "fuseloc/metric.hpp"
#include "fuseloc/sparse.hpp"

namespace fuseloc {

struct Element {
  std::string id;
  Position position;
  std::string cloud;                        // relative to the dataset root
  std::string image;                        // variant 0
  std::vector<std::string> image_variants;  // extra renders sampled during training
  int traversal = -1;                       // -1 when unknown
};

struct Dataset {
  std::string root;
  std::vector<Element> elements;
  std::vector<PointCloud> clouds;           // parallel to elements
  std::vector<std::vector<Image>> images;   // [0] is the primary image

  std::size_t size() const { return elements.size(); }
  std::vector<Position> positions() const;
  /// Copy restricted to the given element indices, in that order.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Elements whose traversal is listed.
  Dataset traversals(const std::vector<int>& which) const;
  int max_traversal() const;
};

// PCB1: "PCB1", u32 N, N x 3 f32, little-endian.
std::string encode_pcb1(const PointCloud& cloud);
PointCloud decode_pcb1(const std::string& bytes);
void write_pcb1(const std::string& path, const PointCloud& cloud);
PointCloud read_pcb1(const std::string& path);

std::vector<Element> read_index(const std::string& root);
void write_index(const std::string& root, const std::vector<Element>& elements);

/// Reads index.json and every referenced file; validates the element invariants.
Dataset load_dataset(const std::string& root);

struct SyntheticConfig {
  std::uint64_t seed = 0;
  int places = 40;
  int traversals = 4;
  double spacing_m = 100.0;
  std::size_t points = 4096;
  std::size_t image_width = 64;
  std::size_t image_height = 64;
  int image_variants = 2;  // extra renders per element besides the primary image
  bool spurious_rgb = false;
  // Leading traversals that carry the watermark; -1 means traversals - 2 (at least 1).
  int spurious_traversals = -1;

  void validate() const;
  int watermarked_traversals() const;
};

struct SyntheticReport {
  std::size_t elements = 0;
  bool spurious = false;
  int watermarked_traversals = 0;
  double train_watermark_diff = 0.0;  // mean abs pixel change in the code band, watermarked images
  double val_watermark_diff = 0.0;    // same for the clean traversals; 0 when clean
  bool self_check_passed = true;
  std::string summary() const;
};

SyntheticReport generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir);

struct AugmentationConfig {
  double jitter_sigma = 0.002;
  double point_drop_prob = 0.1;
  double cuboid_erase_prob = 0.4;
  double cuboid_min_size = 0.1;  // cuboid side lengths, in [-1,1]^3 units
  double cuboid_max_size = 0.5;
  double image_erase_prob = 0.5;
  double erase_min_area = 0.02;  // fraction of the image
  double erase_max_area = 0.25;
  double crop_fraction = 0.875;  // 1 disables cropping
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;

  void validate() const;
  static AugmentationConfig none();
};

PointCloud augment_cloud(const PointCloud& cloud, const AugmentationConfig& cfg, std::mt19937_64& rng);
Image augment_image(const Image& image, const AugmentationConfig& cfg, std::mt19937_64& rng);

struct Rect {
  double min_easting = 0.0, min_northing = 0.0, max_easting = 0.0, max_northing = 0.0;

  bool contains(const Position& p) const;  // closed
  void validate() const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Elements inside the closed rectangle go to test, the rest to train.
/// With require_both, an empty side is an error.
Split utm_split(const std::vector<Element>& elements, const Rect& test_region, bool require_both = false);

/// Connected components under the "within radius" relation; each component
/// sorted, components ordered by first member.
std::vector<std::vector<std::size_t>> cluster_places(const std::vector<Position>& positions, double radius = 10.0);

}  // namespace fuseloc
