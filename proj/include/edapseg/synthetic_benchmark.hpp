#pragma once

// Procedural two-domain open-set segmentation benchmark.
//
// The source domain renders perspective street scenes; the target domain
// renders the same classes with a longitude-dependent vertical warp, a
// weather-style colour shift and one extra target-private class that is
// labelled with the unknown id.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "edapseg/rng.hpp"

namespace edapseg::bench {

inline constexpr int kIgnoreId = 255;

enum class Domain { source, target };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // H x W x 3, interleaved RGB in [0, 1]

  ImageTensor() = default;
  ImageTensor(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

struct LabelMap {
  int height = 0;
  int width = 0;
  int num_base = 0;
  std::vector<std::uint8_t> data;  // H x W class ids

  LabelMap() = default;
  LabelMap(int h, int w, int base, std::uint8_t fill = kIgnoreId)
      : height(h), width(w), num_base(base), data(static_cast<std::size_t>(h) * w, fill) {}

  int unknown_id() const { return num_base; }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

enum class ShapeKind { sky, ground, rectangle, disc, triangle, hexagon, bar };
enum class Privacy { shared, target_private, source_private };

struct ClassStyle {
  std::string name;
  ShapeKind shape = ShapeKind::rectangle;
  std::array<double, 3> color{};
  Privacy privacy = Privacy::shared;
  int min_instances = 0;
  int max_instances = 0;
};

struct StyleShift {
  double brightness = 0.0;  // additive offset
  double fog = 0.0;         // blend weight toward white
  double hue_degrees = 0.0; // rotation about the grey axis
};

struct DomainSpec {
  Domain domain = Domain::source;
  std::vector<ClassStyle> palette;
  double warp_amplitude = 0.0;  // fraction of image height, in [0, 0.25]
  StyleShift style;
  bool private_enabled = true;
  double noise_std = 0.02;

  /// Number of shared (base) classes; their ids follow palette order.
  int num_base() const;
  /// Names of base classes followed by "unknown".
  std::vector<std::string> class_names() const;
  void validate() const;
};

/// Five base classes (road, sky, building, car, vegetation), a
/// target-private obstacle and a source-private pole.
std::vector<ClassStyle> default_palette();
DomainSpec source_spec();
DomainSpec target_spec();

nlohmann::json to_json(const DomainSpec& spec);
DomainSpec spec_from_json(const nlohmann::json& j);

struct Scene {
  ImageTensor image;
  LabelMap label;
};

Scene generate_scene(std::uint64_t seed, const DomainSpec& spec, int height, int width);

Scene panoramic_warp(const ImageTensor& img, const LabelMap& lbl, double amplitude);

struct CropOffset {
  int y = 0;
  int x = 0;
};

CropOffset crop_offset(int height, int width, int crop_h, int crop_w, Rng& rng);
Scene crop(const ImageTensor& img, const LabelMap& lbl, CropOffset at, int crop_h, int crop_w);
Scene random_crop(const ImageTensor& img, const LabelMap& lbl, int crop_h, int crop_w,
                  std::uint64_t seed);
Scene random_crop(const ImageTensor& img, const LabelMap& lbl, int crop_h, int crop_w, Rng& rng);

/// Rounds every channel to the nearest 8-bit level, as stored on disk.
ImageTensor quantize(const ImageTensor& img);

struct DatasetMeta {
  std::vector<std::string> class_names;
  int num_base = 0;
  int unknown_id = 0;
  int ignore_id = kIgnoreId;
  nlohmann::json spec;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<ImageTensor> images;
  std::vector<LabelMap> labels;

  std::size_t size() const { return images.size(); }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generates `count` quantised scenes; scene i uses derive_seed(seed, i).
Dataset make_split(const DomainSpec& spec, int count, std::uint64_t seed, int height, int width);

/// Writes root/split/{images,labels}/NNNNN.png and root/split/meta.json.
/// Each file is written to a temporary name and renamed into place.
void write_dataset(const std::filesystem::path& root, const std::string& split,
                   const Dataset& ds);

Dataset load_dataset(const std::filesystem::path& root, const std::string& split,
                     std::optional<int> expected_num_base = std::nullopt,
                     std::optional<int> expected_count = std::nullopt);

/// Throws DatasetError listing every id outside {0..C_b, 255}.
void validate_label_ids(const LabelMap& lbl, const std::string& where);

// 8-bit PNG helpers.
void write_png_rgb(const std::filesystem::path& path, const ImageTensor& img);
void write_png_gray(const std::filesystem::path& path, const LabelMap& lbl);
ImageTensor read_png_rgb(const std::filesystem::path& path);
LabelMap read_png_gray(const std::filesystem::path& path, int num_base);

}  // namespace edapseg::bench
