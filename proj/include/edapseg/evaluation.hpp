#pragma once

// Open-set segmentation metrics: confusion counts, per-class IoU, the mean
// over common classes, the IoU of the merged unknown class and their
// harmonic mean.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "edapseg/segmentation_model.hpp"
#include "edapseg/synthetic_benchmark.hpp"
#include "json.hpp"

namespace edapseg::eval {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return n_; }
  long at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  long total() const;
  void add(int gt, int pred, long count = 1);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_;
  std::vector<long> counts_;
};

/// Counts (gt, pred) pairs over pixels whose ground truth is not `ignore_id`.
ConfusionMatrix accumulate_confusion(std::span<const int> pred, std::span<const int> gt,
                                     int num_classes, int ignore_id = bench::kIgnoreId);
ConfusionMatrix accumulate_confusion(const bench::LabelMap& pred, const bench::LabelMap& gt);

/// Harmonic mean; 0 when either side is 0.
double h_score(double common, double priv);

struct MetricsReport {
  std::vector<std::string> class_names;  // base classes then unknown
  std::vector<double> iou;               // percent per class
  std::vector<bool> present;             // TP + FP + FN > 0
  double common = 0.0;
  double private_iou = 0.0;
  double h_score = 0.0;
  bool common_undefined = false;  // every base class was absent
  long pixels = 0;
  long step = 0;
  std::string config_hash;

  std::vector<std::string> excluded_classes() const;
};

/// The last class is the unknown class.
MetricsReport compute_metrics(const ConfusionMatrix& cm, std::vector<std::string> class_names);

nlohmann::json to_json(const MetricsReport& r);
std::string to_csv(const MetricsReport& r);
/// Writes report.json and report.csv into `dir`.
void write_report(const MetricsReport& r, const std::filesystem::path& dir);

/// Full-resolution argmax label map.
bench::LabelMap predict(const seg::SegModel& model, const bench::ImageTensor& image);

/// Single pass over `data` with `model`; never mutates either.
MetricsReport evaluate(const seg::SegModel& model, const bench::Dataset& data, long step = 0,
                       const std::string& config_hash = "");

/// Scores precomputed predictions against `data`.
MetricsReport evaluate_predictions(const std::vector<bench::LabelMap>& predictions,
                                   const bench::Dataset& data);

}  // namespace edapseg::eval
