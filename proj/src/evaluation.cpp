#include "edapseg/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace edapseg::eval {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 0) throw std::invalid_argument("ConfusionMatrix: negative class count");
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (long c : counts_) t += c;
  return t;
}

void ConfusionMatrix::add(int gt, int pred, long count) {
  if (gt < 0 || gt >= n_ || pred < 0 || pred >= n_)
    throw std::invalid_argument("ConfusionMatrix: id pair (" + std::to_string(gt) + ", " +
                                std::to_string(pred) + ") outside [0, " + std::to_string(n_) + ")");
  if (count < 0) throw std::invalid_argument("ConfusionMatrix: negative count");
  counts_[static_cast<std::size_t>(gt) * n_ + pred] += count;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix accumulate_confusion(std::span<const int> pred, std::span<const int> gt,
                                     int num_classes, int ignore_id) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("accumulate_confusion: " + std::to_string(pred.size()) +
                                " predictions for " + std::to_string(gt.size()) + " labels");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] != ignore_id) cm.add(gt[i], pred[i]);
  return cm;
}

ConfusionMatrix accumulate_confusion(const bench::LabelMap& pred, const bench::LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("accumulate_confusion: prediction " + std::to_string(pred.height) +
                                "x" + std::to_string(pred.width) + " vs label " +
                                std::to_string(gt.height) + "x" + std::to_string(gt.width));
  std::vector<int> p(pred.data.begin(), pred.data.end()), g(gt.data.begin(), gt.data.end());
  return accumulate_confusion(p, g, gt.num_base + 1, bench::kIgnoreId);
}

double h_score(double common, double priv) {
  if (common <= 0.0 || priv <= 0.0) return 0.0;
  return 2.0 * common * priv / (common + priv);
}

std::vector<std::string> MetricsReport::excluded_classes() const {
  std::vector<std::string> out;
  for (std::size_t c = 0; c + 1 < class_names.size(); ++c)
    if (!present[c]) out.push_back(class_names[c]);
  return out;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm, std::vector<std::string> class_names) {
  const int n = cm.num_classes();
  if (n < 2) throw std::invalid_argument("compute_metrics: need at least one base class and unknown");
  if (static_cast<int>(class_names.size()) != n)
    throw std::invalid_argument("compute_metrics: " + std::to_string(class_names.size()) +
                                " names for " + std::to_string(n) + " classes");
  MetricsReport r;
  r.class_names = std::move(class_names);
  r.iou.assign(n, 0.0);
  r.present.assign(n, false);
  r.pixels = cm.total();
  for (int c = 0; c < n; ++c) {
    long tp = cm.at(c, c), fp = 0, fn = 0;
    for (int k = 0; k < n; ++k) {
      if (k == c) continue;
      fp += cm.at(k, c);
      fn += cm.at(c, k);
    }
    const long denom = tp + fp + fn;
    r.present[c] = denom > 0;
    if (denom > 0) r.iou[c] = 100.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c + 1 < n; ++c)
    if (r.present[c]) {
      sum += r.iou[c];
      ++used;
    }
  r.common_undefined = used == 0;
  r.common = used ? sum / used : 0.0;
  r.private_iou = r.iou[n - 1];
  r.h_score = h_score(r.common, r.private_iou);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c + 1 < r.class_names.size(); ++c)
    per[r.class_names[c]] = r.present[c] ? nlohmann::json(r.iou[c]) : nlohmann::json(nullptr);
  return {{"per_class_iou", per},
          {"common", r.common},
          {"private", r.private_iou},
          {"h_score", r.h_score},
          {"pixels", r.pixels},
          {"step", r.step},
          {"config_hash", r.config_hash},
          {"common_undefined", r.common_undefined},
          {"excluded_classes", r.excluded_classes()}};
}

std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "name,value\n";
  for (std::size_t c = 0; c + 1 < r.class_names.size(); ++c) {
    os << "iou:" << r.class_names[c] << ",";
    if (r.present[c]) os << r.iou[c];
    os << "\n";
  }
  os << "common," << r.common << "\n";
  os << "private," << r.private_iou << "\n";
  os << "h_score," << r.h_score << "\n";
  os << "pixels," << r.pixels << "\n";
  os << "step," << r.step << "\n";
  os << "config_hash," << r.config_hash << "\n";
  return os.str();
}

void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream js(dir / "report.json");
  js << to_json(r).dump(2) << "\n";
  std::ofstream csv(dir / "report.csv");
  csv << to_csv(r);
  if (!js || !csv) throw std::runtime_error("cannot write report into " + dir.string());
}

namespace {

bench::LabelMap argmax_map(const ad::Var& logits, int num_base) {
  const int c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  bench::LabelMap out(h, w, num_base, 0);
  for (std::size_t q = 0; q < plane; ++q) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (logits.value()[k * plane + q] > logits.value()[best * plane + q]) best = k;
    out.data[q] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

bench::LabelMap predict(const seg::SegModel& model, const bench::ImageTensor& image) {
  auto logits = seg::SegModel::full_resolution(
      model.forward(seg::images_to_tensor(std::span<const bench::ImageTensor>(&image, 1))).logits);
  return argmax_map(logits, model.config().num_base);
}

MetricsReport evaluate(const seg::SegModel& model, const bench::Dataset& data, long step,
                       const std::string& config_hash) {
  if (data.meta.num_base != model.config().num_base)
    throw std::invalid_argument("evaluate: model has " + std::to_string(model.config().num_base) +
                                " base classes, dataset " + std::to_string(data.meta.num_base));
  seg::SegModel frozen = model.clone();
  frozen.set_requires_grad(false);
  ConfusionMatrix cm(data.meta.num_base + 1);
  for (std::size_t i = 0; i < data.size(); ++i)
    cm.merge(accumulate_confusion(predict(frozen, data.images[i]), data.labels[i]));
  MetricsReport r = compute_metrics(cm, data.meta.class_names);
  r.step = step;
  r.config_hash = config_hash;
  return r;
}

MetricsReport evaluate_predictions(const std::vector<bench::LabelMap>& predictions,
                                   const bench::Dataset& data) {
  if (predictions.size() != data.size())
    throw std::invalid_argument("evaluate_predictions: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(data.size()) + " images");
  ConfusionMatrix cm(data.meta.num_base + 1);
  for (std::size_t i = 0; i < data.size(); ++i)
    cm.merge(accumulate_confusion(predictions[i], data.labels[i]));
  return compute_metrics(cm, data.meta.class_names);
}

}  // namespace edapseg::eval
