#pragma once

// Self-training loop: configuration, AdamW with two learning-rate groups,
// warmup + polynomial schedule, the per-step loss composition and binary
// checkpoints that restore a run bit for bit.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "edapseg/graph_adapter.hpp"
#include "edapseg/rng.hpp"
#include "edapseg/segmentation_model.hpp"
#include "edapseg/synthetic_benchmark.hpp"

namespace edapseg::train {

struct TrainConfig {
  // loss
  double gamma = 0.1;
  double beta = 0.1;
  // averaging
  double alpha_teacher = 0.999;
  double alpha_mem = 0.99;
  // attention
  std::string attention = "euler_margin";  // or "plain"
  std::string sort_mode = "soft";
  double tau_sort = 0.1;
  int heads = 2;
  int attention_blocks = 2;
  int dim = 32;
  // graph
  int k = 8;
  int sinkhorn_iters = 20;
  double dropout = 0.1;
  double prototype_noise = 0.1;
  int graph_heads = 1;
  int graph_stride = 1;
  bool match_all_kinds = true;
  // self-training
  double pseudo_threshold = 0.6;
  double rcs_temperature = 0.01;
  bool rare_class_sampling = true;
  // optimisation
  double lr = 6e-5;
  double decoder_lr_mult = 10.0;
  double weight_decay = 0.01;
  int warmup_steps = 75;
  int total_steps = 2000;
  int crop_size = 32;
  int batch_size = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys, repeated
/// keys and malformed values are rejected with the line number.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
/// Canonical text with every key, one per line, in declaration order.
std::string to_text(const TrainConfig& cfg);
/// 64-bit FNV-1a of the canonical text, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);
/// Keys whose values differ between the two configurations.
std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b);

seg::ModelConfig model_config(const TrainConfig& cfg, int num_base);
gma::AdapterConfig adapter_config(const TrainConfig& cfg, int num_base);

/// Linear warmup from 0 to `base`, then base * (1 - progress)^0.9.
double lr_schedule(long step, long warmup, long total, double base);

/// seg + mixup + gamma * graph.
ad::Var total_loss(const ad::Var& seg, const ad::Var& mixup, const ad::Var& graph, double gamma);

/// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  struct Group {
    std::vector<ad::Var> params;
    double lr_mult = 1.0;
  };

  AdamW() = default;
  AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01);

  void step(double lr);
  void zero_grad();

  long t() const { return t_; }
  const std::vector<Group>& groups() const { return groups_; }
  /// Moments in parameter order, m then v.
  std::vector<double> state() const;
  void set_state(long t, const std::vector<double>& flat);

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.01;
  long t_ = 0;
};

struct Batch {
  std::vector<bench::ImageTensor> images;
  std::vector<bench::LabelMap> labels;  // empty for target batches
};

struct StepMetrics {
  long step = 0;
  double lr = 0.0;
  double seg = 0.0;
  double mixup = 0.0;
  double graph_match = 0.0;
  double graph_edge = 0.0;
  double graph_unknown = 0.0;
  double graph = 0.0;
  double total = 0.0;
  bool skipped = false;

  bool operator==(const StepMetrics&) const = default;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

struct TrainState {
  seg::SegModel student;
  seg::SegModel teacher;
  gma::GraphAdapter adapter;
  AdamW optimizer;
  long step = 0;
  Rng rng;
  int consecutive_skips = 0;
};

/// Fresh state: model and adapter initialised from the config seed.
TrainState init_state(const TrainConfig& cfg, int num_base);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimisation step. A non-finite loss leaves the state unchanged apart
/// from the skip counter and returns metrics with `skipped` set; ten skips in
/// a row throw NonFiniteLoss.
StepMetrics train_step(TrainState& state, const Batch& source, const Batch& target,
                       const TrainConfig& cfg);

/// Graph matrices for one batch without training: no dropout, no memory
/// updates, no parameter changes.
gma::AdapterOutput graph_snapshot(TrainState& state, const Batch& source, const Batch& target,
                                  const TrainConfig& cfg);

/// Binds a training state to its source and target training splits and draws
/// batches: rare-class weighted source images, uniform target images, random
/// crops.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const bench::Dataset& source, const bench::Dataset& target);

  StepMetrics step();
  /// Runs until `total_steps`, optionally appending rows to a CSV log and
  /// calling `on_step` after each step.
  void run(const std::optional<std::filesystem::path>& log_path = std::nullopt,
           const std::function<void(const StepMetrics&)>& on_step = {});

  std::pair<Batch, Batch> next_batches();

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const std::vector<double>& source_weights() const { return source_weights_; }

 private:
  TrainConfig cfg_;
  const bench::Dataset& source_;
  const bench::Dataset& target_;
  TrainState state_;
  std::vector<double> source_weights_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  TrainConfig config;
  std::string config_hash;
  long step = 0;
  int num_base = 0;
  std::vector<std::string> class_names;
};

void save_checkpoint(const TrainState& state, const TrainConfig& cfg,
                     const std::vector<std::string>& class_names, const std::filesystem::path& path);
/// Restores into `state`, which must have been built from `expected`;
/// a different config hash is rejected with both hashes and the divergent keys.
CheckpointInfo load_checkpoint(TrainState& state, const TrainConfig& expected,
                               const std::filesystem::path& path);
/// Reads the header only.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
/// Builds a state from the config stored in the checkpoint and restores it.
std::pair<TrainState, CheckpointInfo> load_checkpoint(const std::filesystem::path& path);

/// Nearest-neighbour downsampling of an h x w label grid by `factor`, taking
/// the centre-most pixel of each cell.
std::vector<int> downsample_labels(std::span<const int> labels, int height, int width, int factor);

}  // namespace edapseg::train
