#pragma once

// Graph matching adapter: samples class nodes from pixel features of both
// domains, keeps per-class memory banks, fills in missing classes, refines
// the node set with self-attention and scores a soft source/target matching.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edapseg/autodiff.hpp"
#include "edapseg/rng.hpp"
#include "edapseg/synthetic_benchmark.hpp"

namespace edapseg::gma {

using bench::Domain;

enum class NodeKind { positive, negative, prototype, synthesized };

std::string to_string(NodeKind k);

struct NodeInfo {
  int class_id = 0;
  Domain domain = Domain::source;
  NodeKind kind = NodeKind::positive;

  bool operator==(const NodeInfo&) const = default;
};

/// Nodes of both domains. Features are kept per domain so that the joint
/// matrix always lists source nodes before target nodes.
class NodeSet {
 public:
  explicit NodeSet(int dim = 0) : dim_(dim) {}

  /// Appends `rows` ([m x d]) with one info entry per row.
  void append(const ad::Var& rows, std::vector<NodeInfo> info);

  int dim() const { return dim_; }
  int count(Domain d) const;
  int size() const { return count(Domain::source) + count(Domain::target); }
  bool empty() const { return size() == 0; }

  /// [n_d x d] features of one domain; undefined if the domain has no nodes.
  ad::Var features(Domain d) const;
  /// [n x d] source rows then target rows.
  ad::Var joint_features() const;
  std::vector<NodeInfo> info(Domain d) const;
  std::vector<NodeInfo> joint_info() const;

  bool has_class(Domain d, int class_id) const;
  int count(Domain d, int class_id, NodeKind kind) const;

 private:
  struct Part {
    std::vector<ad::Var> blocks;
    std::vector<NodeInfo> info;
  };
  const Part& part(Domain d) const { return d == Domain::source ? src_ : tgt_; }
  Part& part(Domain d) { return d == Domain::source ? src_ : tgt_; }

  int dim_;
  Part src_, tgt_;
};

/// Max softmax probability and natural-log entropy per pixel of logits
/// [B, C, H, W], in (b, y, x) order.
struct ConfidenceEntropy {
  std::vector<double> p;
  std::vector<double> entropy;
};

ConfidenceEntropy pixel_confidence_entropy(const ad::Var& logits);

/// Median with the mean of the two middle values for even counts.
double median(std::vector<double> v);

/// Sampled nodes of one class. Indices refer to rows of the feature matrix
/// passed to the sampler.
struct ClassSample {
  int class_id = 0;
  std::vector<int> positives;
  std::vector<int> negatives;
  std::vector<int> members;          // all rows the class mean was taken over
  std::vector<double> mean;          // class mean feature
  std::vector<double> noise;         // prototype offset added to the mean
  bool has_prototype = false;
};

struct SamplingOptions {
  int k = 8;
  double noise_scale = 0.1;  // prototype noise std as a fraction of the class std
};

/// Positive and negative nodes of every base class present in `labels`,
/// selected by confidence/entropy medians over valid pixels and truncated to
/// the k rows nearest to the class mean.
std::vector<ClassSample> sample_base_nodes(std::span<const double> features, int dim,
                                           std::span<const int> labels, std::span<const double> p,
                                           std::span<const double> entropy, int num_base,
                                           int ignore_id, const SamplingOptions& opt, Rng& rng);

/// Unknown-class nodes among the candidate rows, split at the median entropy.
/// Fewer than two candidates yield an empty sample without a prototype.
ClassSample sample_novel_nodes(std::span<const double> features, int dim,
                               std::span<const int> candidates, std::span<const double> p,
                               std::span<const double> entropy, int unknown_id,
                               const SamplingOptions& opt, Rng& rng);

/// Per-class running mean and per-dimension variance of node features.
class MemoryBank {
 public:
  struct Entry {
    std::vector<double> mean;
    std::vector<double> var;
    long count = 0;
    bool initialized = false;

    bool operator==(const Entry&) const = default;
  };

  MemoryBank() = default;
  MemoryBank(int num_classes, int dim, double alpha);

  /// Folds the mean/variance of `rows` (n x dim) into class `cls`.
  /// The first update copies the statistics; later ones blend with weight alpha.
  void update(int cls, std::span<const double> rows);
  void update_stats(int cls, std::span<const double> mean, std::span<const double> var);

  const Entry& at(int cls) const;
  std::vector<double> stddev(int cls) const;
  int num_classes() const { return static_cast<int>(entries_.size()); }
  int dim() const { return dim_; }
  double alpha() const { return alpha_; }

  /// Flat serialisation: per class [initialized, count, mean..., var...].
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  bool operator==(const MemoryBank&) const = default;

 private:
  int dim_ = 0;
  double alpha_ = 0.99;
  std::vector<Entry> entries_;
};

struct CompletionReport {
  int synthesized = 0;
  int skipped = 0;  // missing classes whose bank entries were not initialised
};

/// Adds one synthesized prototype for every class present in one domain's
/// node set but absent from the other: own-bank mean plus Gaussian noise
/// with the counterpart bank's per-dimension std.
CompletionReport complete_missing_classes(NodeSet& nodes, const MemoryBank& source_bank,
                                          const MemoryBank& target_bank, Rng& rng);

struct GraphAttentionWeights {
  ad::Var w_q, w_k, w_v;
  int heads = 1;

  GraphAttentionWeights() = default;
  GraphAttentionWeights(int dim, int heads, Rng& init);
  std::vector<std::pair<std::string, ad::Var>> named_parameters(const std::string& prefix) const;
};

struct GraphAttentionResult {
  ad::Var features;  // [n x d], residual update
  ad::Var xi;        // [n x n] edge affinity over all nodes
  ad::Var xi_s;      // [n_s x n_s] within-source affinity (undefined if n_s = 0)
  ad::Var xi_t;      // [n_t x n_t] within-target affinity (undefined if n_t = 0)
};

/// Joint self-attention over `nodes` whose first `n_source` rows are source
/// nodes. Edge affinities use the unscaled q/k product; in training mode an
/// inverted dropout mask with rate `dropout` is applied to them.
GraphAttentionResult graph_self_attention(const ad::Var& nodes, int n_source,
                                          const GraphAttentionWeights& w, double dropout,
                                          bool training, Rng& rng);

/// Bilinear affinity v_s W v_t^T.
ad::Var affinity(const ad::Var& v_s, const ad::Var& v_t, const ad::Var& w_phi);

/// Whole-matrix standardisation, exponentiation, then `iters` rounds of
/// column- and row-normalisation (ending on rows).
ad::Var sinkhorn(const ad::Var& raw, int iters);

/// M_ij = 1 iff the classes agree and neither is the unknown id.
ad::Var matching_labels(std::span<const int> classes_s, std::span<const int> classes_t,
                        int unknown_id);

struct GraphLossTerms {
  ad::Var matching;
  ad::Var edge;
  ad::Var unknown;
  ad::Var total;
};

/// The three-term graph loss. `known_*`/`unknown_*` index rows of the
/// per-domain feature matrices. `match_mask` (n_s*n_t, empty = all ones)
/// restricts the matching term to selected pairs.
GraphLossTerms gma_loss(const ad::Var& a, const ad::Var& m, const ad::Var& xi_s,
                        const ad::Var& xi_t, const ad::Var& feats_s, std::span<const int> known_s,
                        std::span<const int> unknown_s, const ad::Var& feats_t,
                        std::span<const int> known_t, std::span<const int> unknown_t, double beta,
                        std::span<const double> match_mask = {});

struct AdapterConfig {
  int dim = 32;
  int num_base = 5;
  int ignore_id = bench::kIgnoreId;
  SamplingOptions sampling;
  double alpha_mem = 0.99;
  double beta = 0.1;
  int sinkhorn_iters = 20;
  double dropout = 0.1;
  int heads = 1;
  bool match_all_kinds = true;
};

/// Inputs of one domain: pixel features [N x d] with per-row labels and
/// per-row confidence/entropy. `novel_candidates` are the rows eligible as
/// unknown-class nodes.
struct DomainBatch {
  ad::Var features;
  std::vector<int> labels;
  std::vector<double> p;
  std::vector<double> entropy;
  std::vector<int> novel_candidates;
};

struct AdapterOutput {
  GraphLossTerms loss;
  ad::Var a, m, xi_s, xi_t;
  std::vector<NodeInfo> info_s, info_t;
  CompletionReport completion;
  bool valid = false;  // false when either domain produced no nodes
};

class GraphAdapter {
 public:
  GraphAdapter() = default;
  GraphAdapter(const AdapterConfig& cfg, Rng& init);

  /// Builds the node set, updates the memory banks (if `update_banks`),
  /// completes missing classes and evaluates the graph loss.
  AdapterOutput run(const DomainBatch& source, const DomainBatch& target, bool training,
                    bool update_banks, Rng& rng);

  NodeSet build_nodes(const DomainBatch& source, const DomainBatch& target, bool update_banks,
                      Rng& rng);

  const AdapterConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, ad::Var>> named_parameters(const std::string& prefix) const;

  ad::Var w_phi;
  GraphAttentionWeights attention;
  MemoryBank source_bank, target_bank;

 private:
  void add_domain_nodes(NodeSet& nodes, const DomainBatch& batch, Domain domain,
                        MemoryBank& bank, bool update_banks, Rng& rng);

  AdapterConfig cfg_;
};

}  // namespace edapseg::gma
