#pragma once

// Euler-margin attention: channel pairs of the query/key projections are
// rewritten in polar form after a descending channel sort, and attention
// scores are built from modulated amplitude products and phase differences.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edapseg/autodiff.hpp"
#include "edapseg/rng.hpp"

namespace edapseg::ema {

/// Polar form of consecutive channel pairs (r = even channel, s = odd).
struct PolarPair {
  std::vector<double> amplitude;
  std::vector<double> phase;  // radians in (-pi, pi]; 0 at the origin
};

PolarPair euler_decompose(std::span<const double> v);

/// Differentiable polar form of every row of x [T x d] -> [T x d/2].
ad::Var amplitude(const ad::Var& x);
ad::Var phase(const ad::Var& x);

enum class SortMode {
  soft,              // relaxed permutation forward and backward
  hard,              // exact permutation; gradient routed through it
  straight_through,  // exact permutation forward, relaxed gradient
};

std::string to_string(SortMode m);
SortMode sort_mode_from_string(const std::string& s);

/// Row-stochastic relaxation of the descending-sort permutation matrix.
/// Row i is a softmax over ((n - 1 - 2i) v_j - sum_k |v_j - v_k|) / tau,
/// which tends to the exact permutation as tau -> 0.
struct SoftPermutation {
  int n = 0;
  double tau = 0.0;
  std::vector<double> matrix;  // n x n, row-major

  double at(int i, int j) const { return matrix[static_cast<std::size_t>(i) * n + j]; }
  std::vector<double> apply(std::span<const double> v) const;
};

SoftPermutation soft_sort_permutation(std::span<const double> v, double tau);

/// Sorts the channels of every row of x in descending order under `mode`.
ad::Var sort_channels(const ad::Var& x, double tau, SortMode mode);

struct PolarVars {
  ad::Var amplitude;
  ad::Var phase;
};

PolarVars margin_project(const ad::Var& x, double tau, SortMode mode);
PolarPair margin_project(std::span<const double> v, double tau, SortMode mode);

/// Per-head learnable modulation: amplitude log-scale delta1, phase scale
/// delta2 and phase bias b. Each is a one-element parameter.
struct ModulationParams {
  ad::Var delta1;
  ad::Var delta2;
  ad::Var bias;

  static ModulationParams identity();
  static ModulationParams fixed(double delta1, double delta2, double bias);
};

/// score(i, j) = scale * e^{2 delta1} * sum_c Aq[i,c] Ak[j,c]
///               * cos(delta2 * (Pq[i,c] - Pk[j,c]) + b)
ad::Var modulated_score(const PolarVars& q, const PolarVars& k, const ModulationParams& m,
                        double scale = 1.0);

enum class AttentionKind { euler_margin, plain };

std::string to_string(AttentionKind k);
AttentionKind attention_kind_from_string(const std::string& s);

struct AttentionConfig {
  int dim = 32;
  int heads = 2;
  double tau_sort = 0.1;
  SortMode sort_mode = SortMode::soft;
  AttentionKind kind = AttentionKind::euler_margin;
};

/// Residual multi-head attention block over token matrices [B*N x d].
/// Query/key/value projections have no bias; there is no output projection,
/// so a zero value projection makes the block an exact identity.
class EulerMarginAttention {
 public:
  EulerMarginAttention() = default;
  EulerMarginAttention(const AttentionConfig& cfg, Rng& init);

  ad::Var forward(const ad::Var& x, int batch) const;

  const AttentionConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, ad::Var>> named_parameters(const std::string& prefix) const;

  ad::Var w_q, w_k, w_v;
  std::vector<ModulationParams> modulation;  // one per head

 private:
  AttentionConfig cfg_;
};

}  // namespace edapseg::ema
