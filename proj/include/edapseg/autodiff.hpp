#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Values are stored row-major. Ops record a backward closure only when at
// least one input requires a gradient, so inference passes build no graph.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace edapseg::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  std::size_t size() const { return node_->value.size(); }
  bool defined() const { return node_ != nullptr; }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad; }
  double item() const;

  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
  /// Only valid on scalar outputs.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node for a custom op. `backward` runs only when some
/// input requires a gradient; use input_grad() inside it.
Var make_op(Shape shape, std::vector<double> value, std::vector<Var> inputs,
            std::function<void(Node&)> backward);
/// Gradient buffer of input `i` of a custom-op node, or nullptr.
double* input_grad(Node& n, std::size_t i);

Var constant(Shape shape, std::vector<double> values);
Var zeros(Shape shape);
Var parameter(Shape shape, std::vector<double> values);
Var scalar(double v);
/// Returns a gradient-free copy of `x`.
Var detach(const Var& x);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Multiplies every entry of `a` by the single-element tensor `s`.
Var mul_scalar_var(const Var& a, const Var& s);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Column means of a [M x N] matrix, shape [1 x N].
Var mean_rows(const Var& a);

// Matrix ops (2-D).
Var matmul(const Var& a, const Var& b);
/// a [M x K] times b^T, b [N x K].
Var matmul_bt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row_vector(const Var& a, const Var& bias);
Var softmax_rows(const Var& a);
Var row_normalize(const Var& a);
Var col_normalize(const Var& a);
Var unit_normalize_rows(const Var& a);
/// Whole-tensor standardisation to zero mean, unit variance. A constant
/// input maps to zeros with zero gradient.
Var standardize(const Var& a);

// Structural.
Var reshape(const Var& a, Shape shape);
Var slice_rows(const Var& a, int begin, int end);
Var slice_cols(const Var& a, int begin, int end);
Var gather_rows(const Var& a, std::span<const int> rows);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

// Image ops, NCHW layout.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_nearest(const Var& x, int factor);
/// Bilinear upsampling by an integer factor with half-pixel centres and
/// edge clamping.
Var upsample_bilinear(const Var& x, int factor);
/// [B, C, H, W] -> [B*H*W, C].
Var nchw_to_tokens(const Var& x);
/// [B*H*W, C] -> [B, C, H, W].
Var tokens_to_nchw(const Var& t, int batch, int height, int width);

/// Pixelwise cross-entropy on logits [B, C, H, W]. Pixels whose label equals
/// `ignore_id` are skipped; the result is sum(w_i * ce_i) / #valid.
Var cross_entropy(const Var& logits, std::span<const int> labels,
                  std::span<const double> weights, int ignore_id);

}  // namespace edapseg::ad
