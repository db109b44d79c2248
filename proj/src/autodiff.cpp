#include "edapseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace edapseg::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

int Var::dim(int i) const {
  return node_->shape.at(static_cast<std::size_t>(i));
}

double Var::item() const {
  if (node_->value.size() != 1)
    throw std::invalid_argument("item() on tensor of shape " + shape_str(node_->shape));
  return node_->value[0];
}

void Var::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Var::backward() const {
  if (node_->value.size() != 1)
    throw std::invalid_argument("backward() requires a scalar output");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    n->ensure_grad();
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward(*n);
  }
}

namespace {

Var make(Shape shape, std::vector<double> value, std::vector<Var> inputs,
         std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (auto& v : inputs) node->parents.push_back(v.ptr());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

// Gradient buffer of input `i` of node `n`, or nullptr if it needs none.
double* pgrad(Node& n, std::size_t i) {
  auto& p = n.parents[i];
  return p->requires_grad ? p->grad.data() : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

template <typename F, typename G>
Var unary(const Var& a, F f, G dfdx) {
  const auto& x = a.value();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make(a.shape(), std::move(y), {a}, [dfdx](Node& n) {
    const auto& xin = n.parents[0]->value;
    double* g = pgrad(n, 0);
    for (std::size_t i = 0; i < xin.size(); ++i) g[i] += n.grad[i] * dfdx(xin[i], n.value[i]);
  });
}

}  // namespace

Var make_op(Shape shape, std::vector<double> value, std::vector<Var> inputs,
            std::function<void(Node&)> backward) {
  return make(std::move(shape), std::move(value), std::move(inputs), std::move(backward));
}

double* input_grad(Node& n, std::size_t i) { return pgrad(n, i); }

Var constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw std::invalid_argument("constant: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Var(std::move(node));
}

Var zeros(Shape shape) {
  const auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Var parameter(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node()->requires_grad = true;
  v.node()->ensure_grad();
  return v;
}

Var scalar(double v) { return constant({1}, {v}); }

Var detach(const Var& x) { return constant(x.shape(), x.value()); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make(a.shape(), std::move(y), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (double* g = pgrad(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make(a.shape(), std::move(y), {a, b}, [](Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (double* g = pgrad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make(a.shape(), std::move(y), {a, b}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    if (double* g = pgrad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar_var(const Var& a, const Var& s) {
  if (s.size() != 1) throw std::invalid_argument("mul_scalar_var: scale must have one element");
  const double sv = s.value()[0];
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * sv;
  return make(a.shape(), std::move(y), {a, s}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const double sv2 = n.parents[1]->value[0];
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * sv2;
    if (double* g = pgrad(n, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * av[i];
      g[0] += acc;
    }
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  return make({1}, {s}, {a}, [](Node& n) {
    double* g = pgrad(n, 0);
    const std::size_t m = n.parents[0]->value.size();
    for (std::size_t i = 0; i < m; ++i) g[i] += n.grad[0];
  });
}

Var mean(const Var& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  const int m = a.dim(0), c = a.dim(1);
  if (m == 0) throw std::invalid_argument("mean_rows of empty matrix");
  std::vector<double> y(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) y[j] += a.value()[i * c + j];
  for (auto& v : y) v /= m;
  return make({1, c}, std::move(y), {a}, [m, c](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) g[i * c + j] += n.grad[j] / m;
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  std::vector<double> y(static_cast<std::size_t>(m) * nn, 0.0);
  const double* A = a.value().data();
  const double* B = b.value().data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (int j = 0; j < nn; ++j) y[i * nn + j] += aip * B[p * nn + j];
    }
  return make({m, nn}, std::move(y), {a, b}, [m, k, nn](Node& n) {
    const double* A2 = n.parents[0]->value.data();
    const double* B2 = n.parents[1]->value.data();
    const double* G = n.grad.data();
    if (double* ga = pgrad(n, 0))
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < nn; ++j) acc += G[i * nn + j] * B2[p * nn + j];
          ga[i * k + p] += acc;
        }
    if (double* gb = pgrad(n, 1))
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double aip = A2[i * k + p];
          if (aip == 0.0) continue;
          for (int j = 0; j < nn; ++j) gb[p * nn + j] += aip * G[i * nn + j];
        }
  });
}

Var matmul_bt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_bt");
  require_rank(b, 2, "matmul_bt");
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(0);
  if (b.dim(1) != k)
    throw std::invalid_argument("matmul_bt: inner dimension mismatch " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + "^T");
  std::vector<double> y(static_cast<std::size_t>(m) * nn, 0.0);
  const double* A = a.value().data();
  const double* B = b.value().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      y[i * nn + j] = acc;
    }
  return make({m, nn}, std::move(y), {a, b}, [m, k, nn](Node& n) {
    const double* A2 = n.parents[0]->value.data();
    const double* B2 = n.parents[1]->value.data();
    const double* G = n.grad.data();
    double* ga = pgrad(n, 0);
    double* gb = pgrad(n, 1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < nn; ++j) {
        const double g = G[i * nn + j];
        if (g == 0.0) continue;
        if (ga)
          for (int p = 0; p < k; ++p) ga[i * k + p] += g * B2[j * k + p];
        if (gb)
          for (int p = 0; p < k; ++p) gb[j * k + p] += g * A2[i * k + p];
      }
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const int m = a.dim(0), c = a.dim(1);
  std::vector<double> y(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) y[j * m + i] = a.value()[i * c + j];
  return make({c, m}, std::move(y), {a}, [m, c](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) g[i * c + j] += n.grad[j * m + i];
  });
}

Var add_row_vector(const Var& a, const Var& bias) {
  require_rank(a, 2, "add_row_vector");
  const int m = a.dim(0), c = a.dim(1);
  if (bias.size() != static_cast<std::size_t>(c))
    throw std::invalid_argument("add_row_vector: bias length " + std::to_string(bias.size()) +
                                " != columns " + std::to_string(c));
  std::vector<double> y(a.value());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) y[i * c + j] += bias.value()[j];
  return make(a.shape(), std::move(y), {a, bias}, [m, c](Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (double* g = pgrad(n, 1))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
  });
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const int m = a.dim(0), c = a.dim(1);
  std::vector<double> y(a.size());
  for (int i = 0; i < m; ++i) {
    const double* x = a.value().data() + i * c;
    double mx = -INFINITY;
    for (int j = 0; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += (y[i * c + j] = std::exp(x[j] - mx));
    for (int j = 0; j < c; ++j) y[i * c + j] /= z;
  }
  return make(a.shape(), std::move(y), {a}, [m, c](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i) {
      const double* s = n.value.data() + i * c;
      const double* gy = n.grad.data() + i * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += gy[j] * s[j];
      for (int j = 0; j < c; ++j) g[i * c + j] += s[j] * (gy[j] - dot);
    }
  });
}

Var row_normalize(const Var& a) {
  require_rank(a, 2, "row_normalize");
  const int m = a.dim(0), c = a.dim(1);
  std::vector<double> y(a.size());
  std::vector<double> sums(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += a.value()[i * c + j];
    sums[i] = s;
    for (int j = 0; j < c; ++j) y[i * c + j] = a.value()[i * c + j] / s;
  }
  return make(a.shape(), std::move(y), {a}, [m, c, sums](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
      for (int j = 0; j < c; ++j) g[i * c + j] += (n.grad[i * c + j] - dot) / sums[i];
    }
  });
}

Var col_normalize(const Var& a) {
  require_rank(a, 2, "col_normalize");
  const int m = a.dim(0), c = a.dim(1);
  std::vector<double> y(a.size());
  std::vector<double> sums(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) sums[j] += a.value()[i * c + j];
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) y[i * c + j] = a.value()[i * c + j] / sums[j];
  return make(a.shape(), std::move(y), {a}, [m, c, sums](Node& n) {
    double* g = pgrad(n, 0);
    std::vector<double> dot(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) dot[j] += n.grad[i * c + j] * n.value[i * c + j];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) g[i * c + j] += (n.grad[i * c + j] - dot[j]) / sums[j];
  });
}

Var unit_normalize_rows(const Var& a) {
  require_rank(a, 2, "unit_normalize_rows");
  const int m = a.dim(0), c = a.dim(1);
  std::vector<double> y(a.size(), 0.0);
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += a.value()[i * c + j] * a.value()[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] > 0.0)
      for (int j = 0; j < c; ++j) y[i * c + j] = a.value()[i * c + j] / norms[i];
  }
  return make(a.shape(), std::move(y), {a}, [m, c, norms](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i) {
      if (norms[i] == 0.0) continue;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
      for (int j = 0; j < c; ++j)
        g[i * c + j] += (n.grad[i * c + j] - dot * n.value[i * c + j]) / norms[i];
    }
  });
}

Var standardize(const Var& a) {
  const std::size_t m = a.size();
  if (m == 0) throw std::invalid_argument("standardize of empty tensor");
  double mu = 0.0;
  for (double v : a.value()) mu += v;
  mu /= static_cast<double>(m);
  double var = 0.0;
  for (double v : a.value()) var += (v - mu) * (v - mu);
  var /= static_cast<double>(m);
  const double sd = std::sqrt(var);
  std::vector<double> y(m, 0.0);
  const bool degenerate = !(sd > 1e-12);
  if (!degenerate)
    for (std::size_t i = 0; i < m; ++i) y[i] = (a.value()[i] - mu) / sd;
  return make(a.shape(), std::move(y), {a}, [m, sd, degenerate](Node& n) {
    if (degenerate) return;
    double* g = pgrad(n, 0);
    double gsum = 0.0, gdot = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      gsum += n.grad[i];
      gdot += n.grad[i] * n.value[i];
    }
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      g[i] += (n.grad[i] - gsum * inv - n.value[i] * gdot * inv) / sd;
  });
}

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make(std::move(shape), a.value(), {a}, [](Node& n) {
    double* g = pgrad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

Var slice_rows(const Var& a, int begin, int end) {
  require_rank(a, 2, "slice_rows");
  const int c = a.dim(1);
  if (begin < 0 || end > a.dim(0) || begin > end)
    throw std::out_of_range("slice_rows: [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") of " + shape_str(a.shape()));
  std::vector<double> y(a.value().begin() + static_cast<std::ptrdiff_t>(begin) * c,
                        a.value().begin() + static_cast<std::ptrdiff_t>(end) * c);
  return make({end - begin, c}, std::move(y), {a}, [begin, c](Node& n) {
    double* g = pgrad(n, 0) + static_cast<std::ptrdiff_t>(begin) * c;
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

Var slice_cols(const Var& a, int begin, int end) {
  require_rank(a, 2, "slice_cols");
  const int m = a.dim(0), c = a.dim(1), w = end - begin;
  if (begin < 0 || end > c || begin > end)
    throw std::out_of_range("slice_cols: [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") of " + shape_str(a.shape()));
  std::vector<double> y(static_cast<std::size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) y[i * w + j] = a.value()[i * c + begin + j];
  return make({m, w}, std::move(y), {a}, [m, c, w, begin](Node& n) {
    double* g = pgrad(n, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) g[i * c + begin + j] += n.grad[i * w + j];
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  require_rank(a, 2, "gather_rows");
  const int c = a.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<double> y(idx.size() * static_cast<std::size_t>(c));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.dim(0))
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) + " of " +
                              shape_str(a.shape()));
    std::copy_n(a.value().begin() + static_cast<std::ptrdiff_t>(idx[r]) * c, c,
                y.begin() + static_cast<std::ptrdiff_t>(r) * c);
  }
  return make({static_cast<int>(idx.size()), c}, std::move(y), {a}, [idx, c](Node& n) {
    double* g = pgrad(n, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < c; ++j) g[idx[r] * c + j] += n.grad[r * c + j];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int c = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> y;
  y.reserve(static_cast<std::size_t>(rows) * c);
  for (const auto& p : parts) y.insert(y.end(), p.value().begin(), p.value().end());
  return make({rows, c}, std::move(y), parts, [](Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      const std::size_t len = n.parents[k]->value.size();
      if (double* g = pgrad(n, k))
        for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
      off += len;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  std::vector<double> y(static_cast<std::size_t>(m) * cols);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) y[i * cols + off + j] = p.value()[i * w + j];
    off += w;
  }
  return make({m, cols}, std::move(y), parts, [m, cols](Node& n) {
    int o = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      const int w = n.parents[k]->shape[1];
      if (double* g = pgrad(n, k))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) g[i * w + j] += n.grad[i * cols + o + j];
      o += w;
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != K)
    throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) + " vs input " +
                                shape_str(x.shape()));
  if (b.size() != static_cast<std::size_t>(O))
    throw std::invalid_argument("conv2d: bias length mismatch");
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(B) * O * Ho * Wo);
  const double* X = x.value().data();
  const double* Wt = w.value().data();
  for (int n = 0; n < B; ++n)
    for (int o = 0; o < O; ++o) {
      double* out = y.data() + (static_cast<std::size_t>(n) * O + o) * Ho * Wo;
      std::fill(out, out + Ho * Wo, b.value()[o]);
      for (int c = 0; c < C; ++c) {
        const double* in = X + (static_cast<std::size_t>(n) * C + c) * H * W;
        const double* ker = Wt + (static_cast<std::size_t>(o) * C + c) * K * K;
        for (int ky = 0; ky < K; ++ky)
          for (int kx = 0; kx < K; ++kx) {
            const double kv = ker[ky * K + kx];
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                out[oy * Wo + ox] += kv * in[iy * W + ix];
              }
            }
          }
      }
    }
  return make({B, O, Ho, Wo}, std::move(y), {x, w, b},
              [B, C, H, W, O, K, Ho, Wo, stride, pad](Node& nd) {
    const double* X2 = nd.parents[0]->value.data();
    const double* Wt2 = nd.parents[1]->value.data();
    double* gx = pgrad(nd, 0);
    double* gw = pgrad(nd, 1);
    double* gb = pgrad(nd, 2);
    for (int n = 0; n < B; ++n)
      for (int o = 0; o < O; ++o) {
        const double* go = nd.grad.data() + (static_cast<std::size_t>(n) * O + o) * Ho * Wo;
        if (gb)
          for (int i = 0; i < Ho * Wo; ++i) gb[o] += go[i];
        for (int c = 0; c < C; ++c) {
          const std::size_t in_off = (static_cast<std::size_t>(n) * C + c) * H * W;
          const std::size_t k_off = (static_cast<std::size_t>(o) * C + c) * K * K;
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              double acc = 0.0;
              const double kv = Wt2[k_off + ky * K + kx];
              for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int ox = 0; ox < Wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= W) continue;
                  const double g = go[oy * Wo + ox];
                  acc += g * X2[in_off + iy * W + ix];
                  if (gx) gx[in_off + iy * W + ix] += g * kv;
                }
              }
              if (gw) gw[k_off + ky * K + kx] += acc;
            }
        }
      }
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  std::vector<double> y(static_cast<std::size_t>(B) * C * Ho * Wo);
  for (int p = 0; p < B * C; ++p)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        y[(static_cast<std::size_t>(p) * Ho + oy) * Wo + ox] =
            x.value()[(static_cast<std::size_t>(p) * H + oy / factor) * W + ox / factor];
  return make({B, C, Ho, Wo}, std::move(y), {x}, [B, C, H, W, Ho, Wo, factor](Node& n) {
    double* g = pgrad(n, 0);
    for (int p = 0; p < B * C; ++p)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
          g[(static_cast<std::size_t>(p) * H + oy / factor) * W + ox / factor] +=
              n.grad[(static_cast<std::size_t>(p) * Ho + oy) * Wo + ox];
  });
}

namespace {

struct Tap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear(const Var& x, int factor) {
  require_rank(x, 4, "upsample_bilinear");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  auto ty = bilinear_taps(H, factor);
  auto tx = bilinear_taps(W, factor);
  std::vector<double> y(static_cast<std::size_t>(B) * C * Ho * Wo);
  for (int p = 0; p < B * C; ++p) {
    const double* in = x.value().data() + static_cast<std::size_t>(p) * H * W;
    double* out = y.data() + static_cast<std::size_t>(p) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const auto& a = ty[oy];
      for (int ox = 0; ox < Wo; ++ox) {
        const auto& c = tx[ox];
        const double top = in[a.i0 * W + c.i0] * (1 - c.w1) + in[a.i0 * W + c.i1] * c.w1;
        const double bot = in[a.i1 * W + c.i0] * (1 - c.w1) + in[a.i1 * W + c.i1] * c.w1;
        out[oy * Wo + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  return make({B, C, Ho, Wo}, std::move(y), {x}, [B, C, H, W, Ho, Wo, ty, tx](Node& n) {
    double* g = pgrad(n, 0);
    for (int p = 0; p < B * C; ++p) {
      double* gi = g + static_cast<std::size_t>(p) * H * W;
      const double* go = n.grad.data() + static_cast<std::size_t>(p) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        const auto& a = ty[oy];
        for (int ox = 0; ox < Wo; ++ox) {
          const auto& c = tx[ox];
          const double v = go[oy * Wo + ox];
          gi[a.i0 * W + c.i0] += v * (1 - a.w1) * (1 - c.w1);
          gi[a.i0 * W + c.i1] += v * (1 - a.w1) * c.w1;
          gi[a.i1 * W + c.i0] += v * a.w1 * (1 - c.w1);
          gi[a.i1 * W + c.i1] += v * a.w1 * c.w1;
        }
      }
    }
  });
}

Var nchw_to_tokens(const Var& x) {
  require_rank(x, 4, "nchw_to_tokens");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int HW = H * W;
  std::vector<double> y(x.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < HW; ++s)
        y[(static_cast<std::size_t>(b) * HW + s) * C + c] =
            x.value()[(static_cast<std::size_t>(b) * C + c) * HW + s];
  return make({B * HW, C}, std::move(y), {x}, [B, C, HW](Node& n) {
    double* g = pgrad(n, 0);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int s = 0; s < HW; ++s)
          g[(static_cast<std::size_t>(b) * C + c) * HW + s] +=
              n.grad[(static_cast<std::size_t>(b) * HW + s) * C + c];
  });
}

Var tokens_to_nchw(const Var& t, int batch, int height, int width) {
  require_rank(t, 2, "tokens_to_nchw");
  const int C = t.dim(1), HW = height * width;
  if (t.dim(0) != batch * HW)
    throw std::invalid_argument("tokens_to_nchw: " + shape_str(t.shape()) + " vs batch " +
                                std::to_string(batch) + " of " + std::to_string(height) + "x" +
                                std::to_string(width));
  std::vector<double> y(t.size());
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < HW; ++s)
        y[(static_cast<std::size_t>(b) * C + c) * HW + s] =
            t.value()[(static_cast<std::size_t>(b) * HW + s) * C + c];
  return make({batch, C, height, width}, std::move(y), {t}, [batch, C, HW](Node& n) {
    double* g = pgrad(n, 0);
    for (int b = 0; b < batch; ++b)
      for (int c = 0; c < C; ++c)
        for (int s = 0; s < HW; ++s)
          g[(static_cast<std::size_t>(b) * HW + s) * C + c] +=
              n.grad[(static_cast<std::size_t>(b) * C + c) * HW + s];
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels,
                  std::span<const double> weights, int ignore_id) {
  require_rank(logits, 4, "cross_entropy");
  const int B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  const std::size_t npix = static_cast<std::size_t>(B) * HW;
  if (labels.size() != npix)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(npix) + " pixels");
  if (!weights.empty() && weights.size() != npix)
    throw std::invalid_argument("cross_entropy: weight count mismatch");
  const double* X = logits.value().data();
  std::vector<double> probs(logits.size(), 0.0);
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> wts(npix, 1.0);
  if (!weights.empty()) wts.assign(weights.begin(), weights.end());
  double total = 0.0;
  std::size_t valid = 0;
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < HW; ++s) {
      const std::size_t pix = static_cast<std::size_t>(b) * HW + s;
      const int y = lab[pix];
      if (y == ignore_id) continue;
      if (y < 0 || y >= C)
        throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                    " outside [0, " + std::to_string(C) + ")");
      ++valid;
      double mx = -INFINITY;
      for (int c = 0; c < C; ++c) mx = std::max(mx, X[(static_cast<std::size_t>(b) * C + c) * HW + s]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        const std::size_t k = (static_cast<std::size_t>(b) * C + c) * HW + s;
        z += (probs[k] = std::exp(X[k] - mx));
      }
      for (int c = 0; c < C; ++c) probs[(static_cast<std::size_t>(b) * C + c) * HW + s] /= z;
      const double xy = X[(static_cast<std::size_t>(b) * C + y) * HW + s];
      total += wts[pix] * (std::log(z) + mx - xy);
    }
  const double denom = valid ? static_cast<double>(valid) : 1.0;
  return make({1}, {total / denom}, {logits},
              [B, C, HW, probs = std::move(probs), lab = std::move(lab), wts = std::move(wts),
               denom, ignore_id](Node& n) {
    double* g = pgrad(n, 0);
    const double g0 = n.grad[0] / denom;
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < HW; ++s) {
        const std::size_t pix = static_cast<std::size_t>(b) * HW + s;
        const int y = lab[pix];
        if (y == ignore_id) continue;
        const double w = wts[pix] * g0;
        for (int c = 0; c < C; ++c) {
          const std::size_t k = (static_cast<std::size_t>(b) * C + c) * HW + s;
          g[k] += w * (probs[k] - (c == y ? 1.0 : 0.0));
        }
      }
  });
}

}  // namespace edapseg::ad
