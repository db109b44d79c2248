#include "edapseg/euler_margin_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace edapseg::ema {

using ad::Var;

PolarPair euler_decompose(std::span<const double> v) {
  if (v.size() % 2)
    throw std::invalid_argument("euler_decompose: odd dimension " + std::to_string(v.size()));
  PolarPair out;
  for (std::size_t j = 0; j + 1 < v.size(); j += 2) {
    const double r = v[j], s = v[j + 1];
    out.amplitude.push_back(std::hypot(r, s));
    out.phase.push_back(r == 0.0 && s == 0.0 ? 0.0 : std::atan2(s, r));
  }
  return out;
}

namespace {

void require_even_rows(const Var& x, const char* op) {
  if (x.shape().size() != 2 || x.dim(1) % 2)
    throw std::invalid_argument(std::string(op) + ": expected [T x even d], got " +
                                ad::shape_str(x.shape()));
}

}  // namespace

Var amplitude(const Var& x) {
  require_even_rows(x, "amplitude");
  const int t = x.dim(0), d = x.dim(1), h = d / 2;
  std::vector<double> y(static_cast<std::size_t>(t) * h);
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < h; ++c)
      y[i * h + c] = std::hypot(x.value()[i * d + 2 * c], x.value()[i * d + 2 * c + 1]);
  return ad::make_op({t, h}, std::move(y), {x}, [t, d, h](ad::Node& n) {
    const auto& xv = n.parents[0]->value;
    double* g = ad::input_grad(n, 0);
    for (int i = 0; i < t; ++i)
      for (int c = 0; c < h; ++c) {
        const double a = n.value[i * h + c];
        if (a == 0.0) continue;
        g[i * d + 2 * c] += n.grad[i * h + c] * xv[i * d + 2 * c] / a;
        g[i * d + 2 * c + 1] += n.grad[i * h + c] * xv[i * d + 2 * c + 1] / a;
      }
  });
}

Var phase(const Var& x) {
  require_even_rows(x, "phase");
  const int t = x.dim(0), d = x.dim(1), h = d / 2;
  std::vector<double> y(static_cast<std::size_t>(t) * h);
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < h; ++c) {
      const double r = x.value()[i * d + 2 * c], s = x.value()[i * d + 2 * c + 1];
      y[i * h + c] = (r == 0.0 && s == 0.0) ? 0.0 : std::atan2(s, r);
    }
  return ad::make_op({t, h}, std::move(y), {x}, [t, d, h](ad::Node& n) {
    const auto& xv = n.parents[0]->value;
    double* g = ad::input_grad(n, 0);
    for (int i = 0; i < t; ++i)
      for (int c = 0; c < h; ++c) {
        const double r = xv[i * d + 2 * c], s = xv[i * d + 2 * c + 1];
        const double r2 = r * r + s * s;
        if (r2 == 0.0) continue;  // gradient clamped at the origin
        g[i * d + 2 * c] += n.grad[i * h + c] * (-s / r2);
        g[i * d + 2 * c + 1] += n.grad[i * h + c] * (r / r2);
      }
  });
}

std::string to_string(SortMode m) {
  switch (m) {
    case SortMode::soft: return "soft";
    case SortMode::hard: return "hard";
    case SortMode::straight_through: return "straight_through";
  }
  return "?";
}

SortMode sort_mode_from_string(const std::string& s) {
  if (s == "soft") return SortMode::soft;
  if (s == "hard") return SortMode::hard;
  if (s == "straight_through") return SortMode::straight_through;
  throw std::invalid_argument("unknown sort mode '" + s + "'");
}

namespace {

// Soft permutation of one row; writes n*n entries into p.
void neural_sort_row(const double* v, int n, double tau, double* p) {
  std::vector<double> spread(static_cast<std::size_t>(n), 0.0);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) spread[j] += std::fabs(v[j] - v[k]);
  for (int i = 0; i < n; ++i) {
    const double coef = static_cast<double>(n - 1 - 2 * i);
    double* row = p + static_cast<std::size_t>(i) * n;
    double mx = -INFINITY;
    for (int j = 0; j < n; ++j) {
      row[j] = (coef * v[j] - spread[j]) / tau;
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (int j = 0; j < n; ++j) row[j] /= z;
  }
}

// Accumulates dL/dv for y = P(v) v given g = dL/dy.
void neural_sort_backward(const double* v, const double* p, const double* y, const double* g,
                          int n, double tau, double* gv) {
  std::vector<double> col_sum(static_cast<std::size_t>(n), 0.0);
  std::vector<double> col_coef(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const double coef = static_cast<double>(n - 1 - 2 * i);
    for (int j = 0; j < n; ++j) {
      const double pij = p[static_cast<std::size_t>(i) * n + j];
      gv[j] += pij * g[i];
      const double gz = pij * g[i] * (v[j] - y[i]);  // dL/dz_ij
      col_sum[j] += gz;
      col_coef[j] += gz * coef;
    }
  }
  auto sgn = [](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); };
  for (int m = 0; m < n; ++m) {
    double own = 0.0, others = 0.0;
    for (int k = 0; k < n; ++k) {
      own += sgn(v[m] - v[k]);
      others += col_sum[k] * sgn(v[k] - v[m]);
    }
    gv[m] += (col_coef[m] - col_sum[m] * own + others) / tau;
  }
}

std::vector<int> descending_order(const double* v, int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [v](int a, int b) { return v[a] > v[b]; });
  return idx;
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(op) + ": non-finite input");
}

}  // namespace

std::vector<double> SoftPermutation::apply(std::span<const double> v) const {
  if (static_cast<int>(v.size()) != n) throw std::invalid_argument("SoftPermutation: size mismatch");
  std::vector<double> y(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) y[i] += at(i, j) * v[j];
  return y;
}

SoftPermutation soft_sort_permutation(std::span<const double> v, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_sort_permutation: tau must be > 0");
  require_finite(v, "soft_sort_permutation");
  SoftPermutation sp;
  sp.n = static_cast<int>(v.size());
  sp.tau = tau;
  sp.matrix.resize(v.size() * v.size());
  neural_sort_row(v.data(), sp.n, tau, sp.matrix.data());
  return sp;
}

Var sort_channels(const Var& x, double tau, SortMode mode) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("sort_channels: expected a matrix, got " + ad::shape_str(x.shape()));
  if (!(tau > 0.0)) throw std::invalid_argument("sort_channels: tau must be > 0");
  require_finite(x.value(), "sort_channels");
  const int t = x.dim(0), n = x.dim(1);
  const std::size_t nn = static_cast<std::size_t>(n) * n;
  std::vector<double> y(x.size(), 0.0);
  std::vector<double> perms;
  std::vector<int> orders;
  const bool need_soft = mode != SortMode::hard;
  if (need_soft) perms.resize(static_cast<std::size_t>(t) * nn);
  if (mode != SortMode::soft) orders.resize(x.size());
  for (int r = 0; r < t; ++r) {
    const double* v = x.value().data() + static_cast<std::size_t>(r) * n;
    double* out = y.data() + static_cast<std::size_t>(r) * n;
    if (need_soft) neural_sort_row(v, n, tau, perms.data() + r * nn);
    if (mode == SortMode::soft) {
      const double* p = perms.data() + r * nn;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out[i] += p[i * n + j] * v[j];
    } else {
      auto ord = descending_order(v, n);
      for (int i = 0; i < n; ++i) {
        out[i] = v[ord[i]];
        orders[static_cast<std::size_t>(r) * n + i] = ord[i];
      }
    }
  }
  return ad::make_op(x.shape(), std::move(y), {x},
                     [t, n, nn, tau, mode, perms = std::move(perms),
                      orders = std::move(orders)](ad::Node& nd) {
    const auto& xv = nd.parents[0]->value;
    double* g = ad::input_grad(nd, 0);
    std::vector<double> ysoft(static_cast<std::size_t>(n));
    for (int r = 0; r < t; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      if (mode == SortMode::hard) {
        for (int i = 0; i < n; ++i) g[off + orders[off + i]] += nd.grad[off + i];
        continue;
      }
      const double* p = perms.data() + r * nn;
      // The relaxed backward needs the relaxed forward output.
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += p[i * n + j] * xv[off + j];
        ysoft[i] = acc;
      }
      neural_sort_backward(xv.data() + off, p, ysoft.data(), nd.grad.data() + off, n, tau, g + off);
    }
  });
}

PolarVars margin_project(const Var& x, double tau, SortMode mode) {
  require_even_rows(x, "margin_project");
  Var sorted = sort_channels(x, tau, mode);
  return {amplitude(sorted), phase(sorted)};
}

PolarPair margin_project(std::span<const double> v, double tau, SortMode mode) {
  if (v.size() % 2)
    throw std::invalid_argument("margin_project: odd dimension " + std::to_string(v.size()));
  Var x = ad::constant({1, static_cast<int>(v.size())}, {v.begin(), v.end()});
  return euler_decompose(sort_channels(x, tau, mode).value());
}

ModulationParams ModulationParams::identity() { return fixed(0.0, 1.0, 0.0); }

ModulationParams ModulationParams::fixed(double d1, double d2, double b) {
  return {ad::parameter({1}, {d1}), ad::parameter({1}, {d2}), ad::parameter({1}, {b})};
}

Var modulated_score(const PolarVars& q, const PolarVars& k, const ModulationParams& m,
                    double scale) {
  const auto& aq = q.amplitude;
  const auto& pq = q.phase;
  const auto& ak = k.amplitude;
  const auto& pk = k.phase;
  if (aq.shape() != pq.shape() || ak.shape() != pk.shape() || aq.shape().size() != 2 ||
      ak.shape().size() != 2 || aq.dim(1) != ak.dim(1))
    throw std::invalid_argument("modulated_score: dimension mismatch " + ad::shape_str(aq.shape()) +
                                " vs " + ad::shape_str(ak.shape()));
  const int nq = aq.dim(0), nk = ak.dim(0), h = aq.dim(1);
  const double d1 = m.delta1.item(), d2 = m.delta2.item(), b = m.bias.item();
  const double w = std::exp(2.0 * d1) * scale;
  std::vector<double> y(static_cast<std::size_t>(nq) * nk, 0.0);
  const double* AQ = aq.value().data();
  const double* PQ = pq.value().data();
  const double* AK = ak.value().data();
  const double* PK = pk.value().data();
  for (int i = 0; i < nq; ++i)
    for (int j = 0; j < nk; ++j) {
      double acc = 0.0;
      for (int c = 0; c < h; ++c)
        acc += AQ[i * h + c] * AK[j * h + c] * std::cos(d2 * (PQ[i * h + c] - PK[j * h + c]) + b);
      y[static_cast<std::size_t>(i) * nk + j] = w * acc;
    }
  return ad::make_op({nq, nk}, std::move(y), {aq, pq, ak, pk, m.delta1, m.delta2, m.bias},
                     [nq, nk, h, d2, b, w](ad::Node& n) {
    const double* AQ2 = n.parents[0]->value.data();
    const double* PQ2 = n.parents[1]->value.data();
    const double* AK2 = n.parents[2]->value.data();
    const double* PK2 = n.parents[3]->value.data();
    double* g_aq = ad::input_grad(n, 0);
    double* g_pq = ad::input_grad(n, 1);
    double* g_ak = ad::input_grad(n, 2);
    double* g_pk = ad::input_grad(n, 3);
    double* g_d1 = ad::input_grad(n, 4);
    double* g_d2 = ad::input_grad(n, 5);
    double* g_b = ad::input_grad(n, 6);
    double acc_d1 = 0.0, acc_d2 = 0.0, acc_b = 0.0;
    for (int i = 0; i < nq; ++i)
      for (int j = 0; j < nk; ++j) {
        const double G = n.grad[static_cast<std::size_t>(i) * nk + j];
        if (G == 0.0) continue;
        acc_d1 += 2.0 * G * n.value[static_cast<std::size_t>(i) * nk + j];
        const double gw = G * w;
        for (int c = 0; c < h; ++c) {
          const double dphi = PQ2[i * h + c] - PK2[j * h + c];
          const double arg = d2 * dphi + b;
          const double cs = std::cos(arg), sn = std::sin(arg);
          const double aa = AQ2[i * h + c] * AK2[j * h + c];
          if (g_aq) g_aq[i * h + c] += gw * AK2[j * h + c] * cs;
          if (g_ak) g_ak[j * h + c] += gw * AQ2[i * h + c] * cs;
          const double dsin = -gw * aa * sn;  // dL/d(arg)
          if (g_pq) g_pq[i * h + c] += dsin * d2;
          if (g_pk) g_pk[j * h + c] -= dsin * d2;
          acc_d2 += dsin * dphi;
          acc_b += dsin;
        }
      }
    if (g_d1) g_d1[0] += acc_d1;
    if (g_d2) g_d2[0] += acc_d2;
    if (g_b) g_b[0] += acc_b;
  });
}

std::string to_string(AttentionKind k) {
  return k == AttentionKind::euler_margin ? "euler_margin" : "plain";
}

AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "euler_margin") return AttentionKind::euler_margin;
  if (s == "plain") return AttentionKind::plain;
  throw std::invalid_argument("unknown attention kind '" + s + "'");
}

namespace {

Var random_matrix(int rows, int cols, double stddev, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = stddev * rng.normal();
  return ad::parameter({rows, cols}, std::move(v));
}

}  // namespace

EulerMarginAttention::EulerMarginAttention(const AttentionConfig& cfg, Rng& init) : cfg_(cfg) {
  if (cfg.dim <= 0 || cfg.heads <= 0 || cfg.dim % (2 * cfg.heads))
    throw std::invalid_argument("attention: dim " + std::to_string(cfg.dim) +
                                " not divisible by 2*heads (" + std::to_string(2 * cfg.heads) + ")");
  if (!(cfg.tau_sort > 0.0)) throw std::invalid_argument("attention: tau_sort must be > 0");
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  w_q = random_matrix(cfg.dim, cfg.dim, sd, init);
  w_k = random_matrix(cfg.dim, cfg.dim, sd, init);
  w_v = random_matrix(cfg.dim, cfg.dim, sd, init);
  for (int h = 0; h < cfg.heads; ++h) modulation.push_back(ModulationParams::identity());
}

Var EulerMarginAttention::forward(const Var& x, int batch) const {
  if (x.shape().size() != 2 || x.dim(1) != cfg_.dim || batch <= 0 || x.dim(0) % batch)
    throw std::invalid_argument("attention: input " + ad::shape_str(x.shape()) +
                                " incompatible with dim " + std::to_string(cfg_.dim) +
                                " and batch " + std::to_string(batch));
  const int tokens = x.dim(0) / batch;
  const int dh = cfg_.dim / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = ad::matmul(x, w_q);
  Var k = ad::matmul(x, w_k);
  Var v = ad::matmul(x, w_v);
  std::vector<Var> head_out;
  for (int h = 0; h < cfg_.heads; ++h) {
    Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    PolarVars qp, kp;
    if (cfg_.kind == AttentionKind::euler_margin) {
      qp = margin_project(qh, cfg_.tau_sort, cfg_.sort_mode);
      kp = margin_project(kh, cfg_.tau_sort, cfg_.sort_mode);
    }
    std::vector<Var> per_batch;
    for (int b = 0; b < batch; ++b) {
      const int r0 = b * tokens, r1 = (b + 1) * tokens;
      Var scores;
      if (cfg_.kind == AttentionKind::euler_margin) {
        PolarVars qb{ad::slice_rows(qp.amplitude, r0, r1), ad::slice_rows(qp.phase, r0, r1)};
        PolarVars kb{ad::slice_rows(kp.amplitude, r0, r1), ad::slice_rows(kp.phase, r0, r1)};
        scores = modulated_score(qb, kb, modulation[h], scale);
      } else {
        scores = ad::scale(ad::matmul_bt(ad::slice_rows(qh, r0, r1), ad::slice_rows(kh, r0, r1)), scale);
      }
      per_batch.push_back(ad::matmul(ad::softmax_rows(scores), ad::slice_rows(vh, r0, r1)));
    }
    head_out.push_back(batch == 1 ? per_batch[0] : ad::concat_rows(per_batch));
  }
  Var attended = cfg_.heads == 1 ? head_out[0] : ad::concat_cols(head_out);
  return ad::add(attended, x);
}

std::vector<std::pair<std::string, Var>> EulerMarginAttention::named_parameters(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Var>> out{
      {prefix + ".w_q", w_q}, {prefix + ".w_k", w_k}, {prefix + ".w_v", w_v}};
  if (cfg_.kind == AttentionKind::euler_margin)
    for (std::size_t h = 0; h < modulation.size(); ++h) {
      const std::string p = prefix + ".head" + std::to_string(h);
      out.emplace_back(p + ".delta1", modulation[h].delta1);
      out.emplace_back(p + ".delta2", modulation[h].delta2);
      out.emplace_back(p + ".bias", modulation[h].bias);
    }
  return out;
}

}  // namespace edapseg::ema
