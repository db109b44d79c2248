#include "edapseg/graph_adapter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace edapseg::gma {

using ad::Var;

std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::positive: return "positive";
    case NodeKind::negative: return "negative";
    case NodeKind::prototype: return "prototype";
    case NodeKind::synthesized: return "synthesized";
  }
  return "?";
}

// ---------------------------------------------------------------- NodeSet

void NodeSet::append(const Var& rows, std::vector<NodeInfo> info) {
  if (info.empty()) return;
  if (rows.shape().size() != 2 || rows.dim(0) != static_cast<int>(info.size()) ||
      (dim_ != 0 && rows.dim(1) != dim_))
    throw std::invalid_argument("NodeSet::append: rows " + ad::shape_str(rows.shape()) +
                                " do not match " + std::to_string(info.size()) + " nodes of dim " +
                                std::to_string(dim_));
  if (dim_ == 0) dim_ = rows.dim(1);
  const Domain d = info.front().domain;
  for (const auto& n : info)
    if (n.domain != d) throw std::invalid_argument("NodeSet::append: mixed domains in one block");
  Part& p = part(d);
  p.blocks.push_back(rows);
  p.info.insert(p.info.end(), info.begin(), info.end());
}

int NodeSet::count(Domain d) const { return static_cast<int>(part(d).info.size()); }

Var NodeSet::features(Domain d) const {
  const Part& p = part(d);
  if (p.blocks.empty()) return {};
  return p.blocks.size() == 1 ? p.blocks.front() : ad::concat_rows(p.blocks);
}

Var NodeSet::joint_features() const {
  std::vector<Var> parts;
  for (Domain d : {Domain::source, Domain::target})
    if (count(d) > 0) parts.push_back(features(d));
  if (parts.empty()) throw std::invalid_argument("NodeSet: no nodes");
  return parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
}

std::vector<NodeInfo> NodeSet::info(Domain d) const { return part(d).info; }

std::vector<NodeInfo> NodeSet::joint_info() const {
  auto out = src_.info;
  out.insert(out.end(), tgt_.info.begin(), tgt_.info.end());
  return out;
}

bool NodeSet::has_class(Domain d, int class_id) const {
  for (const auto& n : part(d).info)
    if (n.class_id == class_id) return true;
  return false;
}

int NodeSet::count(Domain d, int class_id, NodeKind kind) const {
  int c = 0;
  for (const auto& n : part(d).info) c += (n.class_id == class_id && n.kind == kind);
  return c;
}

// ---------------------------------------------------------------- sampling

ConfidenceEntropy pixel_confidence_entropy(const Var& logits) {
  if (logits.shape().size() != 4)
    throw std::invalid_argument("pixel_confidence_entropy: expected [B,C,H,W], got " +
                                ad::shape_str(logits.shape()));
  const int b = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto& v = logits.value();
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument("pixel_confidence_entropy: non-finite logits");
  ConfidenceEntropy out;
  out.p.resize(static_cast<std::size_t>(b) * plane);
  out.entropy.resize(out.p.size());
  std::vector<double> prob(static_cast<std::size_t>(c));
  for (int n = 0; n < b; ++n)
    for (std::size_t q = 0; q < plane; ++q) {
      const double* base = v.data() + static_cast<std::size_t>(n) * c * plane + q;
      double mx = -INFINITY;
      for (int k = 0; k < c; ++k) mx = std::max(mx, base[k * plane]);
      double z = 0.0;
      for (int k = 0; k < c; ++k) z += (prob[k] = std::exp(base[k * plane] - mx));
      double pmax = 0.0, ent = 0.0;
      for (int k = 0; k < c; ++k) {
        prob[k] /= z;
        pmax = std::max(pmax, prob[k]);
        if (prob[k] > 0.0) ent -= prob[k] * std::log(prob[k]);
      }
      out.p[n * plane + q] = pmax;
      out.entropy[n * plane + q] = ent;
    }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace {

std::vector<double> row_mean(std::span<const double> f, int dim, const std::vector<int>& rows) {
  std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
  for (int r : rows)
    for (int j = 0; j < dim; ++j) mean[j] += f[static_cast<std::size_t>(r) * dim + j];
  for (double& x : mean) x /= static_cast<double>(rows.size());
  return mean;
}

std::vector<double> row_std(std::span<const double> f, int dim, const std::vector<int>& rows,
                            const std::vector<double>& mean) {
  std::vector<double> var(static_cast<std::size_t>(dim), 0.0);
  for (int r : rows)
    for (int j = 0; j < dim; ++j) {
      const double e = f[static_cast<std::size_t>(r) * dim + j] - mean[j];
      var[j] += e * e;
    }
  for (double& x : var) x = std::sqrt(x / static_cast<double>(rows.size()));
  return var;
}

double sq_dist(std::span<const double> f, int dim, int row, const std::vector<double>& c) {
  double s = 0.0;
  for (int j = 0; j < dim; ++j) {
    const double e = f[static_cast<std::size_t>(row) * dim + j] - c[j];
    s += e * e;
  }
  return s;
}

void keep_nearest(std::vector<int>& rows, std::span<const double> f, int dim,
                  const std::vector<double>& centre, int k) {
  if (static_cast<int>(rows.size()) <= k) return;
  std::vector<std::pair<double, int>> d;
  d.reserve(rows.size());
  for (int r : rows) d.emplace_back(sq_dist(f, dim, r, centre), r);
  std::sort(d.begin(), d.end());
  rows.clear();
  for (int i = 0; i < k; ++i) rows.push_back(d[i].second);
  std::sort(rows.begin(), rows.end());
}

void add_prototype(ClassSample& s, std::span<const double> f, int dim,
                   const SamplingOptions& opt, Rng& rng) {
  s.mean = row_mean(f, dim, s.members);
  const auto sd = row_std(f, dim, s.members, s.mean);
  s.noise.resize(static_cast<std::size_t>(dim));
  for (int j = 0; j < dim; ++j) s.noise[j] = opt.noise_scale * sd[j] * rng.normal();
  s.has_prototype = true;
}

void check_sizes(std::span<const double> f, int dim, std::size_t n, std::size_t p,
                 std::size_t h, const char* op) {
  if (dim <= 0 || f.size() != n * static_cast<std::size_t>(dim) || p != n || h != n)
    throw std::invalid_argument(std::string(op) + ": inconsistent input sizes");
}

}  // namespace

std::vector<ClassSample> sample_base_nodes(std::span<const double> features, int dim,
                                           std::span<const int> labels, std::span<const double> p,
                                           std::span<const double> entropy, int num_base,
                                           int ignore_id, const SamplingOptions& opt, Rng& rng) {
  check_sizes(features, dim, labels.size(), p.size(), entropy.size(), "sample_base_nodes");
  std::vector<double> valid_p, valid_h;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(num_base));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l == ignore_id || l < 0 || l >= num_base) continue;
    valid_p.push_back(p[i]);
    valid_h.push_back(entropy[i]);
    members[l].push_back(static_cast<int>(i));
  }
  std::vector<ClassSample> out;
  if (valid_p.empty()) return out;
  const double tau_p = median(valid_p), tau_e = median(valid_h);
  for (int c = 0; c < num_base; ++c) {
    if (members[c].empty()) continue;
    ClassSample s;
    s.class_id = c;
    s.members = members[c];
    for (int i : s.members) {
      if (!(entropy[i] < tau_e)) continue;
      (p[i] > tau_p ? s.positives : s.negatives).push_back(i);
    }
    add_prototype(s, features, dim, opt, rng);
    keep_nearest(s.positives, features, dim, s.mean, opt.k);
    keep_nearest(s.negatives, features, dim, s.mean, opt.k);
    out.push_back(std::move(s));
  }
  return out;
}

ClassSample sample_novel_nodes(std::span<const double> features, int dim,
                               std::span<const int> candidates, std::span<const double> p,
                               std::span<const double> entropy, int unknown_id,
                               const SamplingOptions& opt, Rng& rng) {
  check_sizes(features, dim, p.size(), p.size(), entropy.size(), "sample_novel_nodes");
  ClassSample s;
  s.class_id = unknown_id;
  if (candidates.size() < 2) return s;
  s.members.assign(candidates.begin(), candidates.end());
  std::sort(s.members.begin(), s.members.end());
  std::vector<double> h;
  for (int i : s.members) h.push_back(entropy[i]);
  const double tau_m = median(h);
  for (int i : s.members) {
    if (entropy[i] < tau_m) s.positives.push_back(i);
    else if (entropy[i] > tau_m) s.negatives.push_back(i);
  }
  add_prototype(s, features, dim, opt, rng);
  keep_nearest(s.positives, features, dim, s.mean, opt.k);
  keep_nearest(s.negatives, features, dim, s.mean, opt.k);
  return s;
}

// ---------------------------------------------------------------- memory

MemoryBank::MemoryBank(int num_classes, int dim, double alpha)
    : dim_(dim), alpha_(alpha), entries_(static_cast<std::size_t>(num_classes)) {
  if (num_classes <= 0 || dim <= 0) throw std::invalid_argument("MemoryBank: empty shape");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("MemoryBank: alpha outside [0,1]");
  for (auto& e : entries_) {
    e.mean.assign(static_cast<std::size_t>(dim), 0.0);
    e.var.assign(static_cast<std::size_t>(dim), 0.0);
  }
}

const MemoryBank::Entry& MemoryBank::at(int cls) const {
  if (cls < 0 || cls >= num_classes())
    throw std::out_of_range("MemoryBank: class " + std::to_string(cls) + " out of range");
  return entries_[cls];
}

void MemoryBank::update(int cls, std::span<const double> rows) {
  if (rows.empty()) return;
  if (rows.size() % dim_) throw std::invalid_argument("MemoryBank::update: ragged rows");
  const std::size_t n = rows.size() / dim_;
  std::vector<double> mean(static_cast<std::size_t>(dim_), 0.0), var(mean);
  for (std::size_t r = 0; r < n; ++r)
    for (int j = 0; j < dim_; ++j) mean[j] += rows[r * dim_ + j];
  for (double& x : mean) x /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (int j = 0; j < dim_; ++j) {
      const double e = rows[r * dim_ + j] - mean[j];
      var[j] += e * e;
    }
  for (double& x : var) x /= static_cast<double>(n);
  update_stats(cls, mean, var);
}

void MemoryBank::update_stats(int cls, std::span<const double> mean, std::span<const double> var) {
  at(cls);
  if (static_cast<int>(mean.size()) != dim_ || static_cast<int>(var.size()) != dim_)
    throw std::invalid_argument("MemoryBank::update_stats: dimension mismatch");
  Entry& e = entries_[cls];
  if (!e.initialized) {
    e.mean.assign(mean.begin(), mean.end());
    e.var.assign(var.begin(), var.end());
    e.initialized = true;
  } else {
    for (int j = 0; j < dim_; ++j) {
      e.mean[j] = (1.0 - alpha_) * e.mean[j] + alpha_ * mean[j];
      e.var[j] = (1.0 - alpha_) * e.var[j] + alpha_ * var[j];
    }
  }
  ++e.count;
}

std::vector<double> MemoryBank::stddev(int cls) const {
  std::vector<double> sd = at(cls).var;
  for (double& x : sd) x = std::sqrt(std::max(x, 0.0));
  return sd;
}

std::vector<double> MemoryBank::flatten() const {
  std::vector<double> out;
  for (const auto& e : entries_) {
    out.push_back(e.initialized ? 1.0 : 0.0);
    out.push_back(static_cast<double>(e.count));
    out.insert(out.end(), e.mean.begin(), e.mean.end());
    out.insert(out.end(), e.var.begin(), e.var.end());
  }
  return out;
}

void MemoryBank::unflatten(std::span<const double> flat) {
  const std::size_t per = 2 + 2 * static_cast<std::size_t>(dim_);
  if (flat.size() != per * entries_.size())
    throw std::invalid_argument("MemoryBank::unflatten: expected " +
                                std::to_string(per * entries_.size()) + " values, got " +
                                std::to_string(flat.size()));
  for (std::size_t c = 0; c < entries_.size(); ++c) {
    const double* p = flat.data() + c * per;
    Entry& e = entries_[c];
    e.initialized = p[0] != 0.0;
    e.count = static_cast<long>(p[1]);
    e.mean.assign(p + 2, p + 2 + dim_);
    e.var.assign(p + 2 + dim_, p + 2 + 2 * dim_);
  }
}

CompletionReport complete_missing_classes(NodeSet& nodes, const MemoryBank& source_bank,
                                          const MemoryBank& target_bank, Rng& rng) {
  CompletionReport rep;
  std::vector<int> expected;
  for (const auto& n : nodes.joint_info()) expected.push_back(n.class_id);
  std::sort(expected.begin(), expected.end());
  expected.erase(std::unique(expected.begin(), expected.end()), expected.end());
  for (Domain d : {Domain::source, Domain::target}) {
    const MemoryBank& own = d == Domain::source ? source_bank : target_bank;
    const MemoryBank& other = d == Domain::source ? target_bank : source_bank;
    for (int c : expected) {
      if (nodes.has_class(d, c)) continue;
      if (c >= own.num_classes() || c >= other.num_classes() || !own.at(c).initialized ||
          !other.at(c).initialized) {
        ++rep.skipped;
        continue;
      }
      const auto& mean = own.at(c).mean;
      const auto sd = other.stddev(c);
      std::vector<double> v(mean.size());
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = mean[j] + sd[j] * rng.normal();
      const int dim = static_cast<int>(v.size());
      nodes.append(ad::constant({1, dim}, std::move(v)),
                   {NodeInfo{c, d, NodeKind::synthesized}});
      ++rep.synthesized;
    }
  }
  return rep;
}

// ---------------------------------------------------------------- attention

namespace {

Var random_matrix(int rows, int cols, double sd, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = sd * rng.normal();
  return ad::parameter({rows, cols}, std::move(v));
}

Var block(const Var& m, int r0, int r1, int c0, int c1) {
  return ad::slice_cols(ad::slice_rows(m, r0, r1), c0, c1);
}

Var dropout_mask(const Var& x, double rate, Rng& rng) {
  std::vector<double> mask(x.size());
  const double keep = 1.0 - rate;
  for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return ad::mul(x, ad::constant(x.shape(), std::move(mask)));
}

}  // namespace

GraphAttentionWeights::GraphAttentionWeights(int dim, int h, Rng& init) : heads(h) {
  if (dim <= 0 || h <= 0 || dim % h)
    throw std::invalid_argument("graph attention: dim not divisible by heads");
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  w_q = random_matrix(dim, dim, sd, init);
  w_k = random_matrix(dim, dim, sd, init);
  w_v = random_matrix(dim, dim, sd, init);
}

std::vector<std::pair<std::string, Var>> GraphAttentionWeights::named_parameters(
    const std::string& prefix) const {
  return {{prefix + ".w_q", w_q}, {prefix + ".w_k", w_k}, {prefix + ".w_v", w_v}};
}

GraphAttentionResult graph_self_attention(const Var& nodes, int n_source,
                                          const GraphAttentionWeights& w, double dropout,
                                          bool training, Rng& rng) {
  if (nodes.shape().size() != 2 || nodes.dim(0) == 0)
    throw std::invalid_argument("graph_self_attention: empty node set");
  const int n = nodes.dim(0), d = nodes.dim(1);
  if (n_source < 0 || n_source > n)
    throw std::invalid_argument("graph_self_attention: source count out of range");
  if (w.w_q.dim(0) != d) throw std::invalid_argument("graph_self_attention: dimension mismatch");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("graph_self_attention: dropout outside [0,1)");
  const int dh = d / w.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = ad::matmul(nodes, w.w_q), k = ad::matmul(nodes, w.w_k), v = ad::matmul(nodes, w.w_v);
  std::vector<Var> outs, xis, xss, xts;
  for (int h = 0; h < w.heads; ++h) {
    Var qh = w.heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = w.heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = w.heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = ad::matmul_bt(qh, kh);
    outs.push_back(ad::matmul(ad::softmax_rows(ad::scale(scores, scale)), vh));
    xis.push_back(ad::softmax_rows(scores));
    if (n_source > 0) xss.push_back(ad::softmax_rows(block(scores, 0, n_source, 0, n_source)));
    if (n_source < n) xts.push_back(ad::softmax_rows(block(scores, n_source, n, n_source, n)));
  }
  auto head_mean = [&](const std::vector<Var>& parts) -> Var {
    if (parts.empty()) return {};
    Var acc = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
    return parts.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(parts.size()));
  };
  GraphAttentionResult r;
  r.features = ad::add(outs.size() == 1 ? outs[0] : ad::concat_cols(outs), nodes);
  r.xi = head_mean(xis);
  r.xi_s = head_mean(xss);
  r.xi_t = head_mean(xts);
  if (training && dropout > 0.0) {
    if (r.xi_s.defined()) r.xi_s = dropout_mask(r.xi_s, dropout, rng);
    if (r.xi_t.defined()) r.xi_t = dropout_mask(r.xi_t, dropout, rng);
  }
  return r;
}

// ---------------------------------------------------------------- matching

Var affinity(const Var& v_s, const Var& v_t, const Var& w_phi) {
  if (v_s.shape().size() != 2 || v_t.shape().size() != 2 || w_phi.shape().size() != 2 ||
      v_s.dim(1) != w_phi.dim(0) || v_t.dim(1) != w_phi.dim(1))
    throw std::invalid_argument("affinity: dimension mismatch " + ad::shape_str(v_s.shape()) +
                                ", " + ad::shape_str(w_phi.shape()) + ", " +
                                ad::shape_str(v_t.shape()));
  return ad::matmul_bt(ad::matmul(v_s, w_phi), v_t);
}

Var sinkhorn(const Var& raw, int iters) {
  if (iters < 1) throw std::invalid_argument("sinkhorn: iters must be >= 1");
  if (raw.shape().size() != 2) throw std::invalid_argument("sinkhorn: expected a matrix");
  for (double x : raw.value())
    if (!std::isfinite(x)) throw std::invalid_argument("sinkhorn: non-finite input");
  Var a = ad::exp(ad::standardize(raw));
  for (int i = 0; i < iters; ++i) a = ad::row_normalize(ad::col_normalize(a));
  return a;
}

Var matching_labels(std::span<const int> classes_s, std::span<const int> classes_t,
                    int unknown_id) {
  const int ns = static_cast<int>(classes_s.size()), nt = static_cast<int>(classes_t.size());
  std::vector<double> m(static_cast<std::size_t>(ns) * nt, 0.0);
  for (int i = 0; i < ns; ++i) {
    if (classes_s[i] == unknown_id) continue;
    for (int j = 0; j < nt; ++j)
      if (classes_s[i] == classes_t[j]) m[static_cast<std::size_t>(i) * nt + j] = 1.0;
  }
  return ad::constant({ns, nt}, std::move(m));
}

namespace {

Var unknown_term(const Var& feats, std::span<const int> known, std::span<const int> unknown,
                 double beta) {
  if (known.empty() || unknown.empty()) return ad::scalar(0.0);
  Var vk = ad::unit_normalize_rows(ad::gather_rows(feats, known));
  Var vu = ad::unit_normalize_rows(ad::gather_rows(feats, unknown));
  const double w = beta / (static_cast<double>(known.size()) * static_cast<double>(unknown.size()));
  return ad::scale(ad::sum(ad::square(ad::matmul_bt(vk, vu))), w);
}

}  // namespace

GraphLossTerms gma_loss(const Var& a, const Var& m, const Var& xi_s, const Var& xi_t,
                        const Var& feats_s, std::span<const int> known_s,
                        std::span<const int> unknown_s, const Var& feats_t,
                        std::span<const int> known_t, std::span<const int> unknown_t, double beta,
                        std::span<const double> match_mask) {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("gma_loss: " + what + " (A " + ad::shape_str(a.shape()) + ", M " +
                                ad::shape_str(m.shape()) + ", xi_s " + ad::shape_str(xi_s.shape()) +
                                ", xi_t " + ad::shape_str(xi_t.shape()) + ")");
  };
  if (a.shape().size() != 2) fail("A must be a matrix");
  const int ns = a.dim(0), nt = a.dim(1);
  if (m.shape() != a.shape()) fail("M shape differs from A");
  if (xi_s.shape() != ad::Shape{ns, ns}) fail("xi_s must be n_s x n_s");
  if (xi_t.shape() != ad::Shape{nt, nt}) fail("xi_t must be n_t x n_t");
  if (!match_mask.empty() && match_mask.size() != a.size()) fail("match mask size differs from A");

  GraphLossTerms t;
  Var sq = ad::square(ad::sub(a, m));
  if (match_mask.empty()) {
    t.matching = ad::mean(sq);
  } else {
    const double cnt = std::accumulate(match_mask.begin(), match_mask.end(), 0.0);
    t.matching = cnt > 0.0 ? ad::scale(ad::sum(ad::mul(sq, ad::constant(a.shape(), {match_mask.begin(), match_mask.end()}))), 1.0 / cnt)
                           : ad::scalar(0.0);
  }
  t.edge = ad::scale(ad::sum(ad::abs(ad::sub(ad::matmul(xi_s, a), ad::matmul(a, xi_t)))),
                     1.0 / (static_cast<double>(ns) * nt));
  t.unknown = ad::add(unknown_term(feats_t, known_t, unknown_t, beta),
                      unknown_term(feats_s, known_s, unknown_s, beta));
  t.total = ad::add(ad::add(t.matching, t.edge), t.unknown);
  return t;
}

// ---------------------------------------------------------------- adapter

GraphAdapter::GraphAdapter(const AdapterConfig& cfg, Rng& init)
    : attention(cfg.dim, cfg.heads, init),
      source_bank(cfg.num_base + 1, cfg.dim, cfg.alpha_mem),
      target_bank(cfg.num_base + 1, cfg.dim, cfg.alpha_mem),
      cfg_(cfg) {
  std::vector<double> eye(static_cast<std::size_t>(cfg.dim) * cfg.dim, 0.0);
  for (int i = 0; i < cfg.dim; ++i) eye[static_cast<std::size_t>(i) * cfg.dim + i] = 1.0;
  w_phi = ad::parameter({cfg.dim, cfg.dim}, std::move(eye));
}

std::vector<std::pair<std::string, Var>> GraphAdapter::named_parameters(
    const std::string& prefix) const {
  auto out = attention.named_parameters(prefix + ".attn");
  out.emplace_back(prefix + ".w_phi", w_phi);
  return out;
}

void GraphAdapter::add_domain_nodes(NodeSet& nodes, const DomainBatch& batch, Domain domain,
                                    MemoryBank& bank, bool update_banks, Rng& rng) {
  if (!batch.features.defined() || batch.features.dim(0) == 0) return;
  const int dim = batch.features.dim(1);
  const auto& f = batch.features.value();
  auto samples = sample_base_nodes(f, dim, batch.labels, batch.p, batch.entropy, cfg_.num_base,
                                   cfg_.ignore_id, cfg_.sampling, rng);
  auto novel = sample_novel_nodes(f, dim, batch.novel_candidates, batch.p, batch.entropy,
                                  cfg_.num_base, cfg_.sampling, rng);
  if (novel.has_prototype) samples.push_back(std::move(novel));

  for (const auto& s : samples) {
    auto add_rows = [&](const std::vector<int>& rows, NodeKind kind) {
      if (rows.empty()) return;
      nodes.append(ad::gather_rows(batch.features, rows),
                   std::vector<NodeInfo>(rows.size(), NodeInfo{s.class_id, domain, kind}));
    };
    add_rows(s.positives, NodeKind::positive);
    add_rows(s.negatives, NodeKind::negative);
    Var proto = ad::add(ad::mean_rows(ad::gather_rows(batch.features, s.members)),
                        ad::constant({1, dim}, s.noise));
    nodes.append(proto, {NodeInfo{s.class_id, domain, NodeKind::prototype}});

    if (update_banks) {
      std::vector<double> rows;
      for (const auto* set : {&s.positives, &s.negatives})
        for (int r : *set)
          rows.insert(rows.end(), f.begin() + static_cast<std::ptrdiff_t>(r) * dim,
                      f.begin() + static_cast<std::ptrdiff_t>(r + 1) * dim);
      if (rows.empty()) rows = s.mean;
      bank.update(s.class_id, rows);
    }
  }
}

NodeSet GraphAdapter::build_nodes(const DomainBatch& source, const DomainBatch& target,
                                  bool update_banks, Rng& rng) {
  NodeSet nodes(cfg_.dim);
  add_domain_nodes(nodes, source, Domain::source, source_bank, update_banks, rng);
  add_domain_nodes(nodes, target, Domain::target, target_bank, update_banks, rng);
  return nodes;
}

AdapterOutput GraphAdapter::run(const DomainBatch& source, const DomainBatch& target,
                                bool training, bool update_banks, Rng& rng) {
  AdapterOutput out;
  NodeSet nodes = build_nodes(source, target, update_banks, rng);
  out.completion = complete_missing_classes(nodes, source_bank, target_bank, rng);
  const int ns = nodes.count(Domain::source), nt = nodes.count(Domain::target);
  out.info_s = nodes.info(Domain::source);
  out.info_t = nodes.info(Domain::target);
  if (ns == 0 || nt == 0) {
    const Var zero = ad::scalar(0.0);
    out.loss = {zero, zero, zero, zero};
    return out;
  }
  auto att = graph_self_attention(nodes.joint_features(), ns, attention, cfg_.dropout, training, rng);
  Var vs = ad::slice_rows(att.features, 0, ns);
  Var vt = ad::slice_rows(att.features, ns, ns + nt);
  out.a = sinkhorn(affinity(vs, vt, w_phi), cfg_.sinkhorn_iters);

  std::vector<int> cls_s, cls_t, known_s, unknown_s, known_t, unknown_t;
  for (int i = 0; i < ns; ++i) {
    cls_s.push_back(out.info_s[i].class_id);
    (cls_s.back() == cfg_.num_base ? unknown_s : known_s).push_back(i);
  }
  for (int j = 0; j < nt; ++j) {
    cls_t.push_back(out.info_t[j].class_id);
    (cls_t.back() == cfg_.num_base ? unknown_t : known_t).push_back(j);
  }
  out.m = matching_labels(cls_s, cls_t, cfg_.num_base);
  out.xi_s = att.xi_s;
  out.xi_t = att.xi_t;

  std::vector<double> mask;
  if (!cfg_.match_all_kinds) {
    auto pixel = [](const NodeInfo& n) {
      return n.kind == NodeKind::positive || n.kind == NodeKind::negative;
    };
    mask.resize(static_cast<std::size_t>(ns) * nt);
    for (int i = 0; i < ns; ++i)
      for (int j = 0; j < nt; ++j)
        mask[static_cast<std::size_t>(i) * nt + j] = pixel(out.info_s[i]) && pixel(out.info_t[j]);
  }
  out.loss = gma_loss(out.a, out.m, out.xi_s, out.xi_t, vs, known_s, unknown_s, vt, known_t,
                      unknown_t, cfg_.beta, mask);
  out.valid = true;
  return out;
}

}  // namespace edapseg::gma
