#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "edapseg/graph_adapter.hpp"
#include "test_support.hpp"

using namespace edapseg;
using namespace edapseg::gma;
using edapseg::testing::grad_check;
using edapseg::testing::matching_reference;
using edapseg::testing::random_param;
using edapseg::testing::random_values;
using edapseg::testing::sinkhorn_reference;

namespace {

double row_sum(const ad::Var& m, int i) {
  double s = 0.0;
  for (int j = 0; j < m.dim(1); ++j) s += m.value()[i * m.dim(1) + j];
  return s;
}

double col_sum(const ad::Var& m, int j) {
  double s = 0.0;
  for (int i = 0; i < m.dim(0); ++i) s += m.value()[i * m.dim(1) + j];
  return s;
}

ad::Var identity(int n) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return ad::constant({n, n}, v);
}

ad::Var permutation_matrix(const std::vector<int>& perm) {
  const int n = static_cast<int>(perm.size());
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[i * n + perm[i]] = 1.0;
  return ad::constant({n, n}, v);
}

std::vector<int> random_perm(int n, Rng& rng) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(p[i], p[rng.uniform_int(i + 1)]);
  return p;
}

}  // namespace

TEST_CASE("confidence and entropy of delta, uniform and hand-computed logits") {
  SUBCASE("scaled one-hot") {
    auto l = ad::constant({1, 4, 1, 1}, {100, 0, 0, 0});
    auto ce = pixel_confidence_entropy(l);
    CHECK(ce.p[0] == doctest::Approx(1.0));
    CHECK(ce.entropy[0] < 1e-30 + 1e-40);
  }
  SUBCASE("uniform") {
    auto l = ad::constant({1, 6, 1, 2}, std::vector<double>(12, 0.3));
    auto ce = pixel_confidence_entropy(l);
    for (int q = 0; q < 2; ++q) {
      CHECK(ce.p[q] == doctest::Approx(1.0 / 6));
      CHECK(ce.entropy[q] == doctest::Approx(std::log(6.0)));
    }
  }
  SUBCASE("(2, 1, 0, -1)") {
    auto l = ad::constant({1, 4, 1, 1}, {2, 1, 0, -1});
    auto ce = pixel_confidence_entropy(l);
    const double z = std::exp(2) + std::exp(1) + 1 + std::exp(-1);
    double h = 0.0;
    for (double x : {2.0, 1.0, 0.0, -1.0}) h -= std::exp(x) / z * (x - std::log(z));
    CHECK(ce.p[0] == doctest::Approx(std::exp(2) / z).epsilon(1e-12));
    CHECK(ce.entropy[0] == doctest::Approx(h).epsilon(1e-12));
  }
  SUBCASE("pixel order is (b, y, x) and entropy is bounded") {
    Rng rng(1);
    auto l = ad::constant({2, 3, 2, 3}, random_values(36, rng, 3.0));
    auto ce = pixel_confidence_entropy(l);
    REQUIRE(ce.p.size() == 12);
    for (double h : ce.entropy) {
      CHECK(h >= 0.0);
      CHECK(h <= std::log(3.0) + 1e-12);
    }
    // Pixel (b=1, y=1, x=2).
    const int q = 1 * 6 + 1 * 3 + 2;
    double mx = 0, z = 0;
    for (int c = 0; c < 3; ++c) z += std::exp(l.value()[(1 * 3 + c) * 6 + 5]);
    for (int c = 0; c < 3; ++c) mx = std::max(mx, std::exp(l.value()[(1 * 3 + c) * 6 + 5]) / z);
    CHECK(ce.p[q] == doctest::Approx(mx));
  }
  SUBCASE("non-finite logits are rejected") {
    auto l = ad::constant({1, 2, 1, 1}, {1.0, std::nan("")});
    CHECK_THROWS(pixel_confidence_entropy(l));
  }
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({0.9, 0.9, 0.1, 0.1}) == doctest::Approx(0.5));
  CHECK_THROWS(median({}));
}

TEST_CASE("base node sampling of a four-pixel class") {
  std::vector<double> f{0, 0, 1, 0, 0, 1, 1, 1};
  std::vector<int> labels{0, 0, 0, 0};
  std::vector<double> p{0.9, 0.9, 0.1, 0.1}, h{0.1, 0.1, 0.9, 0.9};
  Rng rng(2);
  auto s = sample_base_nodes(f, 2, labels, p, h, 5, 255, {}, rng);
  REQUIRE(s.size() == 1);
  CHECK(s[0].class_id == 0);
  CHECK(s[0].positives == std::vector<int>{0, 1});
  CHECK(s[0].negatives.empty());
  CHECK(s[0].has_prototype);
}

TEST_CASE("ignore pixels take no part in base sampling") {
  std::vector<double> f{0, 1, 2, 3, 4};
  std::vector<int> labels{255, 1, 1, 255, 1};
  std::vector<double> p{0.0, 0.8, 0.6, 1.0, 0.7}, h{0.0, 0.1, 0.3, 0.0, 0.2};
  Rng rng(3);
  auto s = sample_base_nodes(f, 1, labels, p, h, 5, 255, {}, rng);
  REQUIRE(s.size() == 1);
  CHECK(s[0].members == std::vector<int>{1, 2, 4});
  // Medians over the valid pixels only: tau_p = 0.7, tau_e = 0.2.
  CHECK(s[0].positives == std::vector<int>{1});
  CHECK(s[0].negatives.empty());
}

TEST_CASE("degenerate cluster with zero noise gives the shared feature as prototype") {
  std::vector<double> f(6 * 3);
  for (int i = 0; i < 6; ++i) f[i * 3] = 1.0, f[i * 3 + 1] = -2.0, f[i * 3 + 2] = 0.5;
  std::vector<int> labels(6, 2);
  std::vector<double> p{0.9, 0.8, 0.7, 0.3, 0.2, 0.1}, h{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  SamplingOptions opt;
  opt.k = 1;
  opt.noise_scale = 0.0;
  Rng rng(4);
  auto s = sample_base_nodes(f, 3, labels, p, h, 5, 255, opt, rng);
  REQUIRE(s.size() == 1);
  CHECK(s[0].mean == std::vector<double>{1.0, -2.0, 0.5});
  for (double n : s[0].noise) CHECK(n == 0.0);
  CHECK(s[0].positives.size() == 1);
}

TEST_CASE("k = 1 keeps the node nearest to the class mean") {
  std::vector<double> f{0.0, 10.0, 4.9, 5.2, 20.0, 1.0};
  std::vector<int> labels(6, 0);
  std::vector<double> p{0.9, 0.9, 0.9, 0.1, 0.1, 0.1}, h{0.01, 0.02, 0.03, 0.04, 0.05, 0.9};
  SamplingOptions opt;
  opt.k = 1;
  Rng rng(5);
  auto s = sample_base_nodes(f, 1, labels, p, h, 5, 255, opt, rng);
  REQUIRE(s.size() == 1);
  // Mean 6.85; qualifying positives are pixels 0, 1, 2 at distances 6.85, 3.15, 1.95.
  CHECK(s[0].mean[0] == doctest::Approx(6.85));
  CHECK(s[0].positives == std::vector<int>{2});
  CHECK(s[0].negatives.empty());
}

TEST_CASE("base sampling soundness over random inputs") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + rng.uniform_int(60), dim = 1 + rng.uniform_int(4), nb = 1 + rng.uniform_int(4);
    auto f = random_values(static_cast<std::size_t>(n) * dim, rng);
    std::vector<int> labels(n);
    std::vector<double> p(n), h(n);
    for (int i = 0; i < n; ++i) {
      labels[i] = rng.uniform() < 0.15 ? 255 : rng.uniform_int(nb);
      p[i] = rng.uniform();
      h[i] = rng.uniform();
    }
    SamplingOptions opt;
    opt.k = 1 + rng.uniform_int(6);
    auto samples = sample_base_nodes(f, dim, labels, p, h, nb, 255, opt, rng);

    std::vector<double> vp, vh;
    for (int i = 0; i < n; ++i)
      if (labels[i] != 255) vp.push_back(p[i]), vh.push_back(h[i]);
    if (vp.empty()) {
      CHECK(samples.empty());
      continue;
    }
    const double tp = median(vp), te = median(vh);
    for (const auto& s : samples) {
      std::set<int> pos(s.positives.begin(), s.positives.end());
      for (int i : s.negatives) CHECK(pos.count(i) == 0);
      CHECK(static_cast<int>(s.positives.size()) <= opt.k);
      CHECK(static_cast<int>(s.negatives.size()) <= opt.k);
      auto dist = [&](int i) {
        double d = 0;
        for (int j = 0; j < dim; ++j) d += (f[i * dim + j] - s.mean[j]) * (f[i * dim + j] - s.mean[j]);
        return d;
      };
      for (bool positive : {true, false}) {
        std::vector<double> ds;
        for (int i = 0; i < n; ++i)
          if (labels[i] == s.class_id && h[i] < te && ((p[i] > tp) == positive)) ds.push_back(dist(i));
        std::sort(ds.begin(), ds.end());
        const auto& kept = positive ? s.positives : s.negatives;
        CHECK(kept.size() == std::min<std::size_t>(ds.size(), opt.k));
        for (int i : kept) {
          CHECK(labels[i] == s.class_id);
          CHECK(dist(i) <= ds[kept.size() - 1] + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("novel node sampling splits at the median entropy") {
  std::vector<double> f{0, 1, 2, 3};
  std::vector<int> cand{0, 1, 2, 3};
  std::vector<double> p(4, 0.5), h{0.1, 0.2, 0.8, 0.9};
  Rng rng(7);
  auto s = sample_novel_nodes(f, 1, cand, p, h, 5, {}, rng);
  CHECK(s.class_id == 5);
  CHECK(s.positives == std::vector<int>{0, 1});
  CHECK(s.negatives == std::vector<int>{2, 3});

  SUBCASE("equal entropies give empty sets and the candidate mean") {
    std::vector<double> flat(4, 0.4);
    SamplingOptions opt;
    opt.noise_scale = 0.0;
    auto e = sample_novel_nodes(f, 1, cand, p, flat, 5, opt, rng);
    CHECK(e.positives.empty());
    CHECK(e.negatives.empty());
    REQUIRE(e.has_prototype);
    CHECK(e.mean[0] == doctest::Approx(1.5));
  }
  SUBCASE("fewer than two candidates") {
    std::vector<int> one{2};
    auto e = sample_novel_nodes(f, 1, one, p, h, 5, {}, rng);
    CHECK_FALSE(e.has_prototype);
    CHECK(e.positives.empty());
  }
}

TEST_CASE("novel node selection is invariant to pixel order") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + rng.uniform_int(30), dim = 2;
    auto f = random_values(static_cast<std::size_t>(n) * dim, rng);
    std::vector<double> p(n), h(n);
    for (int i = 0; i < n; ++i) p[i] = rng.uniform(), h[i] = rng.uniform();
    std::vector<int> cand(n);
    std::iota(cand.begin(), cand.end(), 0);
    SamplingOptions opt;
    opt.k = 3;
    Rng r1(1), r2(1);
    auto a = sample_novel_nodes(f, dim, cand, p, h, 5, opt, r1);

    auto perm = random_perm(n, rng);  // new row i holds old row perm[i]
    std::vector<double> f2(f.size()), p2(n), h2(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < dim; ++j) f2[i * dim + j] = f[perm[i] * dim + j];
      p2[i] = p[perm[i]];
      h2[i] = h[perm[i]];
    }
    auto b = sample_novel_nodes(f2, dim, cand, p2, h2, 5, opt, r2);
    auto map_back = [&](const std::vector<int>& rows) {
      std::set<int> s;
      for (int r : rows) s.insert(perm[r]);
      return s;
    };
    CHECK(map_back(b.positives) == std::set<int>(a.positives.begin(), a.positives.end()));
    CHECK(map_back(b.negatives) == std::set<int>(a.negatives.begin(), a.negatives.end()));
  }
}

TEST_CASE("memory bank update rules") {
  SUBCASE("alpha 1 tracks the batch mean") {
    MemoryBank bank(2, 2, 1.0);
    bank.update(0, std::vector<double>{1, 2, 3, 4});
    bank.update(0, std::vector<double>{5, 6});
    CHECK(bank.at(0).mean == std::vector<double>{5, 6});
    CHECK_FALSE(bank.at(1).initialized);
  }
  SUBCASE("alpha 0 freezes after initialisation") {
    MemoryBank bank(2, 2, 0.0);
    bank.update(1, std::vector<double>{1, 2, 3, 4});
    CHECK(bank.at(1).mean == std::vector<double>{2, 3});
    CHECK(bank.at(1).var == std::vector<double>{1, 1});
    bank.update(1, std::vector<double>{9, 9});
    CHECK(bank.at(1).mean == std::vector<double>{2, 3});
    CHECK(bank.at(1).count == 2);
  }
  SUBCASE("empty update leaves the entry untouched") {
    MemoryBank bank(1, 2, 0.5);
    bank.update(0, std::vector<double>{});
    CHECK_FALSE(bank.at(0).initialized);
  }
  SUBCASE("closed form for constant input") {
    for (double alpha : {0.0, 0.5, 0.99, 1.0}) {
      MemoryBank bank(1, 3, alpha);
      const std::vector<double> m0{1.0, -2.0, 4.0}, c{0.5, 0.25, -3.0};
      bank.update(0, m0);
      for (int t = 1; t <= 50; ++t) {
        bank.update(0, c);
        for (int j = 0; j < 3; ++j)
          CHECK(std::fabs(bank.at(0).mean[j] - (c[j] + std::pow(1 - alpha, t) * (m0[j] - c[j]))) <
                1e-10);
      }
    }
  }
  SUBCASE("flatten round trip and validation") {
    MemoryBank bank(3, 2, 0.9), other(3, 2, 0.9);
    bank.update(2, std::vector<double>{1, 2, 3, 5});
    other.unflatten(bank.flatten());
    CHECK(other == bank);
    CHECK_THROWS(other.unflatten(std::vector<double>{1, 2}));
    CHECK_THROWS(MemoryBank(2, 2, 1.5));
    CHECK_THROWS(bank.at(3));
  }
}

TEST_CASE("completion of missing classes") {
  MemoryBank src(6, 2, 0.5), tgt(6, 2, 0.5);
  auto node = [](int cls, Domain d, double x) {
    return std::pair{ad::constant({1, 2}, {x, x}), std::vector<NodeInfo>{{cls, d, NodeKind::positive}}};
  };
  SUBCASE("nothing missing") {
    NodeSet ns(2);
    auto [a, ai] = node(1, Domain::source, 0.1);
    auto [b, bi] = node(1, Domain::target, 0.2);
    ns.append(a, ai);
    ns.append(b, bi);
    Rng rng(9);
    auto rep = complete_missing_classes(ns, src, tgt, rng);
    CHECK(rep.synthesized == 0);
    CHECK(rep.skipped == 0);
    CHECK(ns.size() == 2);
  }
  SUBCASE("zero-std counterpart gives the own-bank mean") {
    src.update_stats(3, std::vector<double>{1, 1}, std::vector<double>{0, 0});
    tgt.update_stats(3, std::vector<double>{7, -7}, std::vector<double>{4, 4});
    NodeSet ns(2);
    auto [a, ai] = node(3, Domain::source, 0.1);
    ns.append(a, ai);
    Rng rng(10);
    auto rep = complete_missing_classes(ns, src, tgt, rng);
    CHECK(rep.synthesized == 1);
    REQUIRE(ns.count(Domain::target) == 1);
    CHECK(ns.info(Domain::target)[0] == NodeInfo{3, Domain::target, NodeKind::synthesized});
    CHECK(ns.features(Domain::target).value() == std::vector<double>{7, -7});
  }
  SUBCASE("noise uses the counterpart std and is reproducible") {
    src.update_stats(2, std::vector<double>{0, 0}, std::vector<double>{4, 0});
    tgt.update_stats(2, std::vector<double>{0, 0}, std::vector<double>{0, 0});
    auto run = [&](std::uint64_t seed) {
      NodeSet ns(2);
      auto [a, ai] = node(2, Domain::source, 0.1);
      ns.append(a, ai);
      Rng rng(seed);
      complete_missing_classes(ns, src, tgt, rng);
      return ns.features(Domain::target).value();
    };
    auto x = run(11), y = run(11);
    CHECK(x == y);
    CHECK(x[1] == 0.0);  // zero std in the second dimension
    CHECK(x[0] != 0.0);
  }
  SUBCASE("uninitialised banks are skipped") {
    NodeSet ns(2);
    auto [a, ai] = node(4, Domain::source, 0.1);
    ns.append(a, ai);
    Rng rng(12);
    auto rep = complete_missing_classes(ns, src, tgt, rng);
    CHECK(rep.synthesized == 0);
    CHECK(rep.skipped == 1);
    CHECK(ns.count(Domain::target) == 0);
  }
}

TEST_CASE("node set keeps source rows first") {
  NodeSet ns(1);
  ns.append(ad::constant({1, 1}, {2}), {{0, Domain::target, NodeKind::positive}});
  ns.append(ad::constant({2, 1}, {0, 1}),
            {{0, Domain::source, NodeKind::positive}, {1, Domain::source, NodeKind::negative}});
  CHECK(ns.joint_features().value() == std::vector<double>{0, 1, 2});
  CHECK(ns.joint_info()[2].domain == Domain::target);
  CHECK(ns.count(Domain::source, 1, NodeKind::negative) == 1);
  CHECK_THROWS(ns.append(ad::constant({1, 2}, {0, 0}), {{0, Domain::source, NodeKind::positive}}));
  CHECK_THROWS(ns.append(ad::constant({2, 1}, {0, 0}), {{0, Domain::source, NodeKind::positive},
                                                        {0, Domain::target, NodeKind::positive}}));
}

TEST_CASE("graph self-attention basics") {
  Rng rng(13);
  GraphAttentionWeights w(4, 1, rng);
  SUBCASE("zero value projection is the identity") {
    auto z = w;
    z.w_v = ad::parameter({4, 4}, std::vector<double>(16, 0.0));
    auto x = random_param({5, 4}, rng);
    auto r = graph_self_attention(x, 2, z, 0.0, false, rng);
    CHECK(r.features.value() == x.value());
  }
  SUBCASE("single node") {
    auto x = random_param({1, 4}, rng);
    auto r = graph_self_attention(x, 1, w, 0.0, false, rng);
    CHECK(r.xi.value() == std::vector<double>{1.0});
    CHECK(r.xi_s.value() == std::vector<double>{1.0});
    CHECK_FALSE(r.xi_t.defined());
  }
  SUBCASE("edge affinities are row stochastic without dropout") {
    for (int heads : {1, 2}) {
      GraphAttentionWeights wh(4, heads, rng);
      auto x = random_param({7, 4}, rng, 2.0);
      auto r = graph_self_attention(x, 3, wh, 0.1, false, rng);
      for (const auto* m : {&r.xi, &r.xi_s, &r.xi_t})
        for (int i = 0; i < m->dim(0); ++i) {
          CHECK(std::fabs(row_sum(*m, i) - 1.0) < 1e-5);
          for (int j = 0; j < m->dim(1); ++j) CHECK(m->value()[i * m->dim(1) + j] >= 0.0);
        }
      CHECK(r.xi_s.shape() == ad::Shape{3, 3});
      CHECK(r.xi_t.shape() == ad::Shape{4, 4});
    }
  }
  SUBCASE("dropout applies only in training") {
    auto x = random_param({6, 4}, rng);
    auto eval = graph_self_attention(x, 3, w, 0.5, false, rng);
    auto train = graph_self_attention(x, 3, w, 0.5, true, rng);
    for (std::size_t i = 0; i < eval.xi_s.size(); ++i) {
      const double t = train.xi_s.value()[i], e = eval.xi_s.value()[i];
      CHECK((t == 0.0 || t == doctest::Approx(2.0 * e)));
    }
    CHECK(train.features.value() == eval.features.value());
  }
  SUBCASE("empty set is rejected") {
    CHECK_THROWS(graph_self_attention(ad::zeros({0, 4}), 0, w, 0.0, false, rng));
  }
}

TEST_CASE("graph self-attention gradient") {
  Rng rng(14);
  GraphAttentionWeights w(4, 2, rng);
  auto x = random_param({5, 4}, rng);
  std::vector<double> c(20);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sin(0.7 * i + 0.3);
  auto loss = [&] {
    Rng r(0);
    auto g = graph_self_attention(x, 2, w, 0.0, false, r);
    return ad::add(ad::sum(ad::mul(g.features, ad::constant({5, 4}, c))),
                   ad::add(ad::sum(ad::square(g.xi_s)), ad::sum(ad::square(g.xi_t))));
  };
  auto r = grad_check(loss, {x, w.w_q, w.w_k, w.w_v});
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
}

TEST_CASE("affinity is a bilinear form") {
  Rng rng(15);
  auto vs = random_param({3, 4}, rng), vt = random_param({2, 4}, rng), w = random_param({4, 4}, rng);
  auto a = affinity(vs, vt, w);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k)
        for (int l = 0; l < 4; ++l)
          s += vs.value()[i * 4 + k] * w.value()[k * 4 + l] * vt.value()[j * 4 + l];
      CHECK(std::fabs(a.value()[i * 2 + j] - s) < 1e-6);
    }
  auto plain = affinity(vs, vt, identity(4));
  auto dot = ad::matmul_bt(vs, vt);
  CHECK(plain.value() == dot.value());
  auto zero = affinity(vs, vt, ad::zeros({4, 4}));
  for (double v : zero.value()) CHECK(v == 0.0);
  CHECK_THROWS(affinity(vs, random_param({2, 3}, rng), w));
}

TEST_CASE("sinkhorn fixed points and oracle") {
  SUBCASE("all-ones 2x2") {
    auto a = sinkhorn(ad::constant({2, 2}, {1, 1, 1, 1}), 5);
    for (double v : a.value()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("doubly stochastic after exp is a fixed point") {
    auto once = sinkhorn(ad::constant({3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5}), 1);
    auto many = sinkhorn(ad::constant({3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5}), 30);
    for (std::size_t i = 0; i < once.size(); ++i)
      CHECK(std::fabs(once.value()[i] - many.value()[i]) < 1e-6);
  }
  SUBCASE("[[2, 0], [0, 2]] against the loop oracle") {
    auto a = sinkhorn(ad::constant({2, 2}, {2, 0, 0, 2}), 20);
    auto ref = sinkhorn_reference({2, 0, 0, 2}, 2, 2, 20);
    for (int i = 0; i < 4; ++i) CHECK(std::fabs(a.value()[i] - ref[i]) < 1e-8);
  }
  SUBCASE("argument validation") {
    CHECK_THROWS(sinkhorn(ad::constant({1, 1}, {1}), 0));
    CHECK_THROWS(sinkhorn(ad::constant({1, 2}, {1, INFINITY}), 3));
  }
}

TEST_CASE("sinkhorn marginals on random square and rectangular inputs") {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const int ns = 2 + rng.uniform_int(15), nt = trial % 2 ? ns : 2 + rng.uniform_int(15);
    auto raw = ad::constant({ns, nt}, random_values(static_cast<std::size_t>(ns) * nt, rng, 3.0));
    auto a = sinkhorn(raw, 20);
    for (int i = 0; i < ns; ++i) CHECK(std::fabs(row_sum(a, i) - 1.0) < 1e-4);
    const double col_target = static_cast<double>(ns) / nt;
    for (int j = 0; j < nt; ++j)
      CHECK(std::fabs(col_sum(a, j) - col_target) < (ns == nt ? 1e-4 : 1e-3));
    for (double v : a.value()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("matching labels") {
  std::vector<int> s{0, 1}, t{0, 1};
  CHECK(matching_labels(s, t, 5).value() == std::vector<double>{1, 0, 0, 1});
  std::vector<int> su{5, 1, 5}, tu{5, 1};
  CHECK(matching_labels(su, tu, 5).value() == std::vector<double>{0, 0, 0, 1, 0, 0});
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(1 + rng.uniform_int(10)), b(1 + rng.uniform_int(10));
    for (auto& x : a) x = rng.uniform_int(4);
    for (auto& x : b) x = rng.uniform_int(4);
    CHECK(matching_labels(a, b, 3).value() == matching_reference(a, b, 3));
  }
}

TEST_CASE("graph loss zero points and hand values") {
  SUBCASE("all terms vanish") {
    auto eye = identity(2);
    auto feats = ad::constant({2, 2}, {1, 0, 0, 1});  // known row 0, unknown row 1
    std::vector<int> k{0}, u{1};
    auto t = gma_loss(eye, eye, eye, eye, feats, k, u, feats, k, u, 0.1);
    CHECK(std::fabs(t.total.item()) < 1e-10);
  }
  SUBCASE("identical known and unknown unit features") {
    auto a = ad::constant({2, 2}, {0.5, 0.5, 0.5, 0.5});
    auto feats = ad::constant({2, 2}, {0.6, 0.8, 0.6, 0.8});
    std::vector<int> k{0}, u{1}, none{};
    auto both = gma_loss(a, a, identity(2), identity(2), feats, k, u, feats, k, u, 0.1);
    CHECK(both.unknown.item() == doctest::Approx(0.2).epsilon(1e-12));
    auto one = gma_loss(a, a, identity(2), identity(2), feats, k, none, feats, k, u, 0.1);
    CHECK(one.unknown.item() == doctest::Approx(0.1).epsilon(1e-12));
  }
  SUBCASE("edge term vanishes for permuted affinities") {
    Rng rng(18);
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 + rng.uniform_int(6);
      auto P = permutation_matrix(random_perm(n, rng));
      auto xs = ad::softmax_rows(random_param({n, n}, rng));
      auto xt = ad::matmul(ad::matmul(ad::transpose(P), xs), P);
      auto f = random_param({n, 3}, rng);
      std::vector<int> none{};
      auto t = gma_loss(P, P, xs, xt, f, none, none, f, none, none, 0.1);
      CHECK(std::fabs(t.edge.item()) < 1e-10);
    }
  }
  SUBCASE("matching and edge terms against direct sums") {
    Rng rng(19);
    auto a = ad::constant({2, 3}, random_values(6, rng));
    auto m = ad::constant({2, 3}, {1, 0, 0, 0, 1, 0});
    auto xs = ad::constant({2, 2}, random_values(4, rng));
    auto xt = ad::constant({3, 3}, random_values(9, rng));
    auto f = random_param({3, 2}, rng);
    std::vector<int> none{};
    auto t = gma_loss(a, m, xs, xt, f, none, none, f, none, none, 0.1);
    double match = 0.0, edge = 0.0;
    const auto &A = a.value(), &M = m.value(), &S = xs.value(), &T = xt.value();
    for (int i = 0; i < 6; ++i) match += (A[i] - M[i]) * (A[i] - M[i]) / 6.0;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        double l = 0.0, r = 0.0;
        for (int k = 0; k < 2; ++k) l += S[i * 2 + k] * A[k * 3 + j];
        for (int k = 0; k < 3; ++k) r += A[i * 3 + k] * T[k * 3 + j];
        edge += std::fabs(l - r) / 6.0;
      }
    CHECK(t.matching.item() == doctest::Approx(match).epsilon(1e-12));
    CHECK(t.edge.item() == doctest::Approx(edge).epsilon(1e-12));
    CHECK(t.total.item() == doctest::Approx(match + edge).epsilon(1e-12));
  }
  SUBCASE("shape errors name the dimensions") {
    auto a = ad::zeros({2, 3});
    std::vector<int> none{};
    try {
      gma_loss(a, a, identity(3), identity(3), a, none, none, a, none, none, 0.1);
      FAIL("accepted");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    }
  }
}

TEST_CASE("unknown term is zero exactly when known and unknown features are orthogonal") {
  Rng rng(20);
  for (int trial = 0; trial < 50; ++trial) {
    // Known rows live in the first two coordinates, unknown rows in the last two.
    const int nk = 1 + rng.uniform_int(3), nu = 1 + rng.uniform_int(3);
    std::vector<double> f;
    for (int i = 0; i < nk; ++i) f.insert(f.end(), {rng.normal(), rng.normal(), 0.0, 0.0});
    for (int i = 0; i < nu; ++i) f.insert(f.end(), {0.0, 0.0, rng.normal(), rng.normal()});
    std::vector<int> k(nk), u(nu);
    std::iota(k.begin(), k.end(), 0);
    std::iota(u.begin(), u.end(), nk);
    auto feats = ad::constant({nk + nu, 4}, f);
    auto a = ad::zeros({1, 1});
    auto orth = gma_loss(a, a, identity(1), identity(1), feats, k, u, feats, {}, {}, 0.1);
    CHECK(std::fabs(orth.unknown.item()) < 1e-8);
    // Any overlap between one known and one unknown row makes the term positive.
    f[(nk + rng.uniform_int(nu)) * 4 + rng.uniform_int(2)] = 0.5;
    auto mixed = gma_loss(a, a, identity(1), identity(1), ad::constant({nk + nu, 4}, f), k, u,
                          feats, {}, {}, 0.1);
    bool overlap = false;
    for (int i = 0; i < nk; ++i)
      for (int j = nk; j < nk + nu; ++j) {
        double d = 0;
        for (int c = 0; c < 4; ++c) d += f[i * 4 + c] * f[j * 4 + c];
        overlap |= std::fabs(d) > 1e-8;
      }
    CHECK((mixed.unknown.item() > 1e-8) == overlap);
  }
}

TEST_CASE("match mask restricts the matching term") {
  auto a = ad::constant({1, 2}, {0.2, 0.8});
  auto m = ad::constant({1, 2}, {1, 0});
  std::vector<double> mask{1, 0};
  std::vector<int> none{};
  auto f = ad::zeros({2, 1});
  auto t = gma_loss(a, m, identity(1), identity(2), f, none, none, f, none, none, 0.1, mask);
  CHECK(t.matching.item() == doctest::Approx(0.64));
  CHECK_THROWS(gma_loss(a, m, identity(1), identity(2), f, none, none, f, none, none, 0.1,
                        std::vector<double>{1}));
}

TEST_CASE("gradient through affinity, standardisation, sinkhorn and graph loss") {
  Rng rng(21);
  auto vs = random_param({3, 4}, rng), vt = random_param({4, 4}, rng);
  auto w = random_param({4, 4}, rng, 0.5);
  auto xs = random_param({3, 3}, rng), xt = random_param({4, 4}, rng);
  std::vector<int> cs{0, 1, 5}, ct{1, 0, 5, 2};
  std::vector<int> ks{0, 1}, us{2}, kt{0, 1, 3}, ut{2};
  auto loss = [&] {
    auto a = sinkhorn(affinity(vs, vt, w), 20);
    return gma_loss(a, matching_labels(cs, ct, 5), ad::softmax_rows(xs), ad::softmax_rows(xt), vs,
                    ks, us, vt, kt, ut, 0.1)
        .total;
  };
  auto r = grad_check(loss, {vs, vt, w, xs, xt});
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
}

TEST_CASE("graph pipeline is equivariant to node order") {
  Rng rng(22);
  const int ns = 4, nt = 5, d = 4;
  GraphAttentionWeights w(d, 1, rng);
  auto wphi = random_param({d, d}, rng, 0.5);
  auto fs = random_values(ns * d, rng), ft = random_values(nt * d, rng);
  std::vector<int> cs{0, 1, 2, 5}, ct{1, 0, 5, 2, 1};

  auto run = [&](const std::vector<int>& ps, const std::vector<int>& pt) {
    std::vector<double> x;
    std::vector<int> cls_s, cls_t, ks, us, kt, ut;
    for (int i = 0; i < ns; ++i) {
      x.insert(x.end(), fs.begin() + ps[i] * d, fs.begin() + (ps[i] + 1) * d);
      cls_s.push_back(cs[ps[i]]);
      (cls_s.back() == 5 ? us : ks).push_back(i);
    }
    for (int j = 0; j < nt; ++j) {
      x.insert(x.end(), ft.begin() + pt[j] * d, ft.begin() + (pt[j] + 1) * d);
      cls_t.push_back(ct[pt[j]]);
      (cls_t.back() == 5 ? ut : kt).push_back(j);
    }
    Rng r(0);
    auto g = graph_self_attention(ad::constant({ns + nt, d}, x), ns, w, 0.0, false, r);
    auto vs = ad::slice_rows(g.features, 0, ns), vt = ad::slice_rows(g.features, ns, ns + nt);
    auto a = sinkhorn(affinity(vs, vt, wphi), 20);
    auto m = matching_labels(cls_s, cls_t, 5);
    auto loss = gma_loss(a, m, g.xi_s, g.xi_t, vs, ks, us, vt, kt, ut, 0.1);
    return std::tuple{a, m, g.xi_s, loss.total.item()};
  };
  std::vector<int> id_s(ns), id_t(nt);
  std::iota(id_s.begin(), id_s.end(), 0);
  std::iota(id_t.begin(), id_t.end(), 0);
  auto [a0, m0, x0, l0] = run(id_s, id_t);
  for (int trial = 0; trial < 10; ++trial) {
    auto ps = random_perm(ns, rng), pt = random_perm(nt, rng);
    auto [a1, m1, x1, l1] = run(ps, pt);
    CHECK(std::fabs(l1 - l0) < 1e-10);
    for (int i = 0; i < ns; ++i) {
      for (int j = 0; j < nt; ++j) {
        CHECK(std::fabs(a1.value()[i * nt + j] - a0.value()[ps[i] * nt + pt[j]]) < 1e-10);
        CHECK(m1.value()[i * nt + j] == m0.value()[ps[i] * nt + pt[j]]);
      }
      for (int k = 0; k < ns; ++k)
        CHECK(std::fabs(x1.value()[i * ns + k] - x0.value()[ps[i] * ns + ps[k]]) < 1e-10);
    }
  }
}

TEST_CASE("adapter run produces a consistent graph") {
  Rng init(23);
  AdapterConfig cfg;
  cfg.dim = 4;
  cfg.num_base = 3;
  cfg.sampling.k = 2;
  GraphAdapter adapter(cfg, init);
  CHECK(adapter.named_parameters("graph").size() == 4);

  auto make_batch = [&](Rng& rng, bool with_unknown) {
    DomainBatch b;
    const int n = 24;
    b.features = ad::constant({n, 4}, random_values(n * 4, rng));
    for (int i = 0; i < n; ++i) {
      b.labels.push_back(i % 4 == 3 ? 255 : i % 3);
      b.p.push_back(rng.uniform());
      b.entropy.push_back(rng.uniform());
      if (with_unknown && i % 4 == 3) b.novel_candidates.push_back(i);
    }
    return b;
  };
  Rng data(24);
  auto src = make_batch(data, false), tgt = make_batch(data, true);
  Rng rng(25);
  auto out = adapter.run(src, tgt, false, true, rng);
  REQUIRE(out.valid);
  const int ns = static_cast<int>(out.info_s.size()), nt = static_cast<int>(out.info_t.size());
  CHECK(out.a.shape() == ad::Shape{ns, nt});
  for (int i = 0; i < ns; ++i) CHECK(std::fabs(row_sum(out.a, i) - 1.0) < 1e-4);
  std::vector<int> cs, ct;
  for (auto& n : out.info_s) cs.push_back(n.class_id);
  for (auto& n : out.info_t) ct.push_back(n.class_id);
  CHECK(out.m.value() == matching_reference(cs, ct, 3));
  for (int c = 0; c < 3; ++c) {
    CHECK(adapter.source_bank.at(c).initialized);
    CHECK(adapter.target_bank.at(c).initialized);
  }
  CHECK(adapter.target_bank.at(3).initialized);
  CHECK(std::isfinite(out.loss.total.item()));

  SUBCASE("without bank updates the banks stay fixed") {
    auto before_s = adapter.source_bank, before_t = adapter.target_bank;
    Rng r2(26);
    adapter.run(src, tgt, true, false, r2);
    CHECK(adapter.source_bank == before_s);
    CHECK(adapter.target_bank == before_t);
  }
  SUBCASE("a class missing from one domain is synthesized from the banks") {
    auto src2 = src;
    for (auto& l : src2.labels)
      if (l == 2) l = 255;
    Rng r3(27);
    auto again = adapter.run(src2, tgt, false, true, r3);
    int synth = 0;
    for (auto& n : again.info_s) synth += n.class_id == 2 && n.kind == NodeKind::synthesized;
    CHECK(synth == 1);
    CHECK(again.completion.synthesized >= 1);
  }
  SUBCASE("an empty domain with cold banks yields an invalid output with zero loss") {
    Rng r4(28), init2(29);
    GraphAdapter fresh(cfg, init2);
    DomainBatch empty;
    auto o = fresh.run(src, empty, false, false, r4);
    CHECK_FALSE(o.valid);
    CHECK(o.loss.total.item() == 0.0);
  }
}
