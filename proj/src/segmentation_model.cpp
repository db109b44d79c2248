#include "edapseg/segmentation_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace edapseg::seg {

using ad::Var;

void ModelConfig::validate() const {
  if (num_base < 1) throw std::invalid_argument("model: num_base must be >= 1");
  for (int c : encoder_channels)
    if (c <= 0) throw std::invalid_argument("model: encoder channels must be positive");
  if (dim <= 0 || dim % (2 * attention.heads))
    throw std::invalid_argument("model: decoder dim " + std::to_string(dim) +
                                " not divisible by 2*heads");
  if (attention_blocks < 0) throw std::invalid_argument("model: negative attention block count");
}

Var images_to_tensor(std::span<const bench::ImageTensor> images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const int h = images[0].height, w = images[0].width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> v(images.size() * 3 * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height != h || images[n].width != w)
      throw std::invalid_argument("images_to_tensor: images differ in size");
    for (std::size_t q = 0; q < plane; ++q)
      for (int c = 0; c < 3; ++c) v[(n * 3 + c) * plane + q] = images[n].data[q * 3 + c];
  }
  return ad::constant({static_cast<int>(images.size()), 3, h, w}, std::move(v));
}

namespace {

Conv make_conv(int out, int in, int k, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
  std::vector<double> w(static_cast<std::size_t>(out) * in * k * k);
  for (auto& x : w) x = sd * rng.normal();
  return {ad::parameter({out, in, k, k}, std::move(w)), ad::parameter({out}, std::vector<double>(out, 0.0))};
}

Var copy_param(const Var& v) { return ad::parameter(v.shape(), v.value()); }

}  // namespace

SegModel::SegModel(const ModelConfig& cfg, Rng& init) : cfg_(cfg) {
  cfg_.attention.dim = cfg_.dim;
  cfg_.validate();
  int in = 3;
  for (int i = 0; i < 4; ++i) {
    encoder[i] = make_conv(cfg_.encoder_channels[i], in, 3, init);
    in = cfg_.encoder_channels[i];
  }
  for (int i = 0; i < 3; ++i) lateral[i] = make_conv(cfg_.dim, cfg_.encoder_channels[i + 1], 1, init);
  fuse = make_conv(cfg_.dim, cfg_.dim, 3, init);
  for (int i = 0; i < cfg_.attention_blocks; ++i) blocks.emplace_back(cfg_.attention, init);
  const int c = cfg_.num_outputs();
  std::vector<double> hw(static_cast<std::size_t>(cfg_.dim) * c);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg_.dim));
  for (auto& x : hw) x = sd * init.normal();
  head_w = ad::parameter({cfg_.dim, c}, std::move(hw));
  head_b = ad::parameter({c}, std::vector<double>(c, 0.0));
}

Var SegModel::encode_decode(const Var& images) const {
  if (images.shape().size() != 4 || images.dim(1) != 3)
    throw std::invalid_argument("encode_decode: expected [B,3,H,W], got " +
                                ad::shape_str(images.shape()));
  if (images.dim(2) % 16 || images.dim(3) % 16)
    throw std::invalid_argument("encode_decode: input " + std::to_string(images.dim(2)) + "x" +
                                std::to_string(images.dim(3)) + " not divisible by 16");
  std::array<Var, 4> f;
  Var x = images;
  for (int i = 0; i < 4; ++i) {
    x = ad::relu(ad::conv2d(x, encoder[i].w, encoder[i].b, 2, 1));
    f[i] = x;
  }
  Var s = ad::conv2d(f[1], lateral[0].w, lateral[0].b, 1, 0);
  s = ad::add(s, ad::upsample_nearest(ad::conv2d(f[2], lateral[1].w, lateral[1].b, 1, 0), 2));
  s = ad::add(s, ad::upsample_nearest(ad::conv2d(f[3], lateral[2].w, lateral[2].b, 1, 0), 4));
  Var fused = ad::relu(ad::conv2d(s, fuse.w, fuse.b, 1, 1));
  Var tokens = ad::nchw_to_tokens(fused);
  for (const auto& blk : blocks) tokens = blk.forward(tokens, images.dim(0));
  return tokens;
}

Var SegModel::classify(const Var& tokens, int batch, int height, int width) const {
  if (tokens.shape().size() != 2 || tokens.dim(1) != head_w.dim(0) ||
      tokens.dim(0) != batch * height * width)
    throw std::invalid_argument("classify: tokens " + ad::shape_str(tokens.shape()) +
                                " do not match head input " + std::to_string(head_w.dim(0)));
  return ad::tokens_to_nchw(ad::add_row_vector(ad::matmul(tokens, head_w), head_b), batch, height,
                            width);
}

SegModel::Output SegModel::forward(const Var& images) const {
  Output o;
  o.batch = images.dim(0);
  o.height = images.dim(2) / 4;
  o.width = images.dim(3) / 4;
  o.features = encode_decode(images);
  o.logits = classify(o.features, o.batch, o.height, o.width);
  return o;
}

Var SegModel::full_resolution(const Var& logits) { return ad::upsample_bilinear(logits, 4); }

std::vector<std::pair<std::string, Var>> SegModel::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  for (int i = 0; i < 4; ++i) {
    out.emplace_back("encoder" + std::to_string(i) + ".w", encoder[i].w);
    out.emplace_back("encoder" + std::to_string(i) + ".b", encoder[i].b);
  }
  for (int i = 0; i < 3; ++i) {
    out.emplace_back("decoder.lateral" + std::to_string(i) + ".w", lateral[i].w);
    out.emplace_back("decoder.lateral" + std::to_string(i) + ".b", lateral[i].b);
  }
  out.emplace_back("decoder.fuse.w", fuse.w);
  out.emplace_back("decoder.fuse.b", fuse.b);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto p = blocks[i].named_parameters("attention" + std::to_string(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_parameters()) n += v.size();
  return n;
}

SegModel SegModel::clone() const {
  SegModel m = *this;
  for (auto* c : {&m.encoder[0], &m.encoder[1], &m.encoder[2], &m.encoder[3], &m.lateral[0],
                  &m.lateral[1], &m.lateral[2], &m.fuse}) {
    c->w = copy_param(c->w);
    c->b = copy_param(c->b);
  }
  for (auto& blk : m.blocks) {
    blk.w_q = copy_param(blk.w_q);
    blk.w_k = copy_param(blk.w_k);
    blk.w_v = copy_param(blk.w_v);
    for (auto& mod : blk.modulation) {
      mod.delta1 = copy_param(mod.delta1);
      mod.delta2 = copy_param(mod.delta2);
      mod.bias = copy_param(mod.bias);
    }
  }
  m.head_w = copy_param(head_w);
  m.head_b = copy_param(head_b);
  return m;
}

void SegModel::set_requires_grad(bool on) {
  for (const auto& [name, v] : named_parameters()) v.node()->requires_grad = on;
  for (auto& blk : blocks)
    for (auto& mod : blk.modulation)
      for (auto* v : {&mod.delta1, &mod.delta2, &mod.bias}) v->node()->requires_grad = on;
}

void teacher_update(SegModel& teacher, const SegModel& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("teacher_update: alpha outside [0,1]");
  auto t = teacher.named_parameters();
  const auto s = student.named_parameters();
  if (t.size() != s.size()) throw std::invalid_argument("teacher_update: parameter count mismatch");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].first != s[i].first || t[i].second.shape() != s[i].second.shape())
      throw std::invalid_argument("teacher_update: shape mismatch at " + t[i].first);
    auto& tv = t[i].second.mutable_value();
    const auto& sv = s[i].second.value();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = alpha * tv[j] + (1.0 - alpha) * sv[j];
  }
}

BorderRows border_rows(int height) {
  return {static_cast<int>(std::lround(height * 15.0 / 512.0)),
          static_cast<int>(std::lround(height * 120.0 / 512.0))};
}

std::vector<PseudoLabel> pseudo_label(const Var& logits, int num_base, double threshold,
                                      int ignore_id) {
  if (logits.shape().size() != 4 || logits.dim(1) != num_base + 1)
    throw std::invalid_argument("pseudo_label: expected [B," + std::to_string(num_base + 1) +
                                ",H,W], got " + ad::shape_str(logits.shape()));
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("pseudo_label: threshold outside (0,1)");
  const int b = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const BorderRows border = border_rows(h);
  std::vector<PseudoLabel> out(static_cast<std::size_t>(b));
  std::vector<double> prob(static_cast<std::size_t>(c));
  for (int n = 0; n < b; ++n) {
    PseudoLabel& pl = out[n];
    pl.height = h;
    pl.width = w;
    pl.labels.assign(plane, ignore_id);
    long valid = 0, confident = 0;
    for (int y = border.top; y < h - border.bottom; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t q = static_cast<std::size_t>(y) * w + x;
        const double* base = logits.value().data() + static_cast<std::size_t>(n) * c * plane + q;
        double mx = -INFINITY;
        for (int k = 0; k < c; ++k) mx = std::max(mx, base[k * plane]);
        double z = 0.0;
        for (int k = 0; k < c; ++k) z += (prob[k] = std::exp(base[k * plane] - mx));
        int best = 0;
        for (int k = 1; k < num_base; ++k)
          if (prob[k] > prob[best]) best = k;
        ++valid;
        if (prob[best] / z >= threshold) {
          pl.labels[q] = best;
          ++confident;
        } else {
          pl.labels[q] = num_base;
        }
      }
    pl.weight = valid ? static_cast<double>(confident) / static_cast<double>(valid) : 0.0;
  }
  return out;
}

MixResult dacs_mix(const bench::ImageTensor& src_image, const bench::LabelMap& src_label,
                   const bench::ImageTensor& tgt_image, std::span<const int> tgt_labels,
                   int ignore_id, Rng& rng) {
  const int h = src_image.height, w = src_image.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (tgt_image.height != h || tgt_image.width != w || src_label.height != h ||
      src_label.width != w || tgt_labels.size() != n)
    throw std::invalid_argument("dacs_mix: crop sizes differ");
  std::vector<int> present;
  for (auto l : src_label.data)
    if (l != ignore_id) present.push_back(l);
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  for (std::size_t i = present.size(); i > 1; --i)
    std::swap(present[i - 1], present[rng.uniform_int(static_cast<int>(i))]);
  present.resize((present.size() + 1) / 2);
  std::sort(present.begin(), present.end());

  MixResult r;
  r.classes = present;
  r.image = tgt_image;
  r.labels.assign(tgt_labels.begin(), tgt_labels.end());
  r.mask.assign(n, 0);
  for (std::size_t q = 0; q < n; ++q) {
    const int l = src_label.data[q];
    if (!std::binary_search(present.begin(), present.end(), l)) continue;
    r.mask[q] = 1;
    r.labels[q] = l;
    for (int c = 0; c < 3; ++c) r.image.data[q * 3 + c] = src_image.data[q * 3 + c];
  }
  return r;
}

MixResult dacs_mix(const bench::ImageTensor& src_image, const bench::LabelMap& src_label,
                   const bench::ImageTensor& tgt_image, std::span<const int> tgt_labels,
                   int ignore_id, std::uint64_t seed) {
  Rng rng(seed);
  return dacs_mix(src_image, src_label, tgt_image, tgt_labels, ignore_id, rng);
}

RareClassSampling rare_class_sample(const std::vector<std::vector<long>>& pixels,
                                    double temperature, long min_pixels) {
  if (pixels.empty() || pixels[0].empty())
    throw std::invalid_argument("rare_class_sample: empty dataset");
  if (!(temperature > 0.0)) throw std::invalid_argument("rare_class_sample: temperature must be > 0");
  const std::size_t nc = pixels[0].size();
  std::vector<double> totals(nc, 0.0);
  double all = 0.0;
  for (const auto& img : pixels) {
    if (img.size() != nc) throw std::invalid_argument("rare_class_sample: ragged statistics");
    for (std::size_t c = 0; c < nc; ++c) {
      totals[c] += static_cast<double>(img[c]);
      all += static_cast<double>(img[c]);
    }
  }
  if (all <= 0.0) throw std::invalid_argument("rare_class_sample: no labelled pixels");
  RareClassSampling r;
  r.class_prob.resize(nc);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < nc; ++c) {
    r.class_prob[c] = -(totals[c] / all) / temperature;
    mx = std::max(mx, r.class_prob[c]);
  }
  double z = 0.0;
  for (auto& p : r.class_prob) z += (p = std::exp(p - mx));
  for (auto& p : r.class_prob) p /= z;
  bool any = false;
  for (const auto& img : pixels) {
    double wgt = 0.0;
    for (std::size_t c = 0; c < nc; ++c)
      if (img[c] >= min_pixels) wgt = std::max(wgt, r.class_prob[c]);
    r.image_weight.push_back(wgt);
    any = any || wgt > 0.0;
  }
  if (!any) std::fill(r.image_weight.begin(), r.image_weight.end(), 1.0);
  return r;
}

long scaled_min_pixels(int crop_h, int crop_w, long full_scale) {
  return std::lround(static_cast<double>(full_scale) * crop_h * crop_w / (512.0 * 512.0));
}

int weighted_index(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw std::invalid_argument("weighted_index: weights sum to zero");
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace edapseg::seg
