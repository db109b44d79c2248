#include "edapseg/training_engine.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace edapseg::train {

using ad::Var;

// ---------------------------------------------------------------- config

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw std::invalid_argument("expected a finite number, got '" + s + "'");
  return v;
}

template <typename T>
T parse_integer(const std::string& s) {
  T v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("expected an integer, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

struct Field {
  const char* name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define EDAPSEG_DOUBLE(key) \
  Field{#key, [](const TrainConfig& c) { return fmt_double(c.key); }, \
        [](TrainConfig& c, const std::string& s) { c.key = parse_double(s); }}
#define EDAPSEG_INT(key) \
  Field{#key, [](const TrainConfig& c) { return std::to_string(c.key); }, \
        [](TrainConfig& c, const std::string& s) { c.key = parse_integer<int>(s); }}
#define EDAPSEG_BOOL(key) \
  Field{#key, [](const TrainConfig& c) { return std::string(c.key ? "true" : "false"); }, \
        [](TrainConfig& c, const std::string& s) { c.key = parse_bool(s); }}
#define EDAPSEG_STRING(key) \
  Field{#key, [](const TrainConfig& c) { return c.key; }, \
        [](TrainConfig& c, const std::string& s) { c.key = s; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      EDAPSEG_DOUBLE(gamma),
      EDAPSEG_DOUBLE(beta),
      EDAPSEG_DOUBLE(alpha_teacher),
      EDAPSEG_DOUBLE(alpha_mem),
      EDAPSEG_STRING(attention),
      EDAPSEG_STRING(sort_mode),
      EDAPSEG_DOUBLE(tau_sort),
      EDAPSEG_INT(heads),
      EDAPSEG_INT(attention_blocks),
      EDAPSEG_INT(dim),
      EDAPSEG_INT(k),
      EDAPSEG_INT(sinkhorn_iters),
      EDAPSEG_DOUBLE(dropout),
      EDAPSEG_DOUBLE(prototype_noise),
      EDAPSEG_INT(graph_heads),
      EDAPSEG_INT(graph_stride),
      EDAPSEG_BOOL(match_all_kinds),
      EDAPSEG_DOUBLE(pseudo_threshold),
      EDAPSEG_DOUBLE(rcs_temperature),
      EDAPSEG_BOOL(rare_class_sampling),
      EDAPSEG_DOUBLE(lr),
      EDAPSEG_DOUBLE(decoder_lr_mult),
      EDAPSEG_DOUBLE(weight_decay),
      EDAPSEG_INT(warmup_steps),
      EDAPSEG_INT(total_steps),
      EDAPSEG_INT(crop_size),
      EDAPSEG_INT(batch_size),
      Field{"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
            [](TrainConfig& c, const std::string& s) { c.seed = parse_integer<std::uint64_t>(s); }},
  };
  return f;
}

#undef EDAPSEG_DOUBLE
#undef EDAPSEG_INT
#undef EDAPSEG_BOOL
#undef EDAPSEG_STRING

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("config: " + what);
}

}  // namespace

void TrainConfig::validate() const {
  require(gamma >= 0.0, "gamma must be >= 0");
  require(beta >= 0.0, "beta must be >= 0");
  require(alpha_teacher >= 0.0 && alpha_teacher <= 1.0, "alpha_teacher outside [0,1]");
  require(alpha_mem >= 0.0 && alpha_mem <= 1.0, "alpha_mem outside [0,1]");
  ema::attention_kind_from_string(attention);
  ema::sort_mode_from_string(sort_mode);
  require(tau_sort > 0.0, "tau_sort must be > 0");
  require(heads >= 1 && dim >= 2 && dim % (2 * heads) == 0, "dim must be divisible by 2*heads");
  require(attention_blocks >= 0, "attention_blocks must be >= 0");
  require(k >= 1, "k must be >= 1");
  require(sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout outside [0,1)");
  require(prototype_noise >= 0.0, "prototype_noise must be >= 0");
  require(graph_heads >= 1 && dim % graph_heads == 0, "dim must be divisible by graph_heads");
  require(graph_stride >= 1, "graph_stride must be >= 1");
  require(pseudo_threshold > 0.0 && pseudo_threshold < 1.0, "pseudo_threshold outside (0,1)");
  require(rcs_temperature > 0.0, "rcs_temperature must be > 0");
  require(lr > 0.0, "lr must be > 0");
  require(decoder_lr_mult > 0.0, "decoder_lr_mult must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(warmup_steps >= 0, "warmup_steps must be >= 0");
  require(total_steps >= 1 && total_steps >= warmup_steps, "total_steps must be >= warmup_steps");
  require(crop_size >= 16 && crop_size % 16 == 0, "crop_size must be a positive multiple of 16");
  require(batch_size >= 1, "batch_size must be >= 1");
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (key == f.name) field = &f;
    if (!field) throw std::invalid_argument(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw std::invalid_argument(where + "repeated key '" + key + "'");
    try {
      field->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.name) + " = " + f.get(cfg) + "\n";
  return out;
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : to_text(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b) {
  std::vector<std::string> out;
  for (const auto& f : fields())
    if (f.get(a) != f.get(b)) out.emplace_back(f.name);
  return out;
}

seg::ModelConfig model_config(const TrainConfig& cfg, int num_base) {
  seg::ModelConfig m;
  m.num_base = num_base;
  m.dim = cfg.dim;
  m.attention_blocks = cfg.attention_blocks;
  m.attention.dim = cfg.dim;
  m.attention.heads = cfg.heads;
  m.attention.tau_sort = cfg.tau_sort;
  m.attention.sort_mode = ema::sort_mode_from_string(cfg.sort_mode);
  m.attention.kind = ema::attention_kind_from_string(cfg.attention);
  return m;
}

gma::AdapterConfig adapter_config(const TrainConfig& cfg, int num_base) {
  gma::AdapterConfig a;
  a.dim = cfg.dim;
  a.num_base = num_base;
  a.sampling.k = cfg.k;
  a.sampling.noise_scale = cfg.prototype_noise;
  a.alpha_mem = cfg.alpha_mem;
  a.beta = cfg.beta;
  a.sinkhorn_iters = cfg.sinkhorn_iters;
  a.dropout = cfg.dropout;
  a.heads = cfg.graph_heads;
  a.match_all_kinds = cfg.match_all_kinds;
  return a;
}

// ---------------------------------------------------------------- schedule / loss

double lr_schedule(long step, long warmup, long total, double base) {
  if (total <= 0 || warmup < 0 || warmup > total)
    throw std::invalid_argument("lr_schedule: need 0 <= warmup <= total, total > 0");
  step = std::clamp(step, 0L, total);
  if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * std::pow(1.0 - progress, 0.9);
}

Var total_loss(const Var& seg, const Var& mixup, const Var& graph, double gamma) {
  for (const Var* v : {&seg, &mixup, &graph})
    if (v->size() != 1) throw std::invalid_argument("total_loss: components must be scalars");
  return ad::add(ad::add(seg, mixup), ad::scale(graph, gamma));
}

// ---------------------------------------------------------------- AdamW

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& g : groups_)
    for (const auto& p : g.params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) {
      auto& gr = p.mutable_grad();
      std::fill(gr.begin(), gr.end(), 0.0);
    }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t k = 0;
  for (auto& g : groups_) {
    const double glr = lr * g.lr_mult;
    for (auto& p : g.params) {
      auto& val = p.mutable_value();
      const auto& grad = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = grad.empty() ? 0.0 : grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mh = m[i] / c1, vh = v[i] / c2;
        val[i] -= glr * (mh / (std::sqrt(vh) + eps_) + wd_ * val[i]);
      }
    }
  }
}

std::vector<double> AdamW::state() const {
  std::vector<double> out;
  for (const auto& m : m_) out.insert(out.end(), m.begin(), m.end());
  for (const auto& v : v_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

void AdamW::set_state(long t, const std::vector<double>& flat) {
  std::size_t total = 0;
  for (const auto& m : m_) total += m.size();
  if (flat.size() != 2 * total)
    throw std::invalid_argument("AdamW::set_state: expected " + std::to_string(2 * total) +
                                " values, got " + std::to_string(flat.size()));
  std::size_t off = 0;
  for (auto& m : m_) {
    std::copy(flat.begin() + off, flat.begin() + off + m.size(), m.begin());
    off += m.size();
  }
  for (auto& v : v_) {
    std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
    off += v.size();
  }
  t_ = t;
}

// ---------------------------------------------------------------- metrics

std::string metrics_csv_header() {
  return "step,lr,seg,mixup,graph_match,graph_edge,graph_unknown,graph,total,skipped";
}

std::string metrics_csv_row(const StepMetrics& m) {
  return std::to_string(m.step) + "," + fmt_double(m.lr) + "," + fmt_double(m.seg) + "," +
         fmt_double(m.mixup) + "," + fmt_double(m.graph_match) + "," + fmt_double(m.graph_edge) +
         "," + fmt_double(m.graph_unknown) + "," + fmt_double(m.graph) + "," +
         fmt_double(m.total) + "," + (m.skipped ? "1" : "0");
}

// ---------------------------------------------------------------- state / step

TrainState init_state(const TrainConfig& cfg, int num_base) {
  cfg.validate();
  TrainState st;
  Rng model_init(derive_seed(cfg.seed, 1));
  st.student = seg::SegModel(model_config(cfg, num_base), model_init);
  st.teacher = st.student.clone();
  st.teacher.set_requires_grad(false);
  Rng adapter_init(derive_seed(cfg.seed, 2));
  st.adapter = gma::GraphAdapter(adapter_config(cfg, num_base), adapter_init);
  st.rng = Rng(derive_seed(cfg.seed, 3));

  AdamW::Group encoder{{}, 1.0}, rest{{}, cfg.decoder_lr_mult};
  for (const auto& [name, v] : st.student.named_parameters())
    (name.rfind("encoder", 0) == 0 ? encoder : rest).params.push_back(v);
  for (const auto& [name, v] : st.adapter.named_parameters("graph")) rest.params.push_back(v);
  st.optimizer = AdamW({encoder, rest}, 0.9, 0.999, 1e-8, cfg.weight_decay);
  return st;
}

std::vector<int> downsample_labels(std::span<const int> labels, int height, int width, int factor) {
  if (factor <= 0 || height % factor || width % factor ||
      labels.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("downsample_labels: size not divisible by factor");
  const int h = height / factor, w = width / factor, off = factor / 2;
  std::vector<int> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y) * w + x] =
          labels[static_cast<std::size_t>(y * factor + off) * width + x * factor + off];
  return out;
}

namespace {

std::vector<int> to_ints(const std::vector<bench::LabelMap>& maps) {
  std::vector<int> out;
  for (const auto& m : maps) out.insert(out.end(), m.data.begin(), m.data.end());
  return out;
}

std::vector<int> rows_where(const std::vector<int>& labels, int id) {
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == id) out.push_back(static_cast<int>(i));
  return out;
}

// Downsamples each image's labels independently and concatenates them in
// token order.
std::vector<int> token_labels(const std::vector<int>& labels, int batch, int h, int w) {
  std::vector<int> out;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < batch; ++b) {
    auto d = downsample_labels(std::span<const int>(labels).subspan(b * plane, plane), h, w, 4);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::pair<gma::DomainBatch, gma::DomainBatch> graph_batches(
    const seg::SegModel::Output& out_s, const std::vector<int>& src_labels,
    const seg::SegModel::Output& out_t, const std::vector<seg::PseudoLabel>& pseudo, int num_base) {
  const int batch = out_s.batch, h = out_s.height * 4, w = out_s.width * 4;
  std::vector<int> pseudo_all;
  for (const auto& p : pseudo) pseudo_all.insert(pseudo_all.end(), p.labels.begin(), p.labels.end());

  gma::DomainBatch s, t;
  s.features = out_s.features;
  s.labels = token_labels(src_labels, batch, h, w);
  auto ce_s = gma::pixel_confidence_entropy(out_s.logits);
  s.p = std::move(ce_s.p);
  s.entropy = std::move(ce_s.entropy);
  s.novel_candidates = rows_where(s.labels, bench::kIgnoreId);

  t.features = out_t.features;
  t.labels = token_labels(pseudo_all, batch, h, w);
  auto ce_t = gma::pixel_confidence_entropy(out_t.logits);
  t.p = std::move(ce_t.p);
  t.entropy = std::move(ce_t.entropy);
  t.novel_candidates = rows_where(t.labels, num_base);
  return {std::move(s), std::move(t)};
}

}  // namespace

StepMetrics train_step(TrainState& st, const Batch& source, const Batch& target,
                       const TrainConfig& cfg) {
  const int batch = static_cast<int>(source.images.size());
  if (batch == 0 || target.images.size() != source.images.size() ||
      source.labels.size() != source.images.size())
    throw std::invalid_argument("train_step: source/target batches must be nonempty and equal-sized");
  const int h = source.images[0].height, w = source.images[0].width;
  for (const auto& im : target.images)
    if (im.height != h || im.width != w)
      throw std::invalid_argument("train_step: source and target crops differ in size");

  const int nb = st.student.config().num_base;
  const int ignore = bench::kIgnoreId;
  const Rng rng_before = st.rng;
  const auto src_bank = st.adapter.source_bank, tgt_bank = st.adapter.target_bank;
  st.optimizer.zero_grad();

  // Source supervision.
  Var src_x = seg::images_to_tensor(source.images);
  auto out_s = st.student.forward(src_x);
  const std::vector<int> src_labels = to_ints(source.labels);
  Var seg_loss = ad::cross_entropy(seg::SegModel::full_resolution(out_s.logits), src_labels, {}, ignore);

  // Teacher pseudo-labels on the target crops.
  Var tgt_x = seg::images_to_tensor(target.images);
  auto teacher_logits = seg::SegModel::full_resolution(st.teacher.forward(tgt_x).logits);
  auto pseudo = seg::pseudo_label(teacher_logits, nb, cfg.pseudo_threshold, ignore);

  // Cross-domain mix.
  std::vector<bench::ImageTensor> mixed;
  std::vector<int> mix_labels;
  std::vector<double> mix_weights;
  for (int b = 0; b < batch; ++b) {
    auto m = seg::dacs_mix(source.images[b], source.labels[b], target.images[b], pseudo[b].labels,
                           ignore, st.rng);
    for (std::size_t q = 0; q < m.labels.size(); ++q) {
      mix_labels.push_back(m.labels[q]);
      mix_weights.push_back(m.mask[q] ? 1.0 : pseudo[b].weight);
    }
    mixed.push_back(std::move(m.image));
  }
  Var mix_logits = seg::SegModel::full_resolution(st.student.forward(seg::images_to_tensor(mixed)).logits);
  Var mix_loss = ad::cross_entropy(mix_logits, mix_labels, mix_weights, ignore);

  // Graph matching between source and target nodes.
  StepMetrics m;
  Var graph_loss = ad::scalar(0.0);
  const bool finite_so_far = std::isfinite(seg_loss.item()) && std::isfinite(mix_loss.item());
  if (finite_so_far && cfg.gamma > 0.0 && st.step % cfg.graph_stride == 0) {
    auto out_t = st.student.forward(tgt_x);
    auto [s, t] = graph_batches(out_s, src_labels, out_t, pseudo, nb);
    auto r = st.adapter.run(s, t, true, true, st.rng);
    graph_loss = r.loss.total;
    m.graph_match = r.loss.matching.item();
    m.graph_edge = r.loss.edge.item();
    m.graph_unknown = r.loss.unknown.item();
  }

  Var total = total_loss(seg_loss, mix_loss, graph_loss, cfg.gamma);
  m.seg = seg_loss.item();
  m.mixup = mix_loss.item();
  m.graph = graph_loss.item();
  m.total = total.item();

  if (!std::isfinite(m.total)) {
    st.rng = rng_before;
    st.adapter.source_bank = src_bank;
    st.adapter.target_bank = tgt_bank;
    m.step = st.step;
    m.skipped = true;
    if (++st.consecutive_skips >= 10)
      throw NonFiniteLoss("training aborted: 10 consecutive non-finite losses at step " +
                          std::to_string(st.step));
    return m;
  }

  total.backward();
  m.lr = lr_schedule(st.step + 1, cfg.warmup_steps, cfg.total_steps, cfg.lr);
  st.optimizer.step(m.lr);
  seg::teacher_update(st.teacher, st.student, cfg.alpha_teacher);
  st.consecutive_skips = 0;
  m.step = ++st.step;
  return m;
}

gma::AdapterOutput graph_snapshot(TrainState& st, const Batch& source, const Batch& target,
                                  const TrainConfig& cfg) {
  if (source.images.empty() || source.images.size() != target.images.size() ||
      source.labels.size() != source.images.size())
    throw std::invalid_argument("graph_snapshot: source/target batches must be nonempty and equal-sized");
  const int nb = st.student.config().num_base;
  seg::SegModel student = st.student.clone();
  student.set_requires_grad(false);
  Var src_x = seg::images_to_tensor(source.images);
  Var tgt_x = seg::images_to_tensor(target.images);
  auto out_s = student.forward(src_x);
  auto out_t = student.forward(tgt_x);
  auto pseudo = seg::pseudo_label(seg::SegModel::full_resolution(st.teacher.forward(tgt_x).logits),
                                  nb, cfg.pseudo_threshold, bench::kIgnoreId);
  auto [s, t] = graph_batches(out_s, to_ints(source.labels), out_t, pseudo, nb);
  return st.adapter.run(s, t, false, false, st.rng);
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg, const bench::Dataset& source, const bench::Dataset& target)
    : cfg_(std::move(cfg)), source_(source), target_(target) {
  cfg_.validate();
  if (source.size() == 0 || target.size() == 0)
    throw std::invalid_argument("trainer: empty training split");
  if (source.meta.num_base != target.meta.num_base)
    throw std::invalid_argument("trainer: source has " + std::to_string(source.meta.num_base) +
                                " base classes, target " + std::to_string(target.meta.num_base));
  for (const auto* ds : {&source, &target})
    for (const auto& im : ds->images)
      if (im.height < cfg_.crop_size || im.width < cfg_.crop_size)
        throw std::invalid_argument("trainer: crop_size exceeds image size");
  state_ = init_state(cfg_, source.meta.num_base);

  if (cfg_.rare_class_sampling) {
    const int nb = source.meta.num_base;
    std::vector<std::vector<long>> counts;
    for (const auto& lbl : source.labels) {
      std::vector<long> c(static_cast<std::size_t>(nb), 0);
      for (auto l : lbl.data)
        if (l < nb) ++c[l];
      counts.push_back(std::move(c));
    }
    source_weights_ = seg::rare_class_sample(counts, cfg_.rcs_temperature,
                                             seg::scaled_min_pixels(cfg_.crop_size, cfg_.crop_size))
                          .image_weight;
  } else {
    source_weights_.assign(source.size(), 1.0);
  }
}

std::pair<Batch, Batch> Trainer::next_batches() {
  Batch s, t;
  Rng& rng = state_.rng;
  const int c = cfg_.crop_size;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const int i = seg::weighted_index(source_weights_, rng);
    auto sc = bench::random_crop(source_.images[i], source_.labels[i], c, c, rng);
    s.images.push_back(std::move(sc.image));
    s.labels.push_back(std::move(sc.label));
  }
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const int i = rng.uniform_int(static_cast<int>(target_.size()));
    auto tc = bench::random_crop(target_.images[i], target_.labels[i], c, c, rng);
    t.images.push_back(std::move(tc.image));
  }
  return {std::move(s), std::move(t)};
}

StepMetrics Trainer::step() {
  auto [s, t] = next_batches();
  return train_step(state_, s, t, cfg_);
}

void Trainer::run(const std::optional<std::filesystem::path>& log_path,
                  const std::function<void(const StepMetrics&)>& on_step) {
  std::ofstream log;
  if (log_path) {
    const bool fresh = !std::filesystem::exists(*log_path) || state_.step == 0;
    log.open(*log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write metrics log " + log_path->string());
    if (fresh) log << metrics_csv_header() << "\n";
  }
  while (state_.step < cfg_.total_steps) {
    const StepMetrics m = step();
    if (log) log << metrics_csv_row(m) << "\n" << std::flush;
    if (on_step) on_step(m);
  }
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(state_, cfg_, source_.meta.class_names, path);
}

void Trainer::load(const std::filesystem::path& path) { load_checkpoint(state_, cfg_, path); }

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'E', 'D', 'A', 'P', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

using NamedVars = std::vector<std::pair<std::string, Var>>;

NamedVars checkpoint_tensors(const TrainState& st) {
  NamedVars out;
  for (auto& [n, v] : st.student.named_parameters()) out.emplace_back("student." + n, v);
  for (auto& [n, v] : st.teacher.named_parameters()) out.emplace_back("teacher." + n, v);
  for (auto& [n, v] : st.adapter.named_parameters("graph")) out.emplace_back(n, v);
  return out;
}

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& where;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError(where + ": truncated checkpoint");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
};

struct Parsed {
  nlohmann::json header;
  std::vector<double> blob;
};

Parsed parse_file(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + where);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, where};
  r.need(sizeof kMagic);
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(where + ": not a checkpoint file");
  r.pos = sizeof kMagic;
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(where + ": checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const auto hlen = r.get<std::uint64_t>();
  r.need(hlen);
  Parsed p;
  try {
    p.header = nlohmann::json::parse(buf.substr(r.pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + ": malformed header: " + e.what());
  }
  r.pos += hlen;
  const auto count = r.get<std::uint64_t>();
  if (count > (buf.size() - r.pos) / sizeof(double)) throw CheckpointError(where + ": truncated checkpoint");
  p.blob.resize(count);
  std::memcpy(p.blob.data(), buf.data() + r.pos, count * sizeof(double));
  r.pos += count * sizeof(double);
  const std::size_t body = r.pos;
  const auto checksum = r.get<std::uint64_t>();
  if (checksum != fnv1a(buf.data(), body)) throw CheckpointError(where + ": checksum mismatch");
  if (r.pos != buf.size()) throw CheckpointError(where + ": trailing bytes after checkpoint");
  return p;
}

CheckpointInfo info_from_header(const nlohmann::json& h, const std::string& where) {
  try {
    CheckpointInfo info;
    info.config = parse_config(h.at("config").get<std::string>());
    info.config_hash = h.at("config_hash").get<std::string>();
    info.step = h.at("step").get<long>();
    info.num_base = h.at("num_base").get<int>();
    info.class_names = h.at("class_names").get<std::vector<std::string>>();
    return info;
  } catch (const std::exception& e) {
    throw CheckpointError(where + ": bad header: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const TrainState& st, const TrainConfig& cfg,
                     const std::vector<std::string>& class_names, const std::filesystem::path& path) {
  nlohmann::json h;
  h["format"] = "edapseg-checkpoint";
  h["config"] = to_text(cfg);
  h["config_hash"] = config_hash(cfg);
  h["step"] = st.step;
  h["consecutive_skips"] = st.consecutive_skips;
  h["rng"] = st.rng.state();
  h["adam_t"] = st.optimizer.t();
  h["num_base"] = st.student.config().num_base;
  h["class_names"] = class_names;

  std::vector<double> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, v] : checkpoint_tensors(st)) {
    tensors.push_back({{"name", name}, {"shape", v.shape()}});
    blob.insert(blob.end(), v.value().begin(), v.value().end());
  }
  h["tensors"] = tensors;
  const auto opt = st.optimizer.state();
  const auto sb = st.adapter.source_bank.flatten(), tb = st.adapter.target_bank.flatten();
  h["optimizer_size"] = opt.size();
  h["bank_size"] = sb.size();
  blob.insert(blob.end(), opt.begin(), opt.end());
  blob.insert(blob.end(), sb.begin(), sb.end());
  blob.insert(blob.end(), tb.begin(), tb.end());

  const std::string header = h.dump();
  std::string buf(kMagic, sizeof kMagic);
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(header.size()));
  buf += header;
  put(buf, static_cast<std::uint64_t>(blob.size()));
  buf.append(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(double));
  put(buf, fnv1a(buf.data(), buf.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return info_from_header(parse_file(path).header, path.string());
}

CheckpointInfo load_checkpoint(TrainState& st, const TrainConfig& expected,
                               const std::filesystem::path& path) {
  const std::string where = path.string();
  Parsed p = parse_file(path);
  CheckpointInfo info = info_from_header(p.header, where);
  const std::string want = config_hash(expected);
  if (info.config_hash != want) {
    std::string keys;
    for (const auto& k : config_diff(info.config, expected)) keys += (keys.empty() ? "" : ", ") + k;
    throw CheckpointError(where + ": config hash mismatch (checkpoint " + info.config_hash +
                          ", current " + want + "); differing keys: " + keys);
  }
  if (info.num_base != st.student.config().num_base)
    throw CheckpointError(where + ": checkpoint has " + std::to_string(info.num_base) +
                          " base classes, model has " + std::to_string(st.student.config().num_base));

  auto tensors = checkpoint_tensors(st);
  const auto& th = p.header.at("tensors");
  if (th.size() != tensors.size())
    throw CheckpointError(where + ": tensor count " + std::to_string(th.size()) + ", expected " +
                          std::to_string(tensors.size()));
  std::size_t need = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (th[i].at("name").get<std::string>() != tensors[i].first ||
        th[i].at("shape").get<ad::Shape>() != tensors[i].second.shape())
      throw CheckpointError(where + ": tensor " + std::to_string(i) + " is " +
                            th[i].at("name").get<std::string>() + ", expected " + tensors[i].first);
    need += tensors[i].second.size();
  }
  const std::size_t opt_size = p.header.at("optimizer_size").get<std::size_t>();
  const std::size_t bank_size = p.header.at("bank_size").get<std::size_t>();
  if (p.blob.size() != need + opt_size + 2 * bank_size)
    throw CheckpointError(where + ": payload size mismatch");

  std::size_t off = 0;
  for (auto& [name, v] : tensors) {
    auto& val = v.mutable_value();
    std::copy(p.blob.begin() + off, p.blob.begin() + off + val.size(), val.begin());
    off += val.size();
  }
  try {
    st.optimizer.set_state(p.header.at("adam_t").get<long>(),
                           {p.blob.begin() + off, p.blob.begin() + off + opt_size});
    off += opt_size;
    st.adapter.source_bank.unflatten({p.blob.data() + off, bank_size});
    off += bank_size;
    st.adapter.target_bank.unflatten({p.blob.data() + off, bank_size});
    st.rng.set_state(p.header.at("rng").get<std::string>());
  } catch (const std::exception& e) {
    throw CheckpointError(where + ": " + e.what());
  }
  st.step = info.step;
  st.consecutive_skips = p.header.at("consecutive_skips").get<int>();
  return info;
}

std::pair<TrainState, CheckpointInfo> load_checkpoint(const std::filesystem::path& path) {
  CheckpointInfo info = read_checkpoint_info(path);
  TrainState st = init_state(info.config, info.num_base);
  load_checkpoint(st, info.config, path);
  return {std::move(st), std::move(info)};
}

}  // namespace edapseg::train
