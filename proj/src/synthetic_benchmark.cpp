#include "edapseg/synthetic_benchmark.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace edapseg::bench {

namespace fs = std::filesystem;

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

namespace {

std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::sky: return "sky";
    case ShapeKind::ground: return "ground";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disc: return "disc";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::hexagon: return "hexagon";
    case ShapeKind::bar: return "bar";
  }
  return "?";
}

ShapeKind shape_from_name(const std::string& s) {
  for (auto k : {ShapeKind::sky, ShapeKind::ground, ShapeKind::rectangle, ShapeKind::disc,
                 ShapeKind::triangle, ShapeKind::hexagon, ShapeKind::bar})
    if (shape_name(k) == s) return k;
  throw std::invalid_argument("unknown shape '" + s + "'");
}

std::string privacy_name(Privacy p) {
  switch (p) {
    case Privacy::shared: return "shared";
    case Privacy::target_private: return "target_private";
    case Privacy::source_private: return "source_private";
  }
  return "?";
}

Privacy privacy_from_name(const std::string& s) {
  if (s == "shared") return Privacy::shared;
  if (s == "target_private") return Privacy::target_private;
  if (s == "source_private") return Privacy::source_private;
  throw std::invalid_argument("unknown privacy '" + s + "'");
}

void check_size(int h, int w) {
  if (h < 32 || w < 32 || h % 2 || w % 2)
    throw std::invalid_argument("scene size " + std::to_string(h) + "x" + std::to_string(w) +
                                " invalid: both sides must be even and >= 32");
}

int iround(double v) { return static_cast<int>(std::lround(v)); }

// Shortest signed horizontal offset on a ring of circumference w.
int wrap_dx(int x, int cx, int w) {
  int d = ((x - cx) % w + w) % w;
  return d >= w / 2 ? d - w : d;
}

std::array<double, 3> jitter(const std::array<double, 3>& c, Rng& rng) {
  std::array<double, 3> out{};
  const double j = rng.uniform(-0.05, 0.05);
  for (int k = 0; k < 3; ++k) out[k] = std::clamp(c[k] + j + rng.uniform(-0.02, 0.02), 0.0, 1.0);
  return out;
}

void apply_style(ImageTensor& img, const StyleShift& s) {
  const double a = s.hue_degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double k = 1.0 / 3.0, sq = std::sqrt(k);
  // Rodrigues rotation about the grey axis (1,1,1)/sqrt(3).
  const double m[3][3] = {
      {cs + k * (1 - cs), k * (1 - cs) - sq * sn, k * (1 - cs) + sq * sn},
      {k * (1 - cs) + sq * sn, cs + k * (1 - cs), k * (1 - cs) - sq * sn},
      {k * (1 - cs) - sq * sn, k * (1 - cs) + sq * sn, cs + k * (1 - cs)}};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double rgb[3] = {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
      for (int c = 0; c < 3; ++c) {
        double v = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
        v += s.brightness;
        v = (1.0 - s.fog) * v + s.fog;
        img.at(y, x, c) = v;
      }
    }
}

}  // namespace

int DomainSpec::num_base() const {
  return static_cast<int>(std::count_if(palette.begin(), palette.end(), [](const ClassStyle& c) {
    return c.privacy == Privacy::shared;
  }));
}

std::vector<std::string> DomainSpec::class_names() const {
  std::vector<std::string> names;
  for (const auto& c : palette)
    if (c.privacy == Privacy::shared) names.push_back(c.name);
  names.emplace_back("unknown");
  return names;
}

void DomainSpec::validate() const {
  if (!(warp_amplitude >= 0.0 && warp_amplitude <= 0.25))
    throw std::invalid_argument("warp amplitude " + std::to_string(warp_amplitude) +
                                " outside [0, 0.25]");
  if (num_base() < 1 || num_base() >= kIgnoreId)
    throw std::invalid_argument("palette needs between 1 and 254 shared classes");
  int sky = 0, ground = 0;
  for (const auto& c : palette) {
    sky += c.shape == ShapeKind::sky;
    ground += c.shape == ShapeKind::ground;
    if (c.min_instances < 0 || c.max_instances < c.min_instances)
      throw std::invalid_argument("class '" + c.name + "' has an invalid instance range");
    if ((c.shape == ShapeKind::sky || c.shape == ShapeKind::ground) && c.privacy != Privacy::shared)
      throw std::invalid_argument("background class '" + c.name + "' must be shared");
  }
  if (sky != 1 || ground != 1)
    throw std::invalid_argument("palette needs exactly one sky and one ground class");
}

std::vector<ClassStyle> default_palette() {
  return {
      {"road", ShapeKind::ground, {0.45, 0.45, 0.47}, Privacy::shared, 0, 0},
      {"sky", ShapeKind::sky, {0.35, 0.55, 0.90}, Privacy::shared, 0, 0},
      {"building", ShapeKind::rectangle, {0.55, 0.35, 0.25}, Privacy::shared, 1, 3},
      {"car", ShapeKind::disc, {0.80, 0.12, 0.12}, Privacy::shared, 1, 3},
      {"vegetation", ShapeKind::triangle, {0.15, 0.55, 0.18}, Privacy::shared, 1, 3},
      {"obstacle", ShapeKind::hexagon, {0.95, 0.80, 0.10}, Privacy::target_private, 1, 2},
      {"pole", ShapeKind::bar, {0.20, 0.80, 0.85}, Privacy::source_private, 0, 2},
  };
}

DomainSpec source_spec() {
  DomainSpec s;
  s.domain = Domain::source;
  s.palette = default_palette();
  return s;
}

DomainSpec target_spec() {
  DomainSpec s;
  s.domain = Domain::target;
  s.palette = default_palette();
  s.warp_amplitude = 0.08;
  s.style = {-0.06, 0.2, 12.0};
  return s;
}

nlohmann::json to_json(const DomainSpec& spec) {
  nlohmann::json pal = nlohmann::json::array();
  for (const auto& c : spec.palette)
    pal.push_back({{"name", c.name},
                   {"shape", shape_name(c.shape)},
                   {"color", c.color},
                   {"privacy", privacy_name(c.privacy)},
                   {"min_instances", c.min_instances},
                   {"max_instances", c.max_instances}});
  return {{"domain", to_string(spec.domain)},
          {"palette", pal},
          {"warp_amplitude", spec.warp_amplitude},
          {"style",
           {{"brightness", spec.style.brightness},
            {"fog", spec.style.fog},
            {"hue_degrees", spec.style.hue_degrees}}},
          {"private_enabled", spec.private_enabled},
          {"noise_std", spec.noise_std}};
}

DomainSpec spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.domain = domain_from_string(j.at("domain").get<std::string>());
  for (const auto& c : j.at("palette"))
    s.palette.push_back({c.at("name").get<std::string>(),
                         shape_from_name(c.at("shape").get<std::string>()),
                         c.at("color").get<std::array<double, 3>>(),
                         privacy_from_name(c.at("privacy").get<std::string>()),
                         c.at("min_instances").get<int>(), c.at("max_instances").get<int>()});
  s.warp_amplitude = j.at("warp_amplitude").get<double>();
  s.style = {j.at("style").at("brightness").get<double>(), j.at("style").at("fog").get<double>(),
             j.at("style").at("hue_degrees").get<double>()};
  s.private_enabled = j.at("private_enabled").get<bool>();
  s.noise_std = j.at("noise_std").get<double>();
  s.validate();
  return s;
}

Scene generate_scene(std::uint64_t seed, const DomainSpec& spec, int height, int width) {
  check_size(height, width);
  spec.validate();
  const int H = height, W = width;
  const int nb = spec.num_base();
  Rng rng(derive_seed(seed, spec.domain == Domain::source ? 11 : 23));
  Scene s{ImageTensor(H, W), LabelMap(H, W, nb)};

  // Objects stay inside the band that the strongest allowed warp keeps on
  // screen, so warping never pushes them off the top or bottom edge.
  const int margin = static_cast<int>(std::ceil(0.25 * H)) + 1;
  const double sc = H / 64.0;
  const int horizon = rng.uniform_int(iround(0.38 * H), iround(0.47 * H));

  std::vector<int> ids(spec.palette.size());
  {
    int next = 0;
    for (std::size_t i = 0; i < spec.palette.size(); ++i) {
      const auto p = spec.palette[i].privacy;
      ids[i] = p == Privacy::shared ? next++ : (p == Privacy::target_private ? nb : kIgnoreId);
    }
  }
  auto paint = [&](int y, int x, const std::array<double, 3>& c, int id) {
    if (y < 0 || y >= H) return;
    x = ((x % W) + W) % W;
    for (int k = 0; k < 3; ++k) s.image.at(y, x, k) = c[k];
    s.label.at(y, x) = static_cast<std::uint8_t>(id);
  };

  for (std::size_t i = 0; i < spec.palette.size(); ++i) {
    const auto& cls = spec.palette[i];
    if (cls.shape == ShapeKind::sky) {
      for (int y = 0; y < horizon; ++y) {
        const double t = 0.35 * y / horizon;
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k) c[k] = cls.color[k] * (1 - t) + t;
        for (int x = 0; x < W; ++x) paint(y, x, c, ids[i]);
      }
    } else if (cls.shape == ShapeKind::ground) {
      for (int y = horizon; y < H; ++y) {
        const double t = 0.85 + 0.15 * (y - horizon) / std::max(1, H - horizon);
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k) c[k] = cls.color[k] * t;
        for (int x = 0; x < W; ++x) paint(y, x, c, ids[i]);
      }
    }
  }

  const ShapeKind layers[] = {ShapeKind::rectangle, ShapeKind::triangle, ShapeKind::bar,
                              ShapeKind::disc, ShapeKind::hexagon};
  const int lowest = H - margin - 1;  // last row an object may occupy
  for (ShapeKind layer : layers)
    for (std::size_t i = 0; i < spec.palette.size(); ++i) {
      const auto& cls = spec.palette[i];
      if (cls.shape != layer) continue;
      const bool active = cls.privacy == Privacy::shared ||
                          (spec.private_enabled && cls.privacy == Privacy::target_private &&
                           spec.domain == Domain::target) ||
                          (spec.private_enabled && cls.privacy == Privacy::source_private &&
                           spec.domain == Domain::source);
      if (!active) continue;
      const int count = rng.uniform_int(cls.min_instances, cls.max_instances);
      for (int n = 0; n < count; ++n) {
        const auto col = jitter(cls.color, rng);
        const int id = ids[i];
        const int cx = rng.uniform_int(0, W - 1);
        switch (layer) {
          case ShapeKind::rectangle: {
            const int w = rng.uniform_int(std::max(3, iround(W * 0.08)), std::max(4, iround(W * 0.18)));
            const int top = rng.uniform_int(margin, std::max(margin, horizon - 4));
            for (int y = top; y <= horizon + 1; ++y)
              for (int x = cx; x < cx + w; ++x) paint(y, x, col, id);
            break;
          }
          case ShapeKind::triangle: {
            const int apex = rng.uniform_int(margin, std::max(margin, horizon - 5));
            const int base = horizon + 2;
            const int hw = rng.uniform_int(std::max(2, iround(4 * sc)), std::max(2, iround(9 * sc)));
            for (int y = apex; y <= base; ++y) {
              const double half = hw * static_cast<double>(y - apex) / std::max(1, base - apex);
              for (int x = cx - hw; x <= cx + hw; ++x)
                if (std::abs(x - cx) <= half) paint(y, x, col, id);
            }
            break;
          }
          case ShapeKind::bar: {
            const int top = rng.uniform_int(margin, std::max(margin, horizon - 2));
            const int bottom = rng.uniform_int(std::min(horizon + 3, lowest), lowest);
            for (int y = top; y <= bottom; ++y)
              for (int x = cx; x < cx + 2; ++x) paint(y, x, col, id);
            break;
          }
          case ShapeKind::disc:
          case ShapeKind::hexagon: {
            const bool hex = layer == ShapeKind::hexagon;
            const int rmin = hex ? std::max(3, iround(4 * sc)) : std::max(2, iround(3 * sc));
            const int rmax = hex ? std::max(3, iround(6 * sc)) : std::max(2, iround(5 * sc));
            const int r = rng.uniform_int(rmin, rmax);
            const int lo = horizon + r + 1, hi = std::max(lo, lowest - r);
            const int cy = std::min(rng.uniform_int(lo, hi), lowest - r);
            for (int y = cy - r; y <= cy + r; ++y)
              for (int x = cx - r; x <= cx + r; ++x) {
                const double dx = wrap_dx(x, cx, W), dy = y - cy;
                const bool inside =
                    hex ? (std::fabs(dy) <= r * std::sqrt(3.0) / 2.0 &&
                           std::fabs(dx) <= r - std::fabs(dy) / std::sqrt(3.0))
                        : dx * dx + dy * dy <= static_cast<double>(r) * r;
                if (inside) paint(y, x, col, id);
              }
            break;
          }
          default:
            break;
        }
      }
    }

  for (auto& v : s.image.data) v += spec.noise_std * rng.normal();
  apply_style(s.image, spec.style);
  for (auto& v : s.image.data) v = std::clamp(v, 0.0, 1.0);
  if (spec.warp_amplitude > 0.0) s = panoramic_warp(s.image, s.label, spec.warp_amplitude);
  return s;
}

Scene panoramic_warp(const ImageTensor& img, const LabelMap& lbl, double amplitude) {
  if (!(amplitude >= 0.0 && amplitude <= 0.25))
    throw std::invalid_argument("warp amplitude " + std::to_string(amplitude) +
                                " outside [0, 0.25]");
  if (img.height != lbl.height || img.width != lbl.width)
    throw std::invalid_argument("image and label sizes differ");
  if (amplitude == 0.0) return {img, lbl};
  const int H = img.height, W = img.width;
  Scene out{ImageTensor(H, W), LabelMap(H, W, lbl.num_base)};
  for (int x = 0; x < W; ++x) {
    const double dy = amplitude * H * std::sin(2.0 * std::numbers::pi * x / W);
    for (int y = 0; y < H; ++y) {
      const double src = y - dy;
      const double cl = std::clamp(src, 0.0, static_cast<double>(H - 1));
      const int y0 = static_cast<int>(std::floor(cl));
      const int y1 = std::min(y0 + 1, H - 1);
      const double t = cl - y0;
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) = (1.0 - t) * img.at(y0, x, c) + t * img.at(y1, x, c);
      const int yl = std::clamp(static_cast<int>(std::round(src)), 0, H - 1);
      out.label.at(y, x) = lbl.at(yl, x);
    }
  }
  return out;
}

CropOffset crop_offset(int height, int width, int crop_h, int crop_w, Rng& rng) {
  if (crop_h <= 0 || crop_w <= 0 || crop_h > height || crop_w > width)
    throw std::invalid_argument("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                                " does not fit image " + std::to_string(height) + "x" +
                                std::to_string(width));
  CropOffset o;
  o.y = rng.uniform_int(height - crop_h + 1);
  o.x = rng.uniform_int(width - crop_w + 1);
  return o;
}

Scene crop(const ImageTensor& img, const LabelMap& lbl, CropOffset at, int crop_h, int crop_w) {
  if (at.y < 0 || at.x < 0 || at.y + crop_h > img.height || at.x + crop_w > img.width)
    throw std::invalid_argument("crop window outside image");
  Scene out{ImageTensor(crop_h, crop_w), LabelMap(crop_h, crop_w, lbl.num_base)};
  for (int y = 0; y < crop_h; ++y)
    for (int x = 0; x < crop_w; ++x) {
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = img.at(at.y + y, at.x + x, c);
      out.label.at(y, x) = lbl.at(at.y + y, at.x + x);
    }
  return out;
}

Scene random_crop(const ImageTensor& img, const LabelMap& lbl, int crop_h, int crop_w,
                  std::uint64_t seed) {
  Rng rng(derive_seed(seed, 31));
  return random_crop(img, lbl, crop_h, crop_w, rng);
}

Scene random_crop(const ImageTensor& img, const LabelMap& lbl, int crop_h, int crop_w, Rng& rng) {
  return crop(img, lbl, crop_offset(img.height, img.width, crop_h, crop_w, rng), crop_h, crop_w);
}

ImageTensor quantize(const ImageTensor& img) {
  ImageTensor q = img;
  for (auto& v : q.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return q;
}

void validate_label_ids(const LabelMap& lbl, const std::string& where) {
  std::set<int> bad;
  for (auto v : lbl.data)
    if (v > lbl.num_base && v != kIgnoreId) bad.insert(v);
  if (!bad.empty()) {
    std::ostringstream os;
    os << where << ": invalid label ids";
    for (int b : bad) os << ' ' << b;
    os << " (allowed 0.." << lbl.num_base << " and " << kIgnoreId << ")";
    throw DatasetError(os.str());
  }
}

Dataset make_split(const DomainSpec& spec, int count, std::uint64_t seed, int height, int width) {
  if (count < 0) throw std::invalid_argument("negative sample count");
  Dataset ds;
  ds.meta.class_names = spec.class_names();
  ds.meta.num_base = spec.num_base();
  ds.meta.unknown_id = spec.num_base();
  ds.meta.spec = to_json(spec);
  for (int i = 0; i < count; ++i) {
    auto sc = generate_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), spec, height, width);
    ds.images.push_back(quantize(sc.image));
    ds.labels.push_back(std::move(sc.label));
  }
  return ds;
}

namespace {

std::string sample_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.png", i);
  return buf;
}

void commit(const fs::path& tmp, const fs::path& dst) {
  std::error_code ec;
  fs::rename(tmp, dst, ec);
  if (ec) throw DatasetError("cannot move " + tmp.string() + " to " + dst.string() + ": " + ec.message());
}

}  // namespace

void write_png_rgb(const fs::path& path, const ImageTensor& img) {
  std::vector<png_byte> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_RGB;
  const fs::path tmp = path.string() + ".tmp";
  if (!png_image_write_to_file(&im, tmp.c_str(), 0, buf.data(), 0, nullptr))
    throw DatasetError("cannot write " + path.string() + ": " + im.message);
  commit(tmp, path);
}

void write_png_gray(const fs::path& path, const LabelMap& lbl) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(lbl.width);
  im.height = static_cast<png_uint_32>(lbl.height);
  im.format = PNG_FORMAT_GRAY;
  const fs::path tmp = path.string() + ".tmp";
  if (!png_image_write_to_file(&im, tmp.c_str(), 0, lbl.data.data(), 0, nullptr))
    throw DatasetError("cannot write " + path.string() + ": " + im.message);
  commit(tmp, path);
}

namespace {

std::vector<png_byte> read_png(const fs::path& path, png_uint_32 format, int& h, int& w) {
  if (!fs::exists(path)) throw DatasetError("missing file: " + path.string());
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw DatasetError("corrupt PNG " + path.string() + ": " + im.message);
  im.format = format;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw DatasetError("corrupt PNG " + path.string() + ": " + im.message);
  }
  h = static_cast<int>(im.height);
  w = static_cast<int>(im.width);
  return buf;
}

}  // namespace

ImageTensor read_png_rgb(const fs::path& path) {
  int h = 0, w = 0;
  auto buf = read_png(path, PNG_FORMAT_RGB, h, w);
  ImageTensor img(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

LabelMap read_png_gray(const fs::path& path, int num_base) {
  int h = 0, w = 0;
  auto buf = read_png(path, PNG_FORMAT_GRAY, h, w);
  LabelMap lbl(h, w, num_base);
  std::copy(buf.begin(), buf.end(), lbl.data.begin());
  return lbl;
}

void write_dataset(const fs::path& root, const std::string& split, const Dataset& ds) {
  if (ds.images.size() != ds.labels.size())
    throw DatasetError("dataset has mismatched image/label counts");
  const fs::path dir = root / split;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "labels", ec);
  if (ec) throw DatasetError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_png_rgb(dir / "images" / sample_name(i), ds.images[i]);
    write_png_gray(dir / "labels" / sample_name(i), ds.labels[i]);
  }
  nlohmann::json meta = {{"class_names", ds.meta.class_names},
                         {"num_base", ds.meta.num_base},
                         {"unknown_id", ds.meta.unknown_id},
                         {"ignore_id", ds.meta.ignore_id},
                         {"count", ds.size()},
                         {"spec", ds.meta.spec}};
  const fs::path tmp = dir / "meta.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DatasetError("cannot write " + tmp.string());
    os << meta.dump(2) << '\n';
  }
  commit(tmp, dir / "meta.json");
}

Dataset load_dataset(const fs::path& root, const std::string& split,
                     std::optional<int> expected_num_base, std::optional<int> expected_count) {
  const fs::path dir = root / split;
  const fs::path meta_path = dir / "meta.json";
  std::ifstream is(meta_path);
  if (!is) throw DatasetError("missing file: " + meta_path.string());
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("corrupt " + meta_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.meta.class_names = meta.at("class_names").get<std::vector<std::string>>();
    ds.meta.num_base = meta.at("num_base").get<int>();
    ds.meta.unknown_id = meta.at("unknown_id").get<int>();
    ds.meta.ignore_id = meta.at("ignore_id").get<int>();
    ds.meta.spec = meta.at("spec");
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("corrupt " + meta_path.string() + ": " + e.what());
  }
  const auto& m = ds.meta;
  if (static_cast<int>(m.class_names.size()) != m.num_base + 1)
    throw DatasetError(meta_path.string() + ": num_base " + std::to_string(m.num_base) +
                       " inconsistent with " + std::to_string(m.class_names.size()) +
                       " class names");
  if (m.unknown_id != m.num_base)
    throw DatasetError(meta_path.string() + ": unknown_id must equal num_base");
  if (m.ignore_id != kIgnoreId)
    throw DatasetError(meta_path.string() + ": ignore_id must be " + std::to_string(kIgnoreId));
  if (expected_num_base && *expected_num_base != m.num_base)
    throw DatasetError(meta_path.string() + ": expected " + std::to_string(*expected_num_base) +
                       " base classes, found " + std::to_string(m.num_base));

  std::vector<fs::path> files;
  if (fs::is_directory(dir / "images"))
    for (const auto& e : fs::directory_iterator(dir / "images"))
      if (e.path().extension() == ".png") files.push_back(e.path().filename());
  std::sort(files.begin(), files.end());
  if (meta.contains("count") && meta["count"].get<std::size_t>() != files.size())
    throw DatasetError(meta_path.string() + ": meta count " + meta["count"].dump() +
                       " but found " + std::to_string(files.size()) + " images");
  if (expected_count && static_cast<std::size_t>(*expected_count) != files.size())
    throw DatasetError(dir.string() + ": expected " + std::to_string(*expected_count) +
                       " samples, found " + std::to_string(files.size()));
  for (const auto& f : files) {
    auto img = read_png_rgb(dir / "images" / f);
    auto lbl = read_png_gray(dir / "labels" / f, m.num_base);
    if (img.height != lbl.height || img.width != lbl.width)
      throw DatasetError((dir / "labels" / f).string() + ": size differs from image");
    validate_label_ids(lbl, (dir / "labels" / f).string());
    ds.images.push_back(std::move(img));
    ds.labels.push_back(std::move(lbl));
  }
  return ds;
}

}  // namespace edapseg::bench
