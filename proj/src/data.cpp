#include "zsq/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "zsq/error.hpp"
#include "zsq/io.hpp"
#include "zsq/random.hpp"

namespace zsq {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kShapeNames[kNumShapeKinds] = {"circle", "square", "triangle", "cross", "ring", "diamond"};

std::string index_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu%s", i, ext);
  return buf;
}

std::vector<std::pair<double, double>> outline(ShapeKind kind, double r) {
  switch (kind) {
    case ShapeKind::kSquare:
      return {{-0.8 * r, -0.8 * r}, {0.8 * r, -0.8 * r}, {0.8 * r, 0.8 * r}, {-0.8 * r, 0.8 * r}};
    case ShapeKind::kTriangle:
      return {{0.0, -r}, {0.9 * r, 0.75 * r}, {-0.9 * r, 0.75 * r}};
    case ShapeKind::kCross: {
      const double t = 0.3 * r;
      return {{-r, -t}, {r, -t}, {r, t}, {-r, t}, {-t, -r}, {t, -r}, {t, r}, {-t, r}};
    }
    case ShapeKind::kDiamond:
      return {{0.0, -r}, {r, 0.0}, {0.0, r}, {-r, 0.0}};
    default:
      return {};
  }
}

double edge_side(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

void hsv_to_rgb(double h, double s, double v, std::uint8_t out[3]) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  out[0] = static_cast<std::uint8_t>(std::lround((r + m) * 255.0));
  out[1] = static_cast<std::uint8_t>(std::lround((g + m) * 255.0));
  out[2] = static_cast<std::uint8_t>(std::lround((b + m) * 255.0));
}

std::size_t sample_categorical(const std::vector<double>& w, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  return w.size() - 1;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

const char* shape_name(ShapeKind kind) { return kShapeNames[static_cast<int>(kind)]; }

std::vector<double> DatasetSpec::weights() const {
  std::vector<double> w = class_weights;
  if (w.empty()) {
    for (int k = 0; k < num_classes; ++k) w.push_back(std::pow(0.7, k));
  }
  double total = 0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

void DatasetSpec::validate() const {
  if (num_images == 0) throw ValidationError("dataset: num_images must be > 0");
  if (image_size < 16 || image_size % kTotalStride != 0) {
    throw ValidationError("dataset: image_size must be a multiple of 8 and >= 16");
  }
  if (num_classes < 1 || num_classes > kNumShapeKinds) {
    throw ValidationError("dataset: num_classes must be in [1, " + std::to_string(kNumShapeKinds) + "]");
  }
  if (!class_weights.empty()) {
    if (class_weights.size() != static_cast<std::size_t>(num_classes)) {
      throw ValidationError("dataset: class_weights needs one entry per class");
    }
    for (double w : class_weights) {
      if (!(w > 0)) throw ValidationError("dataset: class weights must be positive");
    }
  }
  if (max_objects < 1) throw ValidationError("dataset: max_objects must be >= 1");
  if (!(objects_p > 0 && objects_p <= 1)) throw ValidationError("dataset: objects_p must be in (0, 1]");
  if (!(min_size > 0 && min_size <= max_size && max_size < 0.7)) {
    throw ValidationError("dataset: need 0 < min_size <= max_size < 0.7");
  }
  if (!(train_fraction > 0 && train_fraction < 1)) throw ValidationError("dataset: train_fraction must be in (0, 1)");
}

bool ShapeInstance::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  const double r = radius;
  switch (kind) {
    case ShapeKind::kCircle:
      return u * u + v * v <= r * r;
    case ShapeKind::kRing: {
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
    case ShapeKind::kTriangle: {
      const auto p = outline(kind, r);
      const double a = edge_side(p[0].first, p[0].second, p[1].first, p[1].second, u, v);
      const double b = edge_side(p[1].first, p[1].second, p[2].first, p[2].second, u, v);
      const double d = edge_side(p[2].first, p[2].second, p[0].first, p[0].second, u, v);
      return (a >= 0 && b >= 0 && d >= 0) || (a <= 0 && b <= 0 && d <= 0);
    }
    case ShapeKind::kCross: {
      const double t = 0.3 * r;
      return (std::abs(u) <= r && std::abs(v) <= t) || (std::abs(u) <= t && std::abs(v) <= r);
    }
    case ShapeKind::kDiamond:
      return std::abs(u) + std::abs(v) <= r;
  }
  return false;
}

std::array<double, 4> ShapeInstance::bounds() const {
  if (kind == ShapeKind::kCircle || kind == ShapeKind::kRing) {
    return {cx - radius, cy - radius, cx + radius, cy + radius};
  }
  const double c = std::cos(angle), s = std::sin(angle);
  std::array<double, 4> b = {1e300, 1e300, -1e300, -1e300};
  for (const auto& [u, v] : outline(kind, radius)) {
    // Inverse of the rotation in contains().
    const double x = cx + c * u - s * v, y = cy + s * u + c * v;
    b[0] = std::min(b[0], x), b[1] = std::min(b[1], y);
    b[2] = std::max(b[2], x), b[3] = std::max(b[3], y);
  }
  return b;
}

RenderedImage render_image(const DatasetSpec& spec, std::size_t index) {
  Rng rng(spec.seed, index);
  const std::size_t size = spec.image_size;
  const double sz = static_cast<double>(size);
  RenderedImage out;
  out.image.width = out.image.height = size;
  out.image.rgb.assign(size * size * 3, 0);

  // Background: bilinear interpolation of a coarse random grid plus fine noise.
  constexpr std::size_t kCoarse = 5;
  double coarse[3][kCoarse][kCoarse];
  for (auto& ch : coarse)
    for (auto& row : ch)
      for (double& v : row) v = rng.uniform(0.05, 0.45);
  for (std::size_t i = 0; i < size; ++i) {
    const double fy = (static_cast<double>(i) + 0.5) / sz * (kCoarse - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), kCoarse - 2);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < size; ++j) {
      const double fx = (static_cast<double>(j) + 0.5) / sz * (kCoarse - 1);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), kCoarse - 2);
      const double tx = fx - static_cast<double>(x0);
      for (int ch = 0; ch < 3; ++ch) {
        const double top = coarse[ch][y0][x0] * (1 - tx) + coarse[ch][y0][x0 + 1] * tx;
        const double bot = coarse[ch][y0 + 1][x0] * (1 - tx) + coarse[ch][y0 + 1][x0 + 1] * tx;
        const double v = std::clamp(top * (1 - ty) + bot * ty + rng.uniform(-0.03, 0.03), 0.0, 1.0);
        out.image.rgb[(i * size + j) * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }

  std::size_t count = 1;
  while (count < spec.max_objects && !rng.bernoulli(spec.objects_p)) ++count;
  const std::vector<double> weights = spec.weights();
  const double max_angle = spec.max_rotation_deg * std::numbers::pi / 180.0;
  std::vector<std::array<double, 4>> placed;
  for (std::size_t k = 0; k < count; ++k) {
    ShapeInstance shape;
    const std::size_t cls = sample_categorical(weights, rng);
    shape.kind = static_cast<ShapeKind>(cls);
    shape.radius = rng.uniform(spec.min_size, spec.max_size) * sz / 2.0;
    shape.angle = rng.uniform(-max_angle, max_angle);
    hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.7, 1.0), shape.color);
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      shape.cx = shape.cy = 0.0;
      const auto b0 = shape.bounds();
      const double lo_x = -b0[0] + 1, hi_x = sz - b0[2] - 1;
      const double lo_y = -b0[1] + 1, hi_y = sz - b0[3] - 1;
      if (lo_x >= hi_x || lo_y >= hi_y) break;
      shape.cx = rng.uniform(lo_x, hi_x);
      shape.cy = rng.uniform(lo_y, hi_y);
      const auto b = shape.bounds();
      ok = std::none_of(placed.begin(), placed.end(), [&](const auto& p) {
        return b[0] < p[2] + 1 && p[0] < b[2] + 1 && b[1] < p[3] + 1 && p[1] < b[3] + 1;
      });
    }
    if (!ok) continue;
    const auto b = shape.bounds();
    placed.push_back(b);
    const std::size_t i0 = static_cast<std::size_t>(std::max(0.0, std::floor(b[1])));
    const std::size_t i1 = std::min(size, static_cast<std::size_t>(std::ceil(b[3])) + 1);
    const std::size_t j0 = static_cast<std::size_t>(std::max(0.0, std::floor(b[0])));
    const std::size_t j1 = std::min(size, static_cast<std::size_t>(std::ceil(b[2])) + 1);
    // The label is the tight bound of the lit pixels; thin tips may miss
    // every pixel center, so the analytic bound can be loose.
    double mx1 = sz, my1 = sz, mx2 = 0, my2 = 0;
    for (std::size_t i = i0; i < i1; ++i) {
      for (std::size_t j = j0; j < j1; ++j) {
        if (!shape.contains(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) continue;
        for (int ch = 0; ch < 3; ++ch) out.image.rgb[(i * size + j) * 3 + ch] = shape.color[ch];
        mx1 = std::min(mx1, static_cast<double>(j)), my1 = std::min(my1, static_cast<double>(i));
        mx2 = std::max(mx2, static_cast<double>(j + 1)), my2 = std::max(my2, static_cast<double>(i + 1));
      }
    }
    BoxLabel l;
    l.class_id = static_cast<int>(cls);
    l.cx = (mx1 + mx2) / 2.0 / sz;
    l.cy = (my1 + my2) / 2.0 / sz;
    l.w = (mx2 - mx1) / sz;
    l.h = (my2 - my1) / sz;
    out.labels.push_back(l);
    out.shapes.push_back(shape);
  }
  return out;
}

Manifest build_manifest(const std::vector<std::vector<BoxLabel>>& labels, std::size_t image_size,
                        int num_classes, double train_fraction) {
  Manifest m;
  m.image_size = image_size;
  m.num_classes = num_classes;
  for (int c = 0; c < num_classes; ++c) {
    m.class_names.push_back(c < kNumShapeKinds ? kShapeNames[c] : "class" + std::to_string(c));
  }
  m.num_images = labels.size();
  m.train_count = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(labels.size())));
  m.class_histogram.assign(static_cast<std::size_t>(num_classes), 0);
  for (const auto& ls : labels) {
    m.labels_per_image.push_back(ls.size());
    if (m.label_count_histogram.size() <= ls.size()) m.label_count_histogram.resize(ls.size() + 1, 0);
    ++m.label_count_histogram[ls.size()];
    for (const BoxLabel& l : ls) ++m.class_histogram.at(static_cast<std::size_t>(l.class_id));
  }
  return m;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.images.reserve(spec.num_images);
  d.labels.reserve(spec.num_images);
  for (std::size_t i = 0; i < spec.num_images; ++i) {
    RenderedImage r = render_image(spec, i);
    d.images.push_back(std::move(r.image));
    d.labels.push_back(std::move(r.labels));
  }
  d.manifest = build_manifest(d.labels, spec.image_size, spec.num_classes, spec.train_fraction);
  d.manifest.class_weights = spec.weights();
  d.manifest.seed = spec.seed;
  return d;
}

std::vector<std::size_t> Dataset::train_indices() const {
  std::vector<std::size_t> idx(std::min(manifest.train_count, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

std::vector<std::size_t> Dataset::val_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = manifest.train_count; i < size(); ++i) idx.push_back(i);
  return idx;
}

void save_image(const Image& image, const fs::path& path) {
  std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  write_file(path, bytes);
}

Image parse_ppm(const std::string& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw ParseError(origin + ": byte " + std::to_string(pos) + ": " + what);
  };
  auto skip_space = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    const auto res = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
    if (res.ec != std::errc()) fail("expected an unsigned integer");
    pos = static_cast<std::size_t>(res.ptr - bytes.data());
    return v;
  };
  if (bytes.size() < 2 || bytes.compare(0, 2, "P6") != 0) fail("missing P6 magic");
  pos = 2;
  Image img;
  img.width = read_uint();
  img.height = read_uint();
  const std::size_t maxval = read_uint();
  if (maxval != 255) fail("only maxval 255 is supported, got " + std::to_string(maxval));
  if (img.width == 0 || img.height == 0 || img.width > 65536 || img.height > 65536) fail("bad dimensions");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing header terminator");
  ++pos;
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - pos < need) {
    fail("truncated pixel data: need " + std::to_string(need) + " bytes, have " + std::to_string(bytes.size() - pos));
  }
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

Image load_image(const fs::path& path) { return parse_ppm(read_file(path), path.string()); }

std::string format_labels(const std::vector<BoxLabel>& labels) {
  std::string out;
  for (const BoxLabel& l : labels) {
    out += std::to_string(l.class_id) + ' ' + format_double(l.cx) + ' ' + format_double(l.cy) + ' ' +
           format_double(l.w) + ' ' + format_double(l.h) + '\n';
  }
  return out;
}

std::vector<BoxLabel> parse_labels(const std::string& text, const std::string& origin, int num_classes) {
  std::vector<BoxLabel> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& what) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + what + " in \"" + line + "\"");
    };
    const char* p = line.data();
    const char* e = line.data() + line.size();
    auto skip = [&]() {
      while (p < e && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    };
    BoxLabel l;
    skip();
    auto r = std::from_chars(p, e, l.class_id);
    if (r.ec != std::errc()) fail("expected integer class id");
    p = r.ptr;
    double* fields[4] = {&l.cx, &l.cy, &l.w, &l.h};
    for (double* f : fields) {
      skip();
      auto rd = std::from_chars(p, e, *f);
      if (rd.ec != std::errc()) fail("expected 5 numeric fields");
      p = rd.ptr;
    }
    skip();
    if (p != e) fail("trailing characters");
    try {
      validate_label(l, num_classes);
    } catch (const ValidationError& err) {
      fail(err.what());
    }
    out.push_back(l);
  }
  return out;
}

void save_dataset(const Dataset& d, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < d.size(); ++i) {
    save_image(d.images[i], dir / "images" / index_name(i, ".ppm"));
    write_file(dir / "labels" / index_name(i, ".txt"), format_labels(d.labels[i]));
  }
  const Manifest& m = d.manifest;
  ojson j;
  j["format_version"] = 1;
  j["source"] = m.source;
  j["image_size"] = m.image_size;
  j["num_classes"] = m.num_classes;
  j["class_names"] = m.class_names;
  j["class_weights"] = m.class_weights;
  j["num_images"] = m.num_images;
  j["train_count"] = m.train_count;
  j["seed"] = m.seed;
  j["class_histogram"] = m.class_histogram;
  j["label_count_histogram"] = m.label_count_histogram;
  j["labels_per_image"] = m.labels_per_image;
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("no manifest.json in " + dir.string());
  Dataset d;
  try {
    const auto j = nlohmann::json::parse(read_file(manifest_path));
    Manifest& m = d.manifest;
    m.source = j.at("source").get<std::string>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.class_weights = j.at("class_weights").get<std::vector<double>>();
    m.num_images = j.at("num_images").get<std::size_t>();
    m.train_count = j.at("train_count").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.class_histogram = j.at("class_histogram").get<std::vector<std::size_t>>();
    m.label_count_histogram = j.at("label_count_histogram").get<std::vector<std::size_t>>();
    m.labels_per_image = j.at("labels_per_image").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < d.manifest.num_images; ++i) {
    Image img = load_image(dir / "images" / index_name(i, ".ppm"));
    if (img.width != d.manifest.image_size || img.height != d.manifest.image_size) {
      throw ParseError((dir / "images" / index_name(i, ".ppm")).string() + ": size does not match manifest");
    }
    const fs::path lp = dir / "labels" / index_name(i, ".txt");
    d.images.push_back(std::move(img));
    d.labels.push_back(parse_labels(read_file(lp), lp.string(), d.manifest.num_classes));
  }
  return d;
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const std::size_t s = images[0]->width;
  const std::size_t n = images.size();
  Tensor t({n, 3, s, s});
  auto out = t.data();
  for (std::size_t b = 0; b < n; ++b) {
    const Image& img = *images[b];
    if (img.width != s || img.height != s) throw ShapeError("images_to_tensor: mixed image sizes");
    for (std::size_t p = 0; p < s * s; ++p) {
      for (std::size_t c = 0; c < 3; ++c) out[(b * 3 + c) * s * s + p] = img.rgb[p * 3 + c] / 255.0;
    }
  }
  return t;
}

Image tensor_to_image(const Tensor& batch, std::size_t index) {
  if (batch.dim() != 4 || batch.size(1) != 3) throw ShapeError("tensor_to_image: expected [N, 3, H, W]");
  const std::size_t h = batch.size(2), w = batch.size(3);
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(w * h * 3);
  const auto v = batch.data();
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double x = std::clamp(v[(index * 3 + c) * w * h + p], 0.0, 1.0);
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
  }
  return img;
}

std::vector<BoxLabel> batch_labels(const std::vector<const std::vector<BoxLabel>*>& per_image) {
  std::vector<BoxLabel> out;
  for (std::size_t b = 0; b < per_image.size(); ++b) {
    for (BoxLabel l : *per_image[b]) {
      l.batch_index = b;
      out.push_back(l);
    }
  }
  return out;
}

void hflip(Image& image, std::vector<BoxLabel>& labels) {
  for (std::size_t i = 0; i < image.height; ++i) {
    for (std::size_t j = 0; j < image.width / 2; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        std::swap(image.rgb[(i * image.width + j) * 3 + c],
                  image.rgb[(i * image.width + image.width - 1 - j) * 3 + c]);
      }
    }
  }
  for (BoxLabel& l : labels) l.cx = 1.0 - l.cx;
}

}  // namespace zsq
