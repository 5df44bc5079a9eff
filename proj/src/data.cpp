// SPDX-License-Identifier: Apache-2.0
#include "protoseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>

#include "json.hpp"

#include "protoseg/error.hpp"

namespace protoseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

int SegMask::max_label() const { return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()); }

std::size_t SegMask::count(int label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

SegMask resize_nearest(const SegMask& mask, int out_h, int out_w) {
  PROTOSEG_REQUIRE(out_h > 0 && out_w > 0, "resize_nearest: output extent must be positive");
  if (out_h == mask.height && out_w == mask.width) return mask;
  SegMask out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = static_cast<int>(static_cast<long long>(y) * mask.height / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = static_cast<int>(static_cast<long long>(x) * mask.width / out_w);
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

void write_png(const fs::path& path, const GrayImage& image) {
  PROTOSEG_REQUIRE(image.pixels.size() == static_cast<std::size_t>(image.height) * image.width,
                   "write_png: pixel count does not match extent");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(DataError::Kind::kIo, "cannot write " + path.string() + ": " + png.message);
  }
}

GrayImage read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError(DataError::Kind::kIo, "cannot read " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  GrayImage out;
  out.height = static_cast<int>(png.height);
  out.width = static_cast<int>(png.width);
  out.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError(DataError::Kind::kFormat, "cannot decode " + path.string() + ": " + png.message);
  }
  return out;
}

const std::array<std::string, kDefectClasses + 1>& class_names() {
  static const std::array<std::string, kDefectClasses + 1> names{
      "background", "crack", "hole", "root", "deposit", "joint_offset", "fracture", "water", "encrustation"};
  return names;
}

void DatasetMeta::validate() const {
  PROTOSEG_REQUIRE(num_classes >= 2, "dataset needs at least two classes");
  PROTOSEG_REQUIRE(image_size > 0 && image_size % 16 == 0, "image size must be a positive multiple of 16");
  if (!class_frequencies.empty()) {
    PROTOSEG_REQUIRE(static_cast<int>(class_frequencies.size()) == num_classes,
                     "class_frequencies needs one entry per class");
    double total = 0.0;
    for (double f : class_frequencies) total += f;
    PROTOSEG_REQUIRE(std::abs(total - 1.0) <= 1e-6, "class frequencies must sum to 1");
  }
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  if (name == "all") return Split::kAll;
  throw ContractError("unknown split '" + name + "' (expected train|val|test|all)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kAll: return "all";
  }
  return "all";
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct Canvas {
  int size;
  std::vector<double> intensity;
  SegMask labels;

  explicit Canvas(int s) : size(s), intensity(static_cast<std::size_t>(s) * s), labels(s, s) {}
};

using Region = std::vector<std::uint8_t>;

struct Point {
  double x, y;
};

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

void stroke(Region& r, int size, const std::vector<Point>& line, double radius) {
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const Point p{x + 0.5, y + 0.5};
      for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        if (segment_distance(p, line[i], line[i + 1]) <= radius) {
          r[y * size + x] = 1;
          break;
        }
      }
    }
}

bool inside_polygon(Point p, const std::vector<Point>& poly) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > p.y) != (poly[j].y > p.y) &&
        p.x < (poly[j].x - poly[i].x) * (p.y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
      in = !in;
  }
  return in;
}

std::vector<Point> random_walk(Rng& rng, int size, int points, double step) {
  std::vector<Point> line;
  Point p{rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size};
  double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
  line.push_back(p);
  for (int i = 1; i < points; ++i) {
    heading += rng.uniform(-0.7, 0.7);
    p.x = std::clamp(p.x + step * std::cos(heading), 0.0, static_cast<double>(size));
    p.y = std::clamp(p.y + step * std::sin(heading), 0.0, static_cast<double>(size));
    line.push_back(p);
  }
  return line;
}

// Region of one defect class; `s` is the size relative to a 32-pixel image.
Region draw_shape(int cls, int size, Rng& rng) {
  const double s = size / 32.0;
  Region r(static_cast<std::size_t>(size) * size, 0);
  auto fill = [&](const std::function<bool(double, double)>& pred) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (pred(x + 0.5, y + 0.5)) r[y * size + x] = 1;
  };
  const double cx = rng.uniform(0.25, 0.75) * size, cy = rng.uniform(0.25, 0.75) * size;
  switch (cls) {
    case 1: {  // crack: thick polyline
      stroke(r, size, random_walk(rng, size, rng.uniform_int(3, 5), 7.0 * s), 1.6 * s);
      break;
    }
    case 2: {  // hole: ellipse
      const double rx = rng.uniform(4.0, 7.5) * s, ry = rng.uniform(4.0, 7.5) * s;
      fill([&](double x, double y) {
        return ((x - cx) * (x - cx)) / (rx * rx) + ((y - cy) * (y - cy)) / (ry * ry) <= 1.0;
      });
      break;
    }
    case 3: {  // root: branching polyline
      auto trunk = random_walk(rng, size, 4, 7.0 * s);
      stroke(r, size, trunk, 1.5 * s);
      const int branches = rng.uniform_int(2, 3);
      for (int b = 0; b < branches; ++b) {
        const Point from = trunk[rng.uniform_int(1, static_cast<int>(trunk.size()) - 1)];
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi), len = rng.uniform(4.0, 8.0) * s;
        stroke(r, size, {from, {from.x + len * std::cos(a), from.y + len * std::sin(a)}}, 1.5 * s);
      }
      break;
    }
    case 4: {  // deposit: blob of overlapping discs
      const int discs = rng.uniform_int(3, 5);
      std::vector<std::array<double, 3>> d;
      for (int i = 0; i < discs; ++i)
        d.push_back({cx + rng.uniform(-4.0, 4.0) * s, cy + rng.uniform(-4.0, 4.0) * s, rng.uniform(2.5, 4.5) * s});
      fill([&](double x, double y) {
        for (auto& [dx, dy, rad] : d)
          if ((x - dx) * (x - dx) + (y - dy) * (y - dy) <= rad * rad) return true;
        return false;
      });
      break;
    }
    case 5: {  // joint offset: straight band across the image
      const double width = rng.uniform(4.0, 6.5) * s;
      const bool horizontal = rng.bernoulli(0.5);
      const double at = rng.uniform(0.2, 0.8) * size;
      fill([&](double x, double y) { return std::abs((horizontal ? y : x) - at) <= width / 2.0; });
      break;
    }
    case 6: {  // fracture: jagged star polygon
      const int verts = 2 * rng.uniform_int(4, 6);
      std::vector<Point> poly;
      for (int i = 0; i < verts; ++i) {
        const double a = 2.0 * std::numbers::pi * i / verts + rng.uniform(-0.2, 0.2);
        const double rad = (i % 2 == 0 ? rng.uniform(6.5, 9.0) : rng.uniform(2.5, 4.0)) * s;
        poly.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
      }
      fill([&](double x, double y) { return inside_polygon({x, y}, poly); });
      break;
    }
    case 7: {  // water: bottom region with a wavy surface
      const double depth = rng.uniform(5.0, 8.0) * s, amp = rng.uniform(0.5, 1.5) * s;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      fill([&](double x, double y) { return y >= size - depth + amp * std::sin(phase + x / (3.0 * s)); });
      break;
    }
    case 8: {  // encrustation: annulus
      const double outer = rng.uniform(6.0, 8.5) * s, inner = outer - rng.uniform(2.8, 3.8) * s;
      fill([&](double x, double y) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        return d2 <= outer * outer && d2 >= inner * inner;
      });
      break;
    }
    default:
      throw ContractError("no generator for class " + std::to_string(cls));
  }
  return r;
}

// Class appearance: base intensity plus a class-specific texture.
double appearance(int cls, int x, int y, double s, Rng& rng) {
  const int u = static_cast<int>(x / s), v = static_cast<int>(y / s);
  switch (cls) {
    case 1: return 0.12 + rng.normal(0.0, 0.03);
    case 2: return 0.03;
    case 3: return 0.62 + 0.08 * std::sin((u + v) * std::numbers::pi / 2.0);
    case 4: return 0.80 + (rng.bernoulli(0.2) ? 0.15 : 0.0);
    case 5: return 0.30 + ((v / 2) % 2 == 0 ? 0.1 : -0.1);
    case 6: return 0.22 + ((u + v) % 2 == 0 ? 0.1 : -0.1);
    case 7: return 0.72 + 0.06 * std::sin(u * std::numbers::pi / 3.0);
    case 8: return 0.52 + (((u / 2) + (v / 2)) % 2 == 0 ? 0.15 : -0.15);
    default: return 0.42;
  }
}

void paint(Canvas& c, const Region& r, int cls, Rng& rng) {
  const double s = c.size / 32.0;
  for (int y = 0; y < c.size; ++y)
    for (int x = 0; x < c.size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * c.size + x;
      if (!r[i]) continue;
      c.intensity[i] = appearance(cls, x, y, s, rng);
      c.labels.labels[i] = cls;
    }
}

std::size_t area(const Region& r) { return static_cast<std::size_t>(std::count(r.begin(), r.end(), 1)); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string image_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d.png", id);
  return buf;
}

}  // namespace

DatasetMeta generate_synthetic_dataset(const fs::path& root, int count, int image_size, std::uint64_t seed) {
  DatasetMeta meta;
  meta.image_size = image_size;
  meta.count = count;
  meta.seed = seed;
  meta.validate();
  PROTOSEG_REQUIRE(count >= 10 * meta.num_classes, "synthetic dataset needs count >= " +
                                                        std::to_string(10 * meta.num_classes) + ", got " +
                                                        std::to_string(count));
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec || !fs::is_directory(root / "images") || !fs::is_directory(root / "masks"))
    throw DataError(DataError::Kind::kIo, "cannot create dataset directories under " + root.string());

  const double s = image_size / 32.0;
  const std::size_t pixels = static_cast<std::size_t>(image_size) * image_size;
  const std::size_t min_primary = static_cast<std::size_t>(std::ceil(60.0 * s * s));
  std::vector<double> class_pixels(meta.num_classes, 0.0);
  std::vector<std::vector<int>> by_primary(kDefectClasses + 1);

  for (int id = 0; id < count; ++id) {
    Rng rng = Rng::stream(mix_seed(seed, static_cast<std::uint64_t>(id)), "synthetic-image");
    const int primary = id % kDefectClasses + 1;
    by_primary[primary].push_back(id);
    Canvas canvas(image_size);
    // Background: tilted illumination with a soft blotch.
    const double gx = rng.uniform(-0.06, 0.06), gy = rng.uniform(-0.06, 0.06);
    const double bx = rng.uniform(0.0, image_size), by = rng.uniform(0.0, image_size);
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        const double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (64.0 * s * s);
        canvas.intensity[static_cast<std::size_t>(y) * image_size + x] =
            0.42 + gx * (x / (double)image_size - 0.5) + gy * (y / (double)image_size - 0.5) + 0.05 * std::exp(-d2);
      }

    Region primary_region;
    for (int attempt = 0; attempt < 100; ++attempt) {
      primary_region = draw_shape(primary, image_size, rng);
      if (area(primary_region) >= min_primary && area(primary_region) <= pixels * 3 / 10) break;
    }
    if (area(primary_region) < min_primary)
      throw ContractError("synthetic generator could not place class " + class_names()[primary]);

    if (rng.bernoulli(0.5)) {
      int secondary = rng.uniform_int(1, kDefectClasses - 1);
      if (secondary >= primary) ++secondary;
      Region r = draw_shape(secondary, image_size, rng);
      std::size_t combined = 0;
      for (std::size_t i = 0; i < pixels; ++i) combined += (r[i] | primary_region[i]);
      if (combined <= pixels * 2 / 5) paint(canvas, r, secondary, rng);
    }
    paint(canvas, primary_region, primary, rng);

    GrayImage img{image_size, image_size, std::vector<std::uint8_t>(pixels)};
    GrayImage msk{image_size, image_size, std::vector<std::uint8_t>(pixels)};
    for (std::size_t i = 0; i < pixels; ++i) {
      const double v = canvas.intensity[i] + rng.normal(0.0, 0.03);
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      msk.pixels[i] = static_cast<std::uint8_t>(canvas.labels.labels[i]);
      class_pixels[canvas.labels.labels[i]] += 1.0;
    }
    write_png(root / "images" / image_name(id), img);
    write_png(root / "masks" / image_name(id), msk);
  }

  const double total = static_cast<double>(pixels) * count;
  for (double& f : class_pixels) f /= total;
  meta.class_frequencies = class_pixels;

  // Stratified by primary class so every split sees every class.
  Rng split_rng = Rng::stream(seed, "split");
  for (int cls = 1; cls <= kDefectClasses; ++cls) {
    auto ids = by_primary[cls];
    std::shuffle(ids.begin(), ids.end(), split_rng.engine());
    const std::size_t n_train = static_cast<std::size_t>(std::lround(0.70 * ids.size()));
    const std::size_t n_val = static_cast<std::size_t>(std::lround(0.15 * ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i < n_train ? meta.train : i < n_train + n_val ? meta.val : meta.test).push_back(ids[i]);
    }
  }
  for (auto* v : {&meta.train, &meta.val, &meta.test}) std::sort(v->begin(), v->end());

  json j;
  j["num_classes"] = meta.num_classes;
  j["image_size"] = meta.image_size;
  j["count"] = meta.count;
  j["seed"] = meta.seed;
  j["class_names"] = class_names();
  j["class_frequencies"] = meta.class_frequencies;
  j["splits"] = {{"train", meta.train}, {"val", meta.val}, {"test", meta.test}};
  j["generator"] = "synthetic-defects-v1";
  write_json(root / "meta.json", j);
  return meta;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

DatasetMeta read_meta(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::kIo, "missing " + path.string());
  json j;
  try {
    in >> j;
    DatasetMeta m;
    m.num_classes = j.at("num_classes").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.count = j.value("count", 0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.class_frequencies = j.value("class_frequencies", std::vector<double>{});
    const auto& splits = j.at("splits");
    m.train = splits.at("train").get<std::vector<int>>();
    m.val = splits.at("val").get<std::vector<int>>();
    m.test = splits.at("test").get<std::vector<int>>();
    return m;
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::kFormat, "malformed " + path.string() + ": " + e.what());
  }
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  std::vector<std::pair<int, fs::path>> images;
  if (fs::is_directory(root / "images")) {
    for (const auto& entry : fs::directory_iterator(root / "images")) {
      const auto name = entry.path().filename().string();
      if (entry.path().extension() != ".png") continue;
      try {
        images.emplace_back(std::stoi(entry.path().stem().string()), entry.path());
      } catch (const std::exception&) {
        throw DataError(DataError::Kind::kFormat, "unexpected image name " + name);
      }
    }
  }
  if (images.empty()) throw DataError(DataError::Kind::kNoSamples, "no samples found under " + root.string());
  std::sort(images.begin(), images.end());

  Dataset ds;
  ds.root_ = root;
  ds.meta_ = read_meta(root / "meta.json");
  ds.meta_.validate();
  const int k = ds.meta_.num_classes;
  for (const auto& [id, path] : images) {
    const fs::path mask_path = root / "masks" / path.filename();
    if (!fs::exists(mask_path))
      throw DataError(DataError::Kind::kMissingMask, "missing mask for image " + path.string());
    GrayImage img = read_png(path);
    GrayImage msk = read_png(mask_path);
    if (img.height != msk.height || img.width != msk.width)
      throw DataError(DataError::Kind::kSizeMismatch, "size mismatch between " + path.string() + " and its mask");
    if (img.height != ds.meta_.image_size || img.width != ds.meta_.image_size)
      throw DataError(DataError::Kind::kSizeMismatch,
                      "image " + path.string() + " is " + std::to_string(img.height) + "x" +
                          std::to_string(img.width) + ", meta.json declares " +
                          std::to_string(ds.meta_.image_size));
    Sample s;
    s.id = id;
    s.image = Tensor(Shape{1, img.height, img.width, 1});
    s.mask = SegMask(img.height, img.width);
    s.class_pixels.assign(k, 0);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      s.image[i] = img.pixels[i] / 127.5 - 1.0;
      const int label = msk.pixels[i];
      if (label >= k)
        throw DataError(DataError::Kind::kLabelOutOfRange,
                        "label out of range: " + std::to_string(label) + " in " + mask_path.string() +
                            " (num_classes " + std::to_string(k) + ")");
      s.mask.labels[i] = label;
      ++s.class_pixels[label];
    }
    for (int c = 0; c < k; ++c)
      if (s.class_pixels[c] > 0) ds.index_[c].push_back(id);
    ds.position_[id] = ds.samples_.size();
    ds.samples_.push_back(std::move(s));
  }
  for (const auto* split : {&ds.meta_.train, &ds.meta_.val, &ds.meta_.test})
    for (int id : *split)
      if (!ds.position_.count(id))
        throw DataError(DataError::Kind::kFormat, "meta.json split lists unknown image id " + std::to_string(id));
  return ds;
}

std::vector<int> Dataset::split_ids(Split split) const {
  switch (split) {
    case Split::kTrain: return meta_.train;
    case Split::kVal: return meta_.val;
    case Split::kTest: return meta_.test;
    case Split::kAll: break;
  }
  std::vector<int> all;
  for (const auto& s : samples_) all.push_back(s.id);
  return all;
}

std::vector<int> Dataset::images_with(int class_id, int min_pixels, Split split) const {
  std::vector<int> out;
  for (int id : split_ids(split)) {
    const auto& s = sample(id);
    if (class_id < static_cast<int>(s.class_pixels.size()) && s.class_pixels[class_id] >= std::max(min_pixels, 1))
      out.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

void EpisodeSpec::validate(int num_classes) const {
  PROTOSEG_REQUIRE(n_ways >= 1 && n_ways <= num_classes - 1, "n_ways must be in 1.." +
                                                                  std::to_string(num_classes - 1) + ", got " +
                                                                  std::to_string(n_ways));
  PROTOSEG_REQUIRE(k_shots >= 1, "k_shots must be >= 1");
  PROTOSEG_REQUIRE(n_query >= 1, "n_query must be >= 1");
  PROTOSEG_REQUIRE(min_class_pixels >= 1, "min_class_pixels must be >= 1");
}

int Episode::episode_label(int dataset_class) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == dataset_class) return static_cast<int>(i) + 1;
  return 0;
}

namespace {

Tensor stack_images(const std::vector<EpisodeSample>& samples) {
  PROTOSEG_REQUIRE(!samples.empty(), "episode has no images to stack");
  const Shape one = samples.front().image.shape();
  Tensor out(Shape{static_cast<int>(samples.size()), one.h, one.w, one.c});
  const std::size_t stride = one.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    PROTOSEG_REQUIRE(samples[i].image.shape() == one, "episode images differ in shape");
    std::copy(samples[i].image.storage().begin(), samples[i].image.storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

std::vector<SegMask> masks_of(const std::vector<EpisodeSample>& samples) {
  std::vector<SegMask> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.mask);
  return out;
}

// k distinct elements of `pool` by partial Fisher-Yates.
std::vector<int> draw(std::vector<int> pool, int k, Rng& rng) {
  for (int i = 0; i < k; ++i) std::swap(pool[i], pool[rng.uniform_int(i, static_cast<int>(pool.size()) - 1)]);
  pool.resize(k);
  return pool;
}

}  // namespace

Tensor Episode::support_images() const { return stack_images(support); }
Tensor Episode::query_images() const { return stack_images(query); }
std::vector<SegMask> Episode::support_masks() const { return masks_of(support); }
std::vector<SegMask> Episode::query_masks() const { return masks_of(query); }

Episode sample_episode(const Dataset& dataset, Split split, const EpisodeSpec& spec, Rng& rng) {
  const int k_classes = dataset.meta().num_classes;
  spec.validate(k_classes);
  std::vector<int> defect_classes;
  for (int c = 1; c < k_classes; ++c) defect_classes.push_back(c);

  Episode ep;
  ep.n_ways = spec.n_ways;
  ep.k_shots = spec.k_shots;
  ep.classes = draw(defect_classes, spec.n_ways, rng);

  std::set<int> used;
  std::vector<std::pair<int, int>> support_ids;  // (image id, class)
  for (int cls : ep.classes) {
    std::vector<int> eligible;
    for (int id : dataset.images_with(cls, spec.min_class_pixels, split))
      if (!used.count(id)) eligible.push_back(id);
    if (static_cast<int>(eligible.size()) < spec.k_shots) {
      const std::string name = cls < static_cast<int>(class_names().size()) ? class_names()[cls] : "?";
      throw DataError(DataError::Kind::kUnderPopulated,
                      "class under-populated: class " + std::to_string(cls) + " (" + name + ") has " +
                          std::to_string(eligible.size()) + " eligible images in the " + to_string(split) +
                          " split, need " + std::to_string(spec.k_shots));
    }
    for (int id : draw(eligible, spec.k_shots, rng)) {
      used.insert(id);
      support_ids.emplace_back(id, cls);
    }
  }

  std::vector<int> query_pool;
  for (int id : dataset.split_ids(split)) {
    if (used.count(id)) continue;
    const auto& s = dataset.sample(id);
    for (int cls : ep.classes)
      if (s.class_pixels[cls] >= spec.min_class_pixels) {
        query_pool.push_back(id);
        break;
      }
  }
  if (static_cast<int>(query_pool.size()) < spec.n_query)
    throw DataError(DataError::Kind::kUnderPopulated,
                    "query pool under-populated: " + std::to_string(query_pool.size()) +
                        " eligible images in the " + to_string(split) + " split, need " +
                        std::to_string(spec.n_query));
  const auto query_ids = draw(query_pool, spec.n_query, rng);

  auto relabel = [&](int id, int source_class) {
    const Sample& s = dataset.sample(id);
    EpisodeSample e;
    e.image_id = id;
    e.source_class = source_class;
    e.image = s.image;
    e.mask = SegMask(s.mask.height, s.mask.width);
    for (std::size_t i = 0; i < s.mask.size(); ++i) e.mask.labels[i] = ep.episode_label(s.mask.labels[i]);
    return e;
  };
  for (auto [id, cls] : support_ids) ep.support.push_back(relabel(id, cls));
  for (int id : query_ids) ep.query.push_back(relabel(id, 0));
  return ep;
}

}  // namespace protoseg
