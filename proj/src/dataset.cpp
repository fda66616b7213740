#include "samref/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <random>

#include "samref/components.hpp"
#include "samref/util.hpp"

namespace samref {

namespace {

using Rng = std::mt19937_64;

struct Vec2 {
  double x, y;
};

/// Implicit shape in unit image coordinates.
struct Shape {
  enum Kind { Polygon, Ellipse, Ring } kind = Ellipse;
  Vec2 c{0.5, 0.5};
  double rx = 0.2, ry = 0.2, angle = 0;
  double inner = 0;  // ring inner radius fraction
  std::vector<Vec2> poly;
  // optional hole (ellipse) and protrusions (oriented thin rectangles)
  bool hole = false;
  Vec2 hole_c{0.5, 0.5};
  double hole_rx = 0, hole_ry = 0;
  struct Bar {
    Vec2 a, dir;
    double length, half_width;
  };
  std::vector<Bar> bars;

  bool body(double x, double y) const {
    const double dx = x - c.x, dy = y - c.y;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
    switch (kind) {
      case Ellipse: return u * u + v * v <= 1;
      case Ring: {
        const double r2 = u * u + v * v;
        return r2 <= 1 && r2 >= inner * inner;
      }
      case Polygon: {
        bool in = false;
        for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
          const auto& a = poly[i];
          const auto& b = poly[j];
          if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
        }
        return in;
      }
    }
    return false;
  }
  bool inside(double x, double y) const {
    for (const auto& b : bars) {
      const double px = x - b.a.x, py = y - b.a.y;
      const double t = px * b.dir.x + py * b.dir.y;
      const double n = -px * b.dir.y + py * b.dir.x;
      if (t >= 0 && t <= b.length && std::abs(n) <= b.half_width) return true;
    }
    if (!body(x, y)) return false;
    if (hole) {
      const double u = (x - hole_c.x) / hole_rx, v = (y - hole_c.y) / hole_ry;
      if (u * u + v * v <= 1) return false;
    }
    return true;
  }
};

double uni(Rng& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }

Shape random_body(Rng& rng, Shape::Kind kind, double scale) {
  Shape s;
  s.kind = kind;
  s.c = {uni(rng, 0.3, 0.7), uni(rng, 0.3, 0.7)};
  s.rx = scale * uni(rng, 0.7, 1.0);
  s.ry = scale * uni(rng, 0.6, 1.0);
  s.angle = uni(rng, 0, std::numbers::pi);
  if (kind == Shape::Ring) s.inner = uni(rng, 0.45, 0.65);
  if (kind == Shape::Polygon) {
    const int k = std::uniform_int_distribution<int>(5, 9)(rng);
    for (int i = 0; i < k; ++i) {
      const double a = 2 * std::numbers::pi * (i + uni(rng, -0.25, 0.25)) / k;
      const double r = scale * uni(rng, 0.6, 1.0);
      s.poly.push_back({s.c.x + r * std::cos(a), s.c.y + r * std::sin(a)});
    }
  }
  return s;
}

std::array<double, 3> random_color(Rng& rng) { return {uni(rng, 0, 255), uni(rng, 0, 255), uni(rng, 0, 255)}; }

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

std::array<double, 3> distinct_color(Rng& rng, const std::vector<std::array<double, 3>>& avoid) {
  for (;;) {
    const auto c = random_color(rng);
    bool ok = true;
    for (const auto& a : avoid) ok &= color_distance(c, a) >= 120;
    if (ok) return c;
  }
}

SyntheticSample render(const SyntheticOptions& o, int index, bool want_hole, bool want_bars,
                       Rng& rng) {
  const int S = o.image_size;
  SyntheticSample out;

  Shape target;
  if (want_hole) {
    const int k = std::uniform_int_distribution<int>(0, 2)(rng);
    target = random_body(rng, k == 0 ? Shape::Ring : k == 1 ? Shape::Ellipse : Shape::Polygon,
                         uni(rng, 0.16, 0.26));
    if (target.kind != Shape::Ring) {
      target.hole = true;
      target.hole_c = {target.c.x + uni(rng, -0.02, 0.02), target.c.y + uni(rng, -0.02, 0.02)};
      const double m = std::min(target.rx, target.ry);
      target.hole_rx = m * uni(rng, 0.3, 0.45);
      target.hole_ry = m * uni(rng, 0.3, 0.45);
    }
  } else {
    target = random_body(rng, std::bernoulli_distribution(0.5)(rng) ? Shape::Ellipse : Shape::Polygon,
                         uni(rng, 0.12, 0.24));
  }
  if (want_bars) {
    const int n = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int i = 0; i < n; ++i) {
      const double a = uni(rng, 0, 2 * std::numbers::pi);
      const Vec2 dir{std::cos(a), std::sin(a)};
      const double start = 0.5 * std::min(target.rx, target.ry);
      const double px = 1.0 / o.map_size;  // one map pixel in unit coords
      target.bars.push_back({{target.c.x + start * dir.x, target.c.y + start * dir.y},
                             dir,
                             std::max(target.rx, target.ry) + uni(rng, 0.06, 0.16),
                             px * uni(rng, 0.6, 1.2)});
    }
  }
  out.shape = target.kind == Shape::Ring ? "ring" : target.kind == Shape::Polygon ? "polygon" : "ellipse";

  // Layers: distractors behind, target, distractors in front.
  const int nd = std::uniform_int_distribution<int>(1, 3)(rng);
  std::vector<Shape> behind, front;
  for (int i = 0; i < nd; ++i) {
    const auto kind = static_cast<Shape::Kind>(std::uniform_int_distribution<int>(0, 2)(rng));
    Shape d = random_body(rng, kind, uni(rng, 0.06, 0.14));
    d.c = {uni(rng, 0.05, 0.95), uni(rng, 0.05, 0.95)};
    if (kind == Shape::Polygon) {
      const Shape tmp = random_body(rng, kind, d.rx);
      const double ox = d.c.x - tmp.c.x, oy = d.c.y - tmp.c.y;
      d.poly = tmp.poly;
      for (auto& p : d.poly) p = {p.x + ox, p.y + oy};
    }
    (std::bernoulli_distribution(0.5)(rng) ? front : behind).push_back(d);
  }

  const auto bg0 = random_color(rng);
  const auto bg1 = random_color(rng);
  std::vector<std::array<double, 3>> used{bg0, bg1};
  const auto tcol = distinct_color(rng, used);
  used.push_back(tcol);
  std::vector<std::array<double, 3>> bcol, fcol;
  for (std::size_t i = 0; i < behind.size(); ++i) bcol.push_back(distinct_color(rng, used));
  for (std::size_t i = 0; i < front.size(); ++i) fcol.push_back(distinct_color(rng, used));
  const double gangle = uni(rng, 0, 2 * std::numbers::pi);
  const double gx = std::cos(gangle), gy = std::sin(gangle);

  out.image = Image8(S, S, 3);
  out.gt_full = BinaryMask(S, S);
  std::normal_distribution<double> noise(0.0, 6.0);
  constexpr int kSub = 4;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double acc[3] = {0, 0, 0};
      int tcount = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = (x + (sx + 0.5) / kSub) / S, v = (y + (sy + 0.5) / kSub) / S;
          const double t = std::clamp(0.5 + 0.7 * ((u - 0.5) * gx + (v - 0.5) * gy), 0.0, 1.0);
          std::array<double, 3> col{bg0[0] * (1 - t) + bg1[0] * t, bg0[1] * (1 - t) + bg1[1] * t,
                                    bg0[2] * (1 - t) + bg1[2] * t};
          bool is_target = false;
          for (std::size_t i = 0; i < behind.size(); ++i)
            if (behind[i].inside(u, v)) col = bcol[i];
          if (target.inside(u, v)) {
            col = tcol;
            is_target = true;
          }
          for (std::size_t i = 0; i < front.size(); ++i)
            if (front[i].inside(u, v)) {
              col = fcol[i];
              is_target = false;
            }
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
          tcount += is_target;
        }
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) = static_cast<std::uint8_t>(
            std::clamp(std::lround(acc[c] / (kSub * kSub) + noise(rng)), 0L, 255L));
      out.gt_full.at(y, x) = 2 * tcount >= kSub * kSub ? 1 : 0;
    }
  out.gt = downsample_mask(out.gt_full, o.map_size);
  out.has_hole = mask_has_hole(out.gt);
  out.has_protrusion = want_bars;
  char id[32];
  std::snprintf(id, sizeof id, "%06d", index);
  out.id = id;
  out.matches_request = want_hole == out.has_hole;
  return out;
}

}  // namespace

bool mask_has_hole(const BinaryMask& mask) {
  BinaryMask bg(mask.height, mask.width);
  for (std::size_t i = 0; i < bg.bits.size(); ++i) bg.bits[i] = mask.bits[i] ? 0 : 1;
  const Labeling lab = label_components(bg);
  for (const auto& c : lab.components)
    if (c.row0 > 0 && c.col0 > 0 && c.row1 < mask.height && c.col1 < mask.width) return true;
  return false;
}

SyntheticSample generate_sample(const SyntheticOptions& o, int index) {
  require(o.image_size % o.map_size == 0, ErrorCode::InvalidArgument,
          "image size must be a multiple of the map size");
  std::seed_seq seq{std::uint64_t(o.seed), std::uint64_t(index), std::uint64_t(0x5a17)};
  Rng rng(seq);
  // Flags are drawn once so rejection sampling cannot bias their frequency.
  const bool want_hole = std::bernoulli_distribution(o.hole_fraction)(rng);
  const bool want_bars = std::bernoulli_distribution(o.protrusion_fraction)(rng);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    SyntheticSample s = render(o, index, want_hole, want_bars, rng);
    if (!s.matches_request) continue;
    if (static_cast<int>(s.gt.count()) < o.min_foreground) continue;
    return s;
  }
  fail(ErrorCode::Internal, "synthetic generator could not satisfy its constraints");
}

void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticOptions& o,
                             bool force) {
  namespace fs = std::filesystem;
  require(o.count >= 1, ErrorCode::InvalidArgument, "dataset size must be >= 1");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      fail(ErrorCode::Conflict, dir.string() + " is not empty (pass --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::string meta;
  int holes = 0, bars = 0;
  for (int i = 0; i < o.count; ++i) {
    const SyntheticSample s = generate_sample(o, i);
    write_png(dir / "images" / (s.id + ".png"), s.image);
    write_png(dir / "masks" / (s.id + ".png"), mask_to_gray(s.gt_full));
    nlohmann::json row{{"id", s.id},
                       {"shape", s.shape},
                       {"has_hole", s.has_hole},
                       {"has_protrusion", s.has_protrusion},
                       {"foreground_map_pixels", s.gt.count()}};
    meta += row.dump() + "\n";
    holes += s.has_hole;
    bars += s.has_protrusion;
  }
  write_file_atomic(dir / "meta.jsonl", meta);
  nlohmann::json manifest{{"generator", "synthetic-shapes"},
                          {"count", o.count},
                          {"seed", o.seed},
                          {"image_size", o.image_size},
                          {"map_size", o.map_size},
                          {"hole_fraction", o.hole_fraction},
                          {"protrusion_fraction", o.protrusion_fraction},
                          {"with_hole", holes},
                          {"with_protrusion", bars}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<DatasetItem> list_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path images = dir / "images";
  if (!fs::is_directory(images)) fail(ErrorCode::NotFound, "no images directory under " + dir.string());
  std::map<std::string, std::pair<bool, bool>> flags;
  if (fs::exists(dir / "meta.jsonl")) {
    std::ifstream in(dir / "meta.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("id")) fail(ErrorCode::Format, "bad meta.jsonl line");
      flags[j["id"].get<std::string>()] = {j.value("has_hole", false), j.value("has_protrusion", false)};
    }
  }
  std::vector<DatasetItem> items;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.path().extension() != ".png") continue;
    DatasetItem it;
    it.id = e.path().stem().string();
    it.image_path = e.path();
    const fs::path m = dir / "masks" / (it.id + ".png");
    if (fs::exists(m)) it.mask_path = m;
    if (const auto f = flags.find(it.id); f != flags.end()) {
      it.has_hole = f->second.first;
      it.has_protrusion = f->second.second;
    }
    items.push_back(std::move(it));
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return items;
}

LoadedSample load_sample(const DatasetItem& item, const ModelDims& dims) {
  require(!item.mask_path.empty(), ErrorCode::NotFound, "no gt mask for " + item.id);
  LoadedSample s;
  s.id = item.id;
  s.image = make_image_plane(read_png(item.image_path, 3), dims.image_size());
  const Image8 gray = read_png(item.mask_path, 1);
  const Image8 g = resize_image(gray, dims.image_size(), dims.image_size());
  s.gt = downsample_mask(mask_from_gray(g), dims.map_size);
  s.has_hole = item.has_hole;
  s.has_protrusion = item.has_protrusion;
  return s;
}

std::string directory_hash(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      files.emplace_back(fs::relative(e.path(), dir).generic_string(), sha256_hex(read_file(e.path())));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& [p, h] : files) all += p + " " + h + "\n";
  return sha256_hex(all);
}

}  // namespace samref
