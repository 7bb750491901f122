#include "thrid/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "thrid/error.hpp"
#include "thrid/parallel.hpp"

namespace thrid {
namespace {

constexpr double kRef = 96.0;  // reference frame size
constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0, y = 0;
};

Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
double norm(Vec2 a) { return std::sqrt(dot(a, a)); }

double sd_circle(Vec2 p, Vec2 c, double r) { return norm(p - c) - r; }

double sd_segment(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double t = std::clamp(dot(p - a, ab) / std::max(dot(ab, ab), 1e-12), 0.0, 1.0);
  return norm(p - (a + t * ab));
}

double sd_capsule(Vec2 p, Vec2 a, Vec2 b, double r) { return sd_segment(p, a, b) - r; }

// Soft edge over roughly one pixel; 1 deep inside, 0 outside.
double coverage(double sd) {
  const double t = std::clamp(0.5 - sd, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Brighten-only compositing: radiograph structures only add density.
void paint(double& v, double intensity, double cov) {
  if (cov <= 0.0 || intensity <= v) return;
  v += (intensity - v) * cov;
}

// ---- stylized implant geometry (canonical, unrotated frame) ----
//
// Shoulder sits at y=34 on the shaft axis x=57; the stem runs down from
// there. The tapered tip cap of class A extends 6 px past the distal end, so
// stem lengths are capped to keep every tip inside the frame after the +-8
// degree nuisance rotation.

struct ImplantGeometry {
  Vec2 anchor;         // proximal shoulder center
  double stem_x;       // shaft axis
  double stem_top;     // y of shoulder
  double stem_bottom;  // y of distal end
  double stem_len;
  int tip_profile;
  Vec2 elbow;  // neck bend (carries the neck-shaft angle)
  Vec2 head;   // femoral head center
  bool collar = false;
  bool sleeve = false;
  double cup_inner = 8.6;
  double cup_outer = 11.6;  // thick rim (A, C) vs thin rim (B)
  bool cup_tabs = false;    // rim tabs (A, C)
  Vec2 cup_open_dir;        // unit vector toward the cup opening
  Vec2 cup_tab1, cup_tab2;
};

ImplantGeometry make_geometry(const PhantomScene& s) {
  ImplantGeometry g;
  g.stem_x = 57.0;
  g.stem_top = 34.0;
  g.stem_len = s.stem_length_px;
  g.stem_bottom = g.stem_top + g.stem_len;
  g.anchor = {g.stem_x, g.stem_top + 2.0};
  g.tip_profile = s.tip_profile;
  const double ang = (s.neck_shaft_angle_deg - 90.0) * kPi / 180.0;
  const Vec2 u{-std::cos(ang), -std::sin(ang)};  // up-medial
  g.elbow = g.anchor + 6.0 * u;
  g.head = {g.anchor.x - s.medial_offset_px, g.anchor.y - s.vertical_height_px};
  g.collar = s.collar;
  g.sleeve = s.sleeve;
  const bool thin_cup = s.design_class == DesignClass::B;
  g.cup_outer = thin_cup ? 10.8 : 11.6;
  g.cup_tabs = !thin_cup;
  Vec2 open_dir = g.anchor - g.head;
  const double n = std::max(norm(open_dir), 1e-9);
  g.cup_open_dir = (1.0 / n) * open_dir;
  const Vec2 perp{-g.cup_open_dir.y, g.cup_open_dir.x};
  const double rmid = 0.5 * (g.cup_inner + g.cup_outer);
  g.cup_tab1 = g.head + rmid * perp;
  g.cup_tab2 = g.head + (-rmid) * perp;
  return g;
}

double stem_halfwidth(const ImplantGeometry& g, double t) {
  const double top = 6.2;
  switch (g.tip_profile) {
    case 0:  // tapered: narrows steadily toward a point
      return top + (1.4 - top) * t;
    case 1:  // rounded-blunt: keeps more width, capped by a half-disk
      return top + (2.6 - top) * t;
    default:  // cylindrical-flat: tapers early, then constant width
      return t < 0.72 ? top + (3.0 - top) * (t / 0.72) : 3.0;
  }
}

double sd_stem(const ImplantGeometry& g, Vec2 p) {
  double sd = 1e9;
  if (p.y >= g.stem_top - 1.0 && p.y <= g.stem_bottom) {
    const double t = std::clamp((p.y - g.stem_top) / g.stem_len, 0.0, 1.0);
    sd = std::abs(p.x - g.stem_x) - stem_halfwidth(g, t);
    sd = std::max(sd, std::max(g.stem_top - 1.0 - p.y, p.y - g.stem_bottom));
  }
  // distal cap per tip profile
  if (g.tip_profile == 0) {
    // triangular point over 6 px
    const double e = 6.0, w = 1.4;
    const double ty = p.y - g.stem_bottom;
    if (ty >= 0.0 && ty <= e && std::abs(p.x - g.stem_x) <= w * (1.0 - ty / e)) {
      sd = std::min(sd, -1.0);
    }
  } else if (g.tip_profile == 1) {
    sd = std::min(sd, sd_circle(p, {g.stem_x, g.stem_bottom}, 2.6));
  }
  // tip 2 (flat) has no cap: the silhouette ends square
  return sd;
}

double sd_shoulder(const ImplantGeometry& g, Vec2 p) {
  // lateral shoulder bump
  return sd_circle(p, {g.stem_x + 4.6, g.stem_top - 0.5}, 4.0);
}

double sd_neck(const ImplantGeometry& g, Vec2 p) {
  return std::min(sd_capsule(p, g.anchor, g.elbow, 4.2), sd_capsule(p, g.elbow, g.head, 3.6));
}

double sd_head(const ImplantGeometry& g, Vec2 p) { return sd_circle(p, g.head, 7.4); }

double sd_cup(const ImplantGeometry& g, Vec2 p) {
  const Vec2 d = p - g.head;
  const double r = norm(d);
  double sd = std::max(g.cup_inner - r, r - g.cup_outer);
  // keep the shell on the side away from the opening
  const double side = r > 1e-9 ? dot((1.0 / r) * d, g.cup_open_dir) : 1.0;
  sd = std::max(sd, (side - 0.15) * 6.0);
  if (g.cup_tabs) {
    sd = std::min(sd, sd_circle(p, g.cup_tab1, 1.8));
    sd = std::min(sd, sd_circle(p, g.cup_tab2, 1.8));
  }
  return sd;
}

double sd_collar(const ImplantGeometry& g, Vec2 p) {
  if (!g.collar) return 1e9;
  // plate perpendicular to the proximal neck segment
  Vec2 u = g.elbow - g.anchor;
  const double n = std::max(norm(u), 1e-9);
  u = (1.0 / n) * u;
  const Vec2 v{-u.y, u.x};
  const Vec2 c = g.anchor + 1.5 * u;
  const Vec2 d = p - c;
  return std::max(std::abs(dot(d, u)) - 1.6, std::abs(dot(d, v)) - 6.4);
}

double sd_sleeve(const ImplantGeometry& g, Vec2 p) {
  if (!g.sleeve) return 1e9;
  const double y0 = g.stem_top + 2.0, y1 = g.stem_top + 18.0;
  if (p.y < y0 || p.y > y1) return 1e9;
  const double t = (p.y - y0) / (y1 - y0);
  const double hw = 9.0 + (6.0 - 9.0) * t;
  return std::abs(p.x - g.stem_x) - hw;
}

struct ClutterEllipse {
  Vec2 c;
  double a, b, angle, delta;
};

// All per-scene noise comes from this plan so rendering stays a pure function
// of the scene.
struct NoisePlan {
  std::vector<ClutterEllipse> clutter;
  std::uint64_t pixel_seed = 0;
};

NoisePlan make_noise_plan(const PhantomScene& s) {
  NoisePlan plan;
  Rng rng(derive_seed(s.texture_seed, 0xC177E3));
  plan.clutter.reserve(static_cast<std::size_t>(s.clutter_count));
  for (int i = 0; i < s.clutter_count; ++i) {
    ClutterEllipse e;
    e.c = {rng.uniform(5.0, kRef - 5.0), rng.uniform(5.0, kRef - 5.0)};
    e.a = rng.uniform(4.0, 14.0);
    e.b = rng.uniform(3.0, 10.0);
    e.angle = rng.uniform(0.0, kPi);
    e.delta = rng.uniform(-0.06, 0.06);
    plan.clutter.push_back(e);
  }
  plan.pixel_seed = rng.next_u64();
  return plan;
}

void validate_scene(const PhantomScene& s) {
  auto in_range = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in_range(s.medial_offset_px, 8.0, 20.0) || !in_range(s.vertical_height_px, 8.0, 18.0) ||
      !in_range(s.neck_shaft_angle_deg, 120.0, 145.0) ||
      !in_range(s.stem_length_px, 30.0, 54.0)) {
    throw FormatError("phantom geometry out of range");
  }
  if (s.tip_profile < 0 || s.tip_profile > 2) throw FormatError("bad tip profile id");
  if (s.clutter_count < 0 || s.clutter_count > 16) throw FormatError("clutter count out of range");
  if (!in_range(s.rotation_deg, -15.0, 15.0) || !in_range(s.exposure_gain, 0.7, 1.3)) {
    throw FormatError("phantom nuisance parameter out of range");
  }
}

}  // namespace

std::string design_label(DesignClass c) {
  switch (c) {
    case DesignClass::A: return "A";
    case DesignClass::B: return "B";
    case DesignClass::C: return "C";
  }
  return "A";
}

DesignClass design_from_label(const std::string& label) {
  if (label == "A") return DesignClass::A;
  if (label == "B") return DesignClass::B;
  if (label == "C") return DesignClass::C;
  throw FormatError("unknown design label '" + label + "'");
}

RenderedPhantom render(const PhantomScene& scene, int size) {
  validate_scene(scene);
  const ImplantGeometry g = make_geometry(scene);
  const NoisePlan plan = make_noise_plan(scene);
  const double scale = kRef / static_cast<double>(size);
  const double theta = scene.rotation_deg * kPi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double half = kRef * 0.5;

  RenderedPhantom out;
  out.image = GrayImage(size, size);
  out.masks.implant = GrayImage(size, size);
  out.masks.tip = GrayImage(size, size);
  out.masks.collar = GrayImage(size, size);
  out.masks.sleeve = GrayImage(size, size);
  out.masks.cup = GrayImage(size, size);

  Rng pixel_rng(plan.pixel_seed);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      // canonical point: undo the global rotation about the frame center
      const double qx = (x + 0.5) * scale - half;
      const double qy = (y + 0.5) * scale - half;
      const Vec2 p{qx * c + qy * s + half, -qx * s + qy * c + half};

      double v = 0.22 + 0.05 * (p.y / kRef);
      for (const ClutterEllipse& e : plan.clutter) {
        const double ca = std::cos(e.angle), sa = std::sin(e.angle);
        const Vec2 d = p - e.c;
        const double ex = (d.x * ca + d.y * sa) / e.a;
        const double ey = (-d.x * sa + d.y * ca) / e.b;
        if (ex * ex + ey * ey <= 1.0) v += e.delta;
      }

      // bone
      paint(v, 0.33, coverage(sd_circle(p, {30.0, 12.0}, 18.0)));                // pelvis hint
      paint(v, 0.42, coverage(sd_capsule(p, {57.5, 36.0}, {57.5, 94.0}, 8.8)));  // shaft
      paint(v, 0.42, coverage(sd_circle(p, {67.5, 38.0}, 6.5)));                 // trochanter

      // implant (metal)
      const double sd_stem_v = std::min(sd_stem(g, p), sd_shoulder(g, p));
      const double sd_neck_v = sd_neck(g, p);
      const double sd_head_v = sd_head(g, p);
      const double sd_cup_v = sd_cup(g, p);
      const double sd_collar_v = sd_collar(g, p);
      const double sd_sleeve_v = sd_sleeve(g, p);
      const double sd_implant =
          std::min({sd_stem_v, sd_neck_v, sd_head_v, sd_cup_v, sd_collar_v, sd_sleeve_v});
      paint(v, 0.91, coverage(sd_implant));

      // noise (fixed per-pixel draw order)
      v += pixel_rng.normal(0.0, 0.02);
      const double sp = pixel_rng.uniform();
      if (sp < 0.001) {
        v = 0.0;
      } else if (sp > 0.999) {
        v = 1.0;
      }
      v = std::clamp(v * scene.exposure_gain, 0.0, 1.0);
      out.image.set(x, y, static_cast<std::uint8_t>(std::lround(v * 255.0)));

      // masks from the hard predicates
      if (sd_implant <= 0.0) out.masks.implant.set(x, y, 255);
      if (sd_stem(g, p) <= 0.0 && p.y >= g.stem_bottom - 7.0) out.masks.tip.set(x, y, 255);
      if (sd_collar_v <= 0.0) out.masks.collar.set(x, y, 255);
      if (sd_sleeve_v <= 0.0) out.masks.sleeve.set(x, y, 255);
      if (sd_cup_v <= 0.0) out.masks.cup.set(x, y, 255);
    }
  }
  return out;
}

PhantomScene sample_scene(DesignClass cls, Rng& rng) {
  // Class-independent nuisance substream first: equal seeds give equal
  // nuisance draws for every class.
  Rng nuisance(rng.next_u64());
  Rng geom(rng.next_u64());

  PhantomScene s;
  s.design_class = cls;
  s.texture_seed = nuisance.next_u64();
  s.clutter_count = nuisance.uniform_int(3, 8);
  s.rotation_deg = nuisance.uniform(-8.0, 8.0);
  s.exposure_gain = nuisance.uniform(0.85, 1.15);

  // Overlapping ranges: only tip/collar/sleeve/cup carry the class.
  switch (cls) {
    case DesignClass::A:
      s.medial_offset_px = geom.uniform(10.0, 16.0);
      s.vertical_height_px = geom.uniform(10.0, 15.0);
      s.neck_shaft_angle_deg = geom.uniform(126.0, 138.0);
      s.stem_length_px = geom.uniform(38.0, 50.0);
      s.tip_profile = 0;
      break;
    case DesignClass::B:
      s.medial_offset_px = geom.uniform(11.0, 17.0);
      s.vertical_height_px = geom.uniform(11.0, 16.0);
      s.neck_shaft_angle_deg = geom.uniform(128.0, 140.0);
      s.stem_length_px = geom.uniform(40.0, 52.0);
      s.tip_profile = 1;
      break;
    case DesignClass::C:
      s.medial_offset_px = geom.uniform(10.5, 16.5);
      s.vertical_height_px = geom.uniform(10.0, 15.5);
      s.neck_shaft_angle_deg = geom.uniform(125.0, 137.0);
      s.stem_length_px = geom.uniform(37.0, 49.0);
      s.tip_profile = 2;
      break;
  }
  s.collar = cls == DesignClass::B;
  s.sleeve = cls == DesignClass::C;
  return s;
}

namespace {

std::string index_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, i);
  return buf;
}

}  // namespace

DatasetManifest generate_dataset(const std::array<int, 3>& counts, int size, std::uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  for (int c : counts) {
    if (c < 1) throw FormatError("phantom counts must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (!std::filesystem::exists(out_dir / "images") ||
      !std::filesystem::exists(out_dir / "masks")) {
    throw IoError("cannot create output directory " + out_dir.string());
  }

  const int total = counts[0] + counts[1] + counts[2];
  DatasetManifest manifest;
  manifest.dir = out_dir;
  manifest.records.resize(static_cast<std::size_t>(total));

  parallel_for(static_cast<std::size_t>(total), [&](std::size_t i) {
    const int idx = static_cast<int>(i);
    const DesignClass cls = idx < counts[0]               ? DesignClass::A
                            : idx < counts[0] + counts[1] ? DesignClass::B
                                                          : DesignClass::C;
    Rng rng(derive_seed(seed, 0xF0B0, i));
    const PhantomScene scene = sample_scene(cls, rng);
    const RenderedPhantom rendered = render(scene, size);

    const std::string id = index_id("phantom", idx);
    const std::string rel = "images/" + id + ".png";
    write_png_gray8(out_dir / rel, rendered.image);
    write_png_gray1(out_dir / ("masks/" + id + "_implant.png"), rendered.masks.implant);
    write_png_gray1(out_dir / ("masks/" + id + "_tip.png"), rendered.masks.tip);
    write_png_gray1(out_dir / ("masks/" + id + "_collar.png"), rendered.masks.collar);
    write_png_gray1(out_dir / ("masks/" + id + "_sleeve.png"), rendered.masks.sleeve);
    write_png_gray1(out_dir / ("masks/" + id + "_cup.png"), rendered.masks.cup);

    manifest.records[i] = ManifestRecord{id, rel, design_label(cls), Split::unassigned};
  });

  save_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

namespace {

void render_shape_image(GrayImage& img, DesignClass cls, std::uint64_t scene_seed, int size) {
  Rng rng(scene_seed);
  const double scale = kRef / static_cast<double>(size);

  struct Ring {
    Vec2 c;
    double r, thick;
    bool filled;
  };
  struct Poly {
    std::vector<Vec2> v;
  };
  struct Line {
    Vec2 a, b;
    double r;
  };
  std::vector<Ring> rings;
  std::vector<Poly> polys;
  std::vector<Line> lines;

  switch (cls) {
    case DesignClass::A: {
      const int n = rng.uniform_int(1, 3);
      for (int i = 0; i < n; ++i) {
        Ring ring;
        ring.c = {rng.uniform(16.0, 80.0), rng.uniform(16.0, 80.0)};
        ring.r = rng.uniform(8.0, 20.0);
        ring.thick = rng.uniform(2.0, 4.0);
        ring.filled = rng.uniform() < 0.5;
        rings.push_back(ring);
      }
      break;
    }
    case DesignClass::B: {
      const int n = rng.uniform_int(1, 2);
      for (int i = 0; i < n; ++i) {
        const Vec2 c{rng.uniform(20.0, 76.0), rng.uniform(20.0, 76.0)};
        const double r = rng.uniform(10.0, 20.0);
        const int verts = rng.uniform_int(3, 5);
        std::vector<double> angles;
        for (int k = 0; k < verts; ++k) angles.push_back(rng.uniform(0.0, 2.0 * kPi));
        std::sort(angles.begin(), angles.end());
        Poly poly;
        for (double a : angles) poly.v.push_back(c + r * Vec2{std::cos(a), std::sin(a)});
        polys.push_back(poly);
      }
      break;
    }
    case DesignClass::C: {
      const int n = rng.uniform_int(2, 4);
      for (int i = 0; i < n; ++i) {
        Line ln;
        ln.a = {rng.uniform(8.0, 88.0), rng.uniform(8.0, 88.0)};
        ln.b = {rng.uniform(8.0, 88.0), rng.uniform(8.0, 88.0)};
        ln.r = rng.uniform(1.5, 3.0);
        lines.push_back(ln);
      }
      break;
    }
  }
  const std::uint64_t pixel_seed = rng.next_u64();

  Rng pixel_rng(pixel_seed);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Vec2 p{(x + 0.5) * scale, (y + 0.5) * scale};
      double v = 0.22 + 0.05 * (p.y / kRef);
      for (const Ring& ring : rings) {
        const double d = norm(p - ring.c);
        const double sd =
            ring.filled ? d - ring.r : std::max(ring.r - ring.thick - d, d - ring.r);
        paint(v, 0.85, coverage(sd));
      }
      for (const Poly& poly : polys) {
        // vertices lie on a circle sorted by angle, so the polygon is convex:
        // inside iff all edge cross products share a sign
        bool pos = false, neg = false;
        for (std::size_t k = 0; k < poly.v.size(); ++k) {
          const Vec2 a = poly.v[k];
          const Vec2 b = poly.v[(k + 1) % poly.v.size()];
          const double cr = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
          if (cr > 0) pos = true;
          if (cr < 0) neg = true;
        }
        if (!(pos && neg)) paint(v, 0.85, 1.0);
      }
      for (const Line& ln : lines) paint(v, 0.85, coverage(sd_capsule(p, ln.a, ln.b, ln.r)));

      v += pixel_rng.normal(0.0, 0.02);
      v = std::clamp(v, 0.0, 1.0);
      img.set(x, y, static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
}

}  // namespace

DatasetManifest generate_shapes_dataset(const std::array<int, 3>& counts, int size,
                                        std::uint64_t seed,
                                        const std::filesystem::path& out_dir) {
  for (int c : counts) {
    if (c < 1) throw FormatError("shape counts must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (!std::filesystem::exists(out_dir / "images")) {
    throw IoError("cannot create output directory " + out_dir.string());
  }

  const int total = counts[0] + counts[1] + counts[2];
  DatasetManifest manifest;
  manifest.dir = out_dir;
  manifest.records.resize(static_cast<std::size_t>(total));

  parallel_for(static_cast<std::size_t>(total), [&](std::size_t i) {
    const int idx = static_cast<int>(i);
    const DesignClass cls = idx < counts[0]               ? DesignClass::A
                            : idx < counts[0] + counts[1] ? DesignClass::B
                                                          : DesignClass::C;
    GrayImage img(size, size);
    render_shape_image(img, cls, derive_seed(seed, 0x5AAE5, i), size);
    const std::string id = index_id("shape", idx);
    const std::string rel = "images/" + id + ".png";
    write_png_gray8(out_dir / rel, img);
    manifest.records[i] = ManifestRecord{id, rel, design_label(cls), Split::unassigned};
  });

  save_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace thrid
