#include "seldist/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "seldist/errors.hpp"

namespace seldist {

namespace {

using json = nlohmann::json;

double iou_rect(const Box2D& a, const Box2D& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double ua = (a.x1 - a.x0) * (a.y1 - a.y0) +
                    (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

struct Pt {
  double x, y;
};

// Projects all 8 corners to pixel coordinates; false if any lies at or
// behind the near plane.
bool project_corners(const Box3D& b, const CameraIntrinsics& cam,
                     std::array<Pt, 8>& out) {
  const auto bev = bev_corners(b);
  int k = 0;
  for (const auto& c : bev) {
    if (c[1] <= 0.1) return false;
    for (const double y : {b.y - b.h / 2, b.y + b.h / 2}) {
      out[k].x = cam.cx + cam.fx * c[0] / c[1];
      out[k].y = cam.cy + cam.fy * y / c[1];
      ++k;
    }
  }
  return true;
}

Box2D bounds_of(const std::array<Pt, 8>& pts) {
  Box2D b{pts[0].x, pts[0].y, pts[0].x, pts[0].y};
  for (const auto& p : pts) {
    b.x0 = std::min(b.x0, p.x);
    b.y0 = std::min(b.y0, p.y);
    b.x1 = std::max(b.x1, p.x);
    b.y1 = std::max(b.y1, p.y);
  }
  return b;
}

double cross(const Pt& o, const Pt& a, const Pt& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Monotone-chain convex hull, counter-clockwise in pixel coordinates
// (y down, so "counter-clockwise" here means negative-cross turns kept out).
std::vector<Pt> convex_hull(std::array<Pt, 8> pts) {
  std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  std::vector<Pt> hull;
  for (int pass = 0; pass < 2; ++pass) {
    const std::size_t lower = hull.size();
    for (const Pt& p : pts) {
      while (hull.size() >= lower + 2 &&
             cross(hull[hull.size() - 2], hull.back(), p) <= 0)
        hull.pop_back();
      hull.push_back(p);
    }
    hull.pop_back();
    std::reverse(pts.begin(), pts.end());
  }
  return hull;
}

bool inside_hull(const std::vector<Pt>& hull, double x, double y) {
  const std::size_t n = hull.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& a = hull[i];
    const Pt& b = hull[(i + 1) % n];
    if (cross(a, b, Pt{x, y}) < 0) return false;
  }
  return true;
}

double overlap_1d(double lo, double hi, double a, double b) {
  return std::max(0.0, std::min(hi, b) - std::max(lo, a));
}

json box2d_json(const Box2D& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

Box2D box2d_from(const json& j) {
  return Box2D{j.at(0).get<double>(), j.at(1).get<double>(),
               j.at(2).get<double>(), j.at(3).get<double>()};
}

void write_raw(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), std::streamsize(n));
}

void read_raw(std::ifstream& in, void* p, std::size_t n, long long offset,
              const char* what) {
  in.read(static_cast<char*>(p), std::streamsize(n));
  if (in.gcount() != std::streamsize(n))
    throw IoError(std::string("scene file truncated in ") + what,
                  offset + in.gcount());
}

constexpr char kMagic[9] = {'M', 'S', 'T', 'L', '-', 'S', 'C', 'N', '\0'};
constexpr std::uint16_t kSceneVersion = 1;
constexpr int kManifestVersion = 1;

}  // namespace

CameraIntrinsics camera_for(const GenConfig& cfg) {
  CameraIntrinsics cam;
  cam.fx = cam.fy = 0.75 * cfg.width;
  cam.cx = cfg.width / 2.0;
  cam.cy = 0.375 * cfg.height;
  cam.width = cfg.width;
  cam.height = cfg.height;
  return cam;
}

Scene sample_scene(const GenConfig& cfg, Rng& rng) {
  if (cfg.eta < 0) throw ValueError("sample_scene: eta must be >= 0");
  if (cfg.rho < 0 || cfg.rho >= 1)
    throw ValueError("sample_scene: rho must lie in [0, 1)");
  if (cfg.objects_min < 1 || cfg.objects_max < cfg.objects_min)
    throw ValueError("sample_scene: bad objects-per-scene range");
  if (cfg.width % 8 != 0 || cfg.height % 8 != 0)
    throw ValueError("sample_scene: image dims must be divisible by 8");

  Scene scene;
  scene.cam = camera_for(cfg);
  const CameraIntrinsics& cam = scene.cam;
  const int n =
      cfg.objects_min + int(rng.below(cfg.objects_max - cfg.objects_min + 1));

  std::vector<Box2D> placed2d;
  std::vector<std::pair<int, int>> cells;
  for (int i = 0; i < n; ++i) {
    const char* names[4] = {"frustum inclusion", "BEV overlap < 0.1",
                            "image-rect overlap < 0.3",
                            "distinct center cells"};
    long rejects[4] = {0, 0, 0, 0};
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      Box3D b;
      b.z = rng.uniform(kZNear, kZFar);
      const double xmax = 0.55 * b.z * cam.cx / cam.fx;
      b.x = rng.uniform(-xmax, xmax);
      // Lane-aligned traffic prior: headings cluster around the road
      // direction (a cuboid is invariant under a half-turn anyway, so wide
      // ranges only alias regression targets).
      b.yaw = rng.uniform(-kYawRange, kYawRange);
      b.l = cfg.dims_mean[0] + rng.uniform(-cfg.dims_spread[0], cfg.dims_spread[0]);
      b.w = cfg.dims_mean[1] + rng.uniform(-cfg.dims_spread[1], cfg.dims_spread[1]);
      b.h = cfg.dims_mean[2] + rng.uniform(-cfg.dims_spread[2], cfg.dims_spread[2]);
      b.y = kGroundY - b.h / 2;

      std::array<Pt, 8> corners;
      if (!project_corners(b, cam, corners)) {
        ++rejects[0];
        continue;
      }
      const Box2D ext = bounds_of(corners);
      if (ext.x0 < 1 || ext.y0 < 1 || ext.x1 > cam.width - 1 ||
          ext.y1 > cam.height - 1) {
        ++rejects[0];
        continue;
      }
      bool clash = false;
      for (const auto& o : scene.objects)
        if (iou_bev(b, o.box3d) >= 0.1) { clash = true; break; }
      if (clash) { ++rejects[1]; continue; }
      for (const auto& r : placed2d)
        if (iou_rect(ext, r) >= 0.3) { clash = true; break; }
      if (clash) { ++rejects[2]; continue; }
      const std::pair<int, int> cell{
          int((cam.cx + cam.fx * b.x / b.z) / 4),
          int((cam.cy + cam.fy * b.y / b.z) / 4)};
      for (const auto& c : cells)
        if (c == cell) { clash = true; break; }
      if (clash) { ++rejects[3]; continue; }

      ObjectLabel obj;
      obj.box3d = b;
      obj.box2d = *project_box3d(b, cam);
      obj.drawn2d = obj.box2d;  // overwritten by render_image
      obj.z_star = b.z;
      scene.objects.push_back(obj);
      placed2d.push_back(ext);
      cells.push_back(cell);
      ok = true;
    }
    if (!ok) {
      const long worst = std::max_element(rejects, rejects + 4) - rejects;
      std::ostringstream msg;
      msg << "sample_scene: failed to place object " << i
          << " after 1000 tries; dominant constraint: " << names[worst];
      throw ValueError(msg.str());
    }
  }
  return scene;
}

Tensor render_image(Scene& scene, double eta, Rng& rng) {
  const int h = scene.cam.height, w = scene.cam.width;
  std::vector<double> base(std::size_t(h) * w);
  for (double& v : base) v = 0.15 + 0.0075 * rng.normal();

  // Per-object noise drawn in label order; compositing goes far to near so
  // closer rectangles paint over farther ones.
  const std::size_t n = scene.objects.size();
  std::vector<double> scale(n), shade(n);
  for (std::size_t i = 0; i < n; ++i) {
    scale[i] = std::max(0.2, 1.0 + eta * rng.normal());
    const double z = scene.objects[i].z_star;
    shade[i] = std::clamp(0.5 + 0.25 * (1.0 - (z - 8.0) / (kZFar - 8.0)) +
                              eta * rng.normal(),
                          0.35, 0.95);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.objects[a].z_star > scene.objects[b].z_star;
  });

  for (const std::size_t i : order) {
    ObjectLabel& obj = scene.objects[i];
    // Scale about the center, written so scale = 1 reproduces box2d exactly.
    const double gx = (1.0 - scale[i]) * (obj.box2d.x1 - obj.box2d.x0) / 2;
    const double gy = (1.0 - scale[i]) * (obj.box2d.y1 - obj.box2d.y0) / 2;
    obj.drawn2d = Box2D{obj.box2d.x0 + gx, obj.box2d.y0 + gy,
                        obj.box2d.x1 - gx, obj.box2d.y1 - gy};

    // Shading tilts left-to-right with the heading's sine, so orientation
    // sign is visible in the image (flat shade would alias yaw with -yaw).
    const double tilt = kShadeTilt * std::sin(obj.box3d.yaw);
    const double span = std::max(1e-9, obj.drawn2d.x1 - obj.drawn2d.x0);
    const int u0 = std::max(0, int(std::floor(obj.drawn2d.x0)));
    const int u1 = std::min(w - 1, int(std::ceil(obj.drawn2d.x1)));
    const int v0 = std::max(0, int(std::floor(obj.drawn2d.y0)));
    const int v1 = std::min(h - 1, int(std::ceil(obj.drawn2d.y1)));
    for (int v = v0; v <= v1; ++v) {
      const double cy = overlap_1d(v, v + 1, obj.drawn2d.y0, obj.drawn2d.y1);
      for (int u = u0; u <= u1; ++u) {
        const double c = cy * overlap_1d(u, u + 1, obj.drawn2d.x0, obj.drawn2d.x1);
        const double t = (u + 0.5 - obj.drawn2d.x0) / span;
        const double s = shade[i] * (1.0 + tilt * (2.0 * t - 1.0));
        double& px = base[std::size_t(v) * w + u];
        px += c * (s - px);
      }
    }
  }

  Tensor img(Shape{3, h, w});
  auto& d = img.mutable_data();
  for (int c = 0; c < 3; ++c)
    std::copy(base.begin(), base.end(), d.begin() + std::size_t(c) * h * w);
  return img;
}

Tensor render_depth_map(const Scene& scene, double rho, Rng& rng) {
  const int h = scene.cam.height, w = scene.cam.width;
  Tensor depth(Shape{1, h, w});
  auto& d = depth.mutable_data();
  std::vector<double> zbuf(std::size_t(h) * w,
                           std::numeric_limits<double>::infinity());

  for (const auto& obj : scene.objects) {
    const Box3D& b = obj.box3d;
    std::array<Pt, 8> corners;
    if (!project_corners(b, scene.cam, corners)) continue;
    const auto hull = convex_hull(corners);
    const Box2D ext = bounds_of(corners);
    const int u0 = std::max(0, int(std::floor(ext.x0)));
    const int u1 = std::min(w - 1, int(std::ceil(ext.x1)));
    const int v0 = std::max(0, int(std::floor(ext.y0)));
    const int v1 = std::min(h - 1, int(std::ceil(ext.y1)));
    // Nearest-surface depth per column: the BEV ray through the pixel column
    // enters the footprint rectangle at the drawn surface's depth.
    const double s = std::sin(b.yaw), c = std::cos(b.yaw);
    std::vector<double> col(std::size_t(u1 - u0 + 1),
                            std::numeric_limits<double>::infinity());
    for (int u = u0; u <= u1; ++u) {
      const double dx = (u + 0.5 - scene.cam.cx) / scene.cam.fx;
      // Box frame: p = ((x-bx)s + (z-bz)c, (x-bx)c - (z-bz)s); the rotation
      // is involutive. Ray (x, z) = t(dx, 1) gives slab bounds in t.
      const double ou = -b.x * s - b.z * c, ov = -b.x * c + b.z * s;
      const double du = dx * s + c, dv = dx * c - s;
      double lo = 0.0, hi = std::numeric_limits<double>::infinity();
      bool hit = true;
      const double half[2] = {b.l / 2, b.w / 2};
      const double o2[2] = {ou, ov}, d2[2] = {du, dv};
      for (int k = 0; k < 2 && hit; ++k) {
        if (std::abs(d2[k]) < 1e-12) {
          hit = std::abs(o2[k]) <= half[k];
          continue;
        }
        double t0 = (-half[k] - o2[k]) / d2[k];
        double t1 = (half[k] - o2[k]) / d2[k];
        if (t0 > t1) std::swap(t0, t1);
        lo = std::max(lo, t0);
        hi = std::min(hi, t1);
        hit = lo <= hi;
      }
      if (hit) col[std::size_t(u - u0)] = lo;
    }
    for (int v = v0; v <= v1; ++v)
      for (int u = u0; u <= u1; ++u)
        if (inside_hull(hull, u + 0.5, v + 0.5))
          zbuf[std::size_t(v) * w + u] =
              std::min(zbuf[std::size_t(v) * w + u], col[std::size_t(u - u0)]);
  }

  for (int v = 0; v < h; ++v) {
    const double dv = v + 0.5 - scene.cam.cy;
    for (int u = 0; u < w; ++u) {
      double& out = d[std::size_t(v) * w + u];
      const double zb = zbuf[std::size_t(v) * w + u];
      if (std::isfinite(zb)) out = zb;
      else if (dv > 0.5) out = scene.cam.fy * kGroundY / dv;
      else out = 0.0;  // sky: no return
    }
  }

  if (rho > 0)
    for (double& v : d)
      if (rng.uniform() < rho) v = 0.0;
  return depth;
}

void write_scene(const Scene& scene, const std::string& path) {
  json hdr;
  hdr["id"] = scene.id;
  hdr["intrinsics"] = {{"fx", scene.cam.fx}, {"fy", scene.cam.fy},
                       {"cx", scene.cam.cx}, {"cy", scene.cam.cy},
                       {"w", scene.cam.width}, {"h", scene.cam.height}};
  hdr["objects"] = json::array();
  for (const auto& o : scene.objects) {
    hdr["objects"].push_back(
        {{"xyz", {o.box3d.x, o.box3d.y, o.box3d.z}},
         {"lwh", {o.box3d.l, o.box3d.w, o.box3d.h}},
         {"yaw", o.box3d.yaw},
         {"box2d", box2d_json(o.box2d)},
         {"drawn2d", box2d_json(o.drawn2d)},
         {"z_star", o.z_star}});
  }
  const std::string hs = hdr.dump();

  const std::size_t npx = std::size_t(scene.cam.height) * scene.cam.width;
  if (scene.image.size() != 3 * npx || scene.depth.size() != npx)
    throw ValueError("write_scene: grids do not match intrinsics dims");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_scene: cannot open " + path);
  write_raw(out, kMagic, sizeof(kMagic));
  write_raw(out, &kSceneVersion, 2);
  const std::uint32_t hlen = std::uint32_t(hs.size());
  write_raw(out, &hlen, 4);
  write_raw(out, hs.data(), hs.size());
  write_raw(out, scene.image.data().data(), scene.image.size() * 8);
  write_raw(out, scene.depth.data().data(), scene.depth.size() * 8);
  if (!out) throw IoError("write_scene: short write to " + path);
}

Scene read_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_scene: cannot open " + path);

  char magic[9];
  read_raw(in, magic, 9, 0, "magic");
  if (std::memcmp(magic, kMagic, 9) != 0)
    throw IoError("read_scene: bad magic in " + path, 0);
  std::uint16_t version = 0;
  read_raw(in, &version, 2, 9, "version");
  if (version != kSceneVersion)
    throw IoError("read_scene: unsupported version " + std::to_string(version),
                  9);
  std::uint32_t hlen = 0;
  read_raw(in, &hlen, 4, 11, "header length");
  std::string hs(hlen, '\0');
  read_raw(in, hs.data(), hlen, 15, "header");

  json hdr;
  try {
    hdr = json::parse(hs);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("read_scene: bad header JSON: ") + e.what(),
                  15 + (long long)(e.byte));
  }

  Scene scene;
  try {
    scene.id = hdr.at("id").get<int>();
    const json& in_j = hdr.at("intrinsics");
    scene.cam.fx = in_j.at("fx").get<double>();
    scene.cam.fy = in_j.at("fy").get<double>();
    scene.cam.cx = in_j.at("cx").get<double>();
    scene.cam.cy = in_j.at("cy").get<double>();
    scene.cam.width = in_j.at("w").get<int>();
    scene.cam.height = in_j.at("h").get<int>();
    for (const json& jo : hdr.at("objects")) {
      ObjectLabel o;
      o.box3d.x = jo.at("xyz").at(0).get<double>();
      o.box3d.y = jo.at("xyz").at(1).get<double>();
      o.box3d.z = jo.at("xyz").at(2).get<double>();
      o.box3d.l = jo.at("lwh").at(0).get<double>();
      o.box3d.w = jo.at("lwh").at(1).get<double>();
      o.box3d.h = jo.at("lwh").at(2).get<double>();
      o.box3d.yaw = jo.at("yaw").get<double>();
      o.box2d = box2d_from(jo.at("box2d"));
      o.drawn2d = box2d_from(jo.at("drawn2d"));
      o.z_star = jo.at("z_star").get<double>();
      scene.objects.push_back(o);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("read_scene: bad header field: ") + e.what(), 15);
  }
  if (scene.cam.width <= 0 || scene.cam.height <= 0)
    throw IoError("read_scene: non-positive image dims in header", 15);

  const int h = scene.cam.height, w = scene.cam.width;
  const long long grids_at = 15 + (long long)hlen;
  scene.image = Tensor(Shape{3, h, w});
  read_raw(in, scene.image.mutable_data().data(), scene.image.size() * 8,
           grids_at, "image grid");
  scene.depth = Tensor(Shape{1, h, w});
  read_raw(in, scene.depth.mutable_data().data(), scene.depth.size() * 8,
           grids_at + (long long)(scene.image.size() * 8), "depth grid");
  return scene;
}

namespace {

json gen_config_json(const GenConfig& c) {
  return {{"n_train", c.n_train},       {"n_val", c.n_val},
          {"objects_min", c.objects_min}, {"objects_max", c.objects_max},
          {"width", c.width},           {"height", c.height},
          {"dims_mean", c.dims_mean},   {"dims_spread", c.dims_spread},
          {"eta", c.eta},               {"rho", c.rho},
          {"seed", c.seed}};
}

GenConfig gen_config_from(const json& j) {
  GenConfig c;
  c.n_train = j.at("n_train").get<int>();
  c.n_val = j.at("n_val").get<int>();
  c.objects_min = j.at("objects_min").get<int>();
  c.objects_max = j.at("objects_max").get<int>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.dims_mean = j.at("dims_mean").get<std::array<double, 3>>();
  c.dims_spread = j.at("dims_spread").get<std::array<double, 3>>();
  c.eta = j.at("eta").get<double>();
  c.rho = j.at("rho").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void write_manifest(const Manifest& m, const std::string& path) {
  json j = {{"version", m.version},
            {"seed", m.seed},
            {"gen_config", gen_config_json(m.cfg)},
            {"train", m.train},
            {"val", m.val}};
  std::ofstream out(path);
  if (!out) throw IoError("write_manifest: cannot open " + path);
  out << j.dump(2) << "\n";
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_manifest: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("read_manifest: ") + e.what(),
                  (long long)(e.byte));
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion)
      throw IoError("read_manifest: unsupported version " +
                    std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.cfg = gen_config_from(j.at("gen_config"));
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(std::string("read_manifest: bad field: ") + e.what());
  }
  return m;
}

Manifest generate_corpus(const GenConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  Manifest m;
  m.seed = cfg.seed;
  m.cfg = cfg;
  for (int i = 0; i < cfg.n_train + cfg.n_val; ++i) {
    Rng rng(derive_seed(cfg.seed, std::uint64_t(i)));
    Scene scene = sample_scene(cfg, rng);
    scene.id = i;
    scene.image = render_image(scene, cfg.eta, rng);
    scene.depth = render_depth_map(scene, cfg.rho, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05d.bin", i);
    write_scene(scene, out_dir + "/" + name);
    (i < cfg.n_train ? m.train : m.val).push_back(name);
  }
  write_manifest(m, out_dir + "/manifest.json");
  return m;
}

std::vector<Scene> load_split(const std::string& manifest_path,
                              const std::string& split) {
  if (split != "train" && split != "val")
    throw ValueError("load_split: split must be train or val");
  const Manifest m = read_manifest(manifest_path);
  const std::string dir =
      std::filesystem::path(manifest_path).parent_path().string();
  std::vector<Scene> scenes;
  for (const auto& name : (split == "train" ? m.train : m.val))
    scenes.push_back(read_scene(dir.empty() ? name : dir + "/" + name));
  return scenes;
}

}  // namespace seldist
