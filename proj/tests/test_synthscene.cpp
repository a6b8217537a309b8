#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "seldist/errors.hpp"
#include "seldist/synthscene.hpp"

using namespace seldist;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

// Generates a corpus in memory with per-scene derived seeds.
std::vector<Scene> corpus(const GenConfig& cfg, int n) {
  std::vector<Scene> scenes;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed, std::uint64_t(i)));
    Scene s = sample_scene(cfg, rng);
    s.id = i;
    s.image = render_image(s, cfg.eta, rng);
    s.depth = render_depth_map(s, cfg.rho, rng);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

// Size->depth reading available to the image side: apparent (drawn) height
// plus the labeled physical size. Exact when the drawn rect is the true
// projection.
double size_depth_estimate(const ObjectLabel& o, const CameraIntrinsics& cam) {
  const double hpx = o.drawn2d.y1 - o.drawn2d.y0;
  return cam.fy * o.box3d.h / hpx +
         o.box3d.l / 2 * std::abs(std::cos(o.box3d.yaw)) +
         o.box3d.w / 2 * std::abs(std::sin(o.box3d.yaw));
}

double face_depth(const Box3D& b) {
  return b.z - b.l / 2 * std::abs(std::cos(b.yaw)) -
         b.w / 2 * std::abs(std::sin(b.yaw));
}

// Independent surface-depth oracle: clip the BEV ray x = t*dx, z = t against
// the four half-planes of the footprint polygon (Cyrus-Beck) and return the
// entry depth, or -1 on a miss. Each edge normal is oriented toward the box
// center, so the oracle does not depend on the corner winding.
double ray_entry_depth(const Box3D& b, double dx) {
  const auto poly = bev_corners(b);
  double lo = 0.0, hi = 1e300;
  for (int e = 0; e < 4; ++e) {
    const auto& p = poly[std::size_t(e)];
    const auto& q = poly[std::size_t((e + 1) % 4)];
    double nx = -(q[1] - p[1]), nz = q[0] - p[0];
    if (nx * (b.x - p[0]) + nz * (b.z - p[1]) < 0) {
      nx = -nx;
      nz = -nz;
    }
    // Inside the half-plane: n . (t*d - p) >= 0.
    const double denom = nx * dx + nz;
    const double num = nx * p[0] + nz * p[1];
    if (std::abs(denom) < 1e-15) {
      if (num > 0.0) return -1.0;  // parallel ray, fully outside
      continue;
    }
    const double t = num / denom;
    if (denom > 0.0)
      lo = std::max(lo, t);
    else
      hi = std::min(hi, t);
  }
  return lo <= hi ? lo : -1.0;
}

Scene hand_scene(const std::vector<Box3D>& boxes) {
  GenConfig cfg;
  Scene s;
  s.cam = camera_for(cfg);
  for (const auto& b : boxes) {
    ObjectLabel o;
    o.box3d = b;
    auto p = project_box3d(b, s.cam);
    REQUIRE(p.has_value());
    o.box2d = *p;
    o.drawn2d = *p;
    o.z_star = b.z;
    s.objects.push_back(o);
  }
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic down to file bytes") {
  GenConfig cfg;
  cfg.n_train = 3;
  cfg.n_val = 1;
  cfg.seed = 99;
  fs::remove_all("tmp_gen_a");
  fs::remove_all("tmp_gen_b");
  Manifest ma = generate_corpus(cfg, "tmp_gen_a");
  Manifest mb = generate_corpus(cfg, "tmp_gen_b");
  REQUIRE(ma.train.size() == 3);
  REQUIRE(ma.val.size() == 1);
  for (const auto& name : ma.train)
    CHECK(slurp("tmp_gen_a/" + name) == slurp("tmp_gen_b/" + name));
  CHECK(slurp("tmp_gen_a/manifest.json") == slurp("tmp_gen_b/manifest.json"));

  // A different seed must change the bytes.
  cfg.seed = 100;
  fs::remove_all("tmp_gen_c");
  generate_corpus(cfg, "tmp_gen_c");
  CHECK(slurp("tmp_gen_a/" + ma.train[0]) != slurp("tmp_gen_c/" + mb.train[0]));
}

TEST_CASE("scene labels satisfy the projection and range invariants") {
  GenConfig cfg;
  cfg.seed = 5;
  for (const Scene& s : corpus(cfg, 50)) {
    CHECK(!s.objects.empty());
    CHECK(s.objects.size() <= 6);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const ObjectLabel& o = s.objects[i];
      CHECK(o.z_star >= 8.0);
      CHECK(o.z_star <= 60.0);
      CHECK(o.z_star == o.box3d.z);
      auto p = project_box3d(o.box3d, s.cam);
      REQUIRE(p.has_value());
      CHECK(o.box2d.x0 == p->x0);
      CHECK(o.box2d.y0 == p->y0);
      CHECK(o.box2d.x1 == p->x1);
      CHECK(o.box2d.y1 == p->y1);
      CHECK(o.box2d.x1 > o.box2d.x0);
      CHECK(o.box2d.y1 > o.box2d.y0);
      CHECK(o.box3d.y == doctest::Approx(kGroundY - o.box3d.h / 2));
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        CHECK(iou_bev(o.box3d, s.objects[j].box3d) < 0.1);
    }
  }
}

TEST_CASE("depth map reads the nearest surface, axis-aligned") {
  // A box on the optical axis at yaw 0 shows only its front face: every ray
  // through the footprint enters at exactly z - l/2.
  Box3D b{0.0, kGroundY - 0.6, 16.0, 1.6, 1.6, 1.2, 0.0};
  Scene s = hand_scene({b});
  Rng rng(7);
  s.depth = render_depth_map(s, 0.0, rng);
  const double face = b.z - b.l / 2;
  const int w = s.cam.width;
  int painted = 0;
  for (int v = 0; v < s.cam.height; ++v)
    for (int u = 0; u < w; ++u) {
      const double d = s.depth.data()[std::size_t(v) * w + u];
      CHECK(d >= 0.0);
      const double dv = v + 0.5 - s.cam.cy;
      const double bg = dv > 0.5 ? s.cam.fy * kGroundY / dv : 0.0;
      if (std::abs(d - bg) <= 1e-9) continue;  // ground or sky
      ++painted;
      CHECK(d == doctest::Approx(face).epsilon(1e-12));
    }
  CHECK(painted > 20);
}

TEST_CASE("depth map reads the nearest surface, rotated") {
  Box3D b{1.0, kGroundY - 0.8, 20.0, 1.6, 0.8, 1.6, 0.3};
  Scene s = hand_scene({b});
  Rng rng(7);
  s.depth = render_depth_map(s, 0.0, rng);
  const double face = face_depth(b);
  CHECK(face == doctest::Approx(20.0 - 0.8 * std::cos(0.3) - 0.4 * std::sin(0.3))
                    .epsilon(1e-12));
  CHECK(face > 19.0);
  CHECK(face < 20.0);

  // Each painted pixel reads the ray's footprint entry depth per the clipping
  // oracle; depth varies across the face but bottoms out at the nearest
  // corner (within one column of sampling slack).
  const int w = s.cam.width;
  int painted = 0;
  double dmin = 1e300;
  for (int v = 0; v < s.cam.height; ++v)
    for (int u = 0; u < w; ++u) {
      const double d = s.depth.data()[std::size_t(v) * w + u];
      const double dv = v + 0.5 - s.cam.cy;
      const double bg = dv > 0.5 ? s.cam.fy * kGroundY / dv : 0.0;
      if (std::abs(d - bg) <= 1e-9) continue;
      ++painted;
      const double dx = (u + 0.5 - s.cam.cx) / s.cam.fx;
      const double want = ray_entry_depth(b, dx);
      CHECK(want > 0.0);
      CHECK(d == doctest::Approx(want).epsilon(1e-9));
      dmin = std::min(dmin, d);
    }
  CHECK(painted > 20);
  CHECK(dmin >= face - 1e-9);
  CHECK(dmin <= face + 1.0);
}

TEST_CASE("depth map center pixel and z-buffer") {
  Box3D near{0.0, kGroundY - 0.8, 12.0, 4.2, 1.8, 1.6, 0.0};
  Box3D far{0.0, kGroundY - 0.8, 30.0, 4.2, 1.8, 1.6, 0.0};
  Scene s = hand_scene({far, near});  // label order far-first on purpose
  Rng rng(11);
  s.depth = render_depth_map(s, 0.0, rng);
  const int w = s.cam.width;
  // Both project onto the image center column; the shared pixels must read
  // the nearer face.
  const int u = int((near.x / near.z) * s.cam.fx + s.cam.cx);
  const int v = int((near.y / near.z) * s.cam.fy + s.cam.cy);
  const double d = s.depth.data()[std::size_t(v) * w + u];
  CHECK(d == doctest::Approx(face_depth(near)).epsilon(1e-9));
  CHECK(face_depth(near) < face_depth(far));
}

TEST_CASE("ground plane and sky") {
  Scene s = hand_scene({Box3D{14.0, kGroundY - 0.8, 50.0, 4.2, 1.8, 1.6, 0.0}});
  Rng rng(13);
  s.depth = render_depth_map(s, 0.0, rng);
  const int w = s.cam.width;
  // Bottom-left pixel: bare ground.
  const int v = s.cam.height - 1, u = 0;
  const double dv = v + 0.5 - s.cam.cy;
  CHECK(s.depth.data()[std::size_t(v) * w + u] ==
        doctest::Approx(s.cam.fy * kGroundY / dv).epsilon(1e-12));
  // Top rows: above the horizon, no return.
  for (int uu = 0; uu < w; ++uu) CHECK(s.depth.data()[uu] == 0.0);
}

TEST_CASE("depth dropout knocks out roughly rho of the pixels") {
  Scene s = hand_scene({Box3D{0.0, kGroundY - 0.8, 20.0, 4.2, 1.8, 1.6, 0.0}});
  Rng rng(17);
  Tensor full = render_depth_map(s, 0.0, rng);
  Rng rng2(17);
  Tensor dropped = render_depth_map(s, 0.3, rng2);
  long was_nonzero = 0, zeroed = 0;
  for (std::size_t i = 0; i < full.size(); ++i)
    if (full.data()[i] > 0) {
      ++was_nonzero;
      if (dropped.data()[i] == 0.0) ++zeroed;
    }
  const double frac = double(zeroed) / double(was_nonzero);
  CHECK(frac > 0.25);
  CHECK(frac < 0.35);
}

TEST_CASE("image shape, determinism, and contrast") {
  GenConfig cfg;
  cfg.seed = 19;
  auto scenes = corpus(cfg, 20);
  for (const Scene& s : scenes) {
    REQUIRE(s.image.shape() == Shape{3, 128, 128});
    REQUIRE(s.depth.shape() == Shape{1, 128, 128});
  }
  auto again = corpus(cfg, 20);
  for (int i = 0; i < 20; ++i)
    CHECK(scenes[i].image.data() == again[i].image.data());

  // The nearest object is composited last, so its rect center is never
  // overpainted; it must stand >= 3 background sigmas off the background.
  for (const Scene& s : scenes) {
    const int w = s.cam.width, h = s.cam.height;
    std::size_t nearest = 0;
    for (std::size_t i = 1; i < s.objects.size(); ++i)
      if (s.objects[i].z_star < s.objects[nearest].z_star) nearest = i;
    // Background statistics from pixels clear of every drawn rect.
    double sum = 0, sum2 = 0;
    long n = 0;
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        bool bg = true;
        for (const auto& o : s.objects)
          if (u + 1 > o.drawn2d.x0 - 1 && u < o.drawn2d.x1 + 1 &&
              v + 1 > o.drawn2d.y0 - 1 && v < o.drawn2d.y1 + 1)
            bg = false;
        if (!bg) continue;
        const double px = s.image.data()[std::size_t(v) * w + u];
        sum += px;
        sum2 += px * px;
        ++n;
      }
    REQUIRE(n > 1000);
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
    const auto& o = s.objects[nearest];
    const int uc = int((o.drawn2d.x0 + o.drawn2d.x1) / 2);
    const int vc = int((o.drawn2d.y0 + o.drawn2d.y1) / 2);
    const double px = s.image.data()[std::size_t(vc) * w + uc];
    CHECK(px > mean + 3 * sd);
  }
}

TEST_CASE("zero noise leaves the size cue exact") {
  GenConfig cfg;
  cfg.eta = 0.0;
  cfg.seed = 23;
  auto scenes = corpus(cfg, 300);
  double abs_err = 0;
  long n = 0;
  for (const Scene& s : scenes)
    for (const ObjectLabel& o : s.objects) {
      CHECK(o.drawn2d.x0 == o.box2d.x0);
      CHECK(o.drawn2d.y0 == o.box2d.y0);
      CHECK(o.drawn2d.x1 == o.box2d.x1);
      CHECK(o.drawn2d.y1 == o.box2d.y1);
      abs_err += std::abs(size_depth_estimate(o, s.cam) - o.z_star);
      ++n;
    }
  REQUIRE(n > 300);
  CHECK(abs_err / n < 0.1);
}

TEST_CASE("default noise opens a measurable modality gap") {
  GenConfig cfg;
  cfg.eta = 0.15;
  cfg.seed = 29;
  auto scenes = corpus(cfg, 1000);
  double abs_err = 0;
  std::vector<double> hs, invz;
  for (const Scene& s : scenes)
    for (const ObjectLabel& o : s.objects) {
      abs_err += std::abs(size_depth_estimate(o, s.cam) - o.z_star);
      hs.push_back(o.drawn2d.y1 - o.drawn2d.y0);
      invz.push_back(1.0 / o.z_star);
    }
  const long n = long(hs.size());
  REQUIRE(n > 1000);
  CHECK(abs_err / n >= 1.0);

  // The size cue still carries signal: apparent height correlates with 1/z,
  // but strictly imperfectly.
  double mh = 0, mz = 0;
  for (long i = 0; i < n; ++i) { mh += hs[i]; mz += invz[i]; }
  mh /= n;
  mz /= n;
  double sh = 0, sz = 0, shz = 0;
  for (long i = 0; i < n; ++i) {
    sh += (hs[i] - mh) * (hs[i] - mh);
    sz += (invz[i] - mz) * (invz[i] - mz);
    shz += (hs[i] - mh) * (invz[i] - mz);
  }
  const double corr = shz / std::sqrt(sh * sz);
  CHECK(corr > 0.5);
  CHECK(corr < 0.99);
}

TEST_CASE("scene files round-trip losslessly") {
  GenConfig cfg;
  cfg.seed = 31;
  Rng rng(derive_seed(cfg.seed, 0));
  Scene s = sample_scene(cfg, rng);
  s.id = 41;
  s.image = render_image(s, cfg.eta, rng);
  s.depth = render_depth_map(s, cfg.rho, rng);
  fs::remove_all("tmp_rt");
  fs::create_directories("tmp_rt");
  write_scene(s, "tmp_rt/s.bin");
  Scene r = read_scene("tmp_rt/s.bin");
  CHECK(r.id == 41);
  CHECK(r.cam.fx == s.cam.fx);
  CHECK(r.cam.fy == s.cam.fy);
  CHECK(r.cam.cx == s.cam.cx);
  CHECK(r.cam.cy == s.cam.cy);
  CHECK(r.cam.width == s.cam.width);
  CHECK(r.cam.height == s.cam.height);
  REQUIRE(r.objects.size() == s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto &a = s.objects[i], &b = r.objects[i];
    CHECK(a.box3d.x == b.box3d.x);
    CHECK(a.box3d.y == b.box3d.y);
    CHECK(a.box3d.z == b.box3d.z);
    CHECK(a.box3d.l == b.box3d.l);
    CHECK(a.box3d.w == b.box3d.w);
    CHECK(a.box3d.h == b.box3d.h);
    CHECK(a.box3d.yaw == b.box3d.yaw);
    CHECK(a.box2d.x0 == b.box2d.x0);
    CHECK(a.box2d.y1 == b.box2d.y1);
    CHECK(a.drawn2d.x0 == b.drawn2d.x0);
    CHECK(a.drawn2d.y1 == b.drawn2d.y1);
    CHECK(a.z_star == b.z_star);
    CHECK(b.category == "car");
  }
  CHECK(r.image.data() == s.image.data());
  CHECK(r.depth.data() == s.depth.data());
}

TEST_CASE("corrupt scene files fail with byte offsets") {
  GenConfig cfg;
  cfg.seed = 37;
  Rng rng(derive_seed(cfg.seed, 0));
  Scene s = sample_scene(cfg, rng);
  s.image = render_image(s, cfg.eta, rng);
  s.depth = render_depth_map(s, cfg.rho, rng);
  fs::remove_all("tmp_bad");
  fs::create_directories("tmp_bad");
  write_scene(s, "tmp_bad/ok.bin");
  const std::string good = slurp("tmp_bad/ok.bin");

  spit("tmp_bad/magic.bin", "XSTL-SCN" + good.substr(8));
  try {
    read_scene("tmp_bad/magic.bin");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.offset == 0);
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }

  std::string bumped = good;
  bumped[9] = 2;  // version LE low byte
  spit("tmp_bad/ver.bin", bumped);
  try {
    read_scene("tmp_bad/ver.bin");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.offset == 9);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  for (const std::size_t cut : {std::size_t(5), std::size_t(12),
                                std::size_t(40), good.size() - 100}) {
    spit("tmp_bad/cut.bin", good.substr(0, cut));
    try {
      read_scene("tmp_bad/cut.bin");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.offset >= 0);
      CHECK(e.offset <= (long long)good.size());
    }
  }

  std::string mangled = good;
  mangled[15] = 'X';  // header must start with '{'
  spit("tmp_bad/json.bin", mangled);
  try {
    read_scene("tmp_bad/json.bin");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.offset >= 15);
    CHECK(std::string(e.what()).find("JSON") != std::string::npos);
  }
}

TEST_CASE("manifest round-trip and split loading") {
  GenConfig cfg;
  cfg.n_train = 2;
  cfg.n_val = 2;
  cfg.seed = 43;
  fs::remove_all("tmp_mani");
  Manifest m = generate_corpus(cfg, "tmp_mani");
  Manifest r = read_manifest("tmp_mani/manifest.json");
  CHECK(r.version == 1);
  CHECK(r.seed == 43);
  CHECK(r.cfg.n_train == 2);
  CHECK(r.cfg.eta == cfg.eta);
  CHECK(r.train == m.train);
  CHECK(r.val == m.val);

  auto train = load_split("tmp_mani/manifest.json", "train");
  auto val = load_split("tmp_mani/manifest.json", "val");
  CHECK(train.size() == 2);
  CHECK(val.size() == 2);
  CHECK(train[0].id == 0);
  CHECK(val[1].id == 3);
  CHECK_THROWS_AS(load_split("tmp_mani/manifest.json", "test"), ValueError);
}

TEST_CASE("impossible placement names the constraint") {
  GenConfig cfg;
  cfg.dims_mean = {200, 200, 200};
  cfg.dims_spread = {0, 0, 0};
  Rng rng(1);
  CHECK_THROWS_WITH_AS(sample_scene(cfg, rng),
                       doctest::Contains("1000 tries"), ValueError);
  Rng rng2(1);
  CHECK_THROWS_WITH_AS(sample_scene(cfg, rng2),
                       doctest::Contains("frustum"), ValueError);
}

TEST_CASE("generator configuration is validated") {
  Rng rng(1);
  GenConfig bad;
  bad.eta = -0.1;
  CHECK_THROWS_AS(sample_scene(bad, rng), ValueError);
  bad = GenConfig{};
  bad.rho = 1.0;
  CHECK_THROWS_AS(sample_scene(bad, rng), ValueError);
  bad = GenConfig{};
  bad.objects_min = 3;
  bad.objects_max = 2;
  CHECK_THROWS_AS(sample_scene(bad, rng), ValueError);
  bad = GenConfig{};
  bad.width = 100;  // not divisible by 8
  CHECK_THROWS_AS(sample_scene(bad, rng), ValueError);
}
