#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "seldist/errors.hpp"
#include "seldist/gradcheck.hpp"
#include "seldist/ops.hpp"
#include "seldist/toydet.hpp"

using namespace seldist;
namespace fs = std::filesystem;

namespace {

Tensor random_input(Rng& rng, int c, int h, int w, double lo = 0.0,
                    double hi = 1.0) {
  Tensor t(Shape{c, h, w});
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Head maps that encode the batch's ground truth exactly; heat is saturated
// at the centers and floored elsewhere.
HeadBundle encode_gt(const ObjectBatch& batch, int hc, int wc) {
  const double hi = 1.0 / (1.0 + std::exp(-15.0));
  const double lo = 1.0 / (1.0 + std::exp(15.0));
  HeadBundle h{Tensor::full(Shape{1, hc, wc}, lo), Tensor(Shape{2, hc, wc}),
               Tensor(Shape{1, hc, wc}), Tensor::full(Shape{1, hc, wc}, -10.0),
               Tensor(Shape{3, hc, wc}), Tensor(Shape{2, hc, wc})};
  auto put = [&](Tensor& m, int c, int y, int x, double v) {
    m.mutable_data()[(std::size_t(c) * hc + y) * wc + x] = v;
  };
  for (const auto& o : batch.objects) {
    put(h.heat, 0, o.cy, o.cx, hi);
    put(h.offset, 0, o.cy, o.cx, o.off_u);
    put(h.offset, 1, o.cy, o.cx, o.off_v);
    put(h.depth_raw, 0, o.cy, o.cx, std::log(o.z_star / kZPriorDecode));
    put(h.dims3d, 0, o.cy, o.cx, o.gt.l);
    put(h.dims3d, 1, o.cy, o.cx, o.gt.w);
    put(h.dims3d, 2, o.cy, o.cx, o.gt.h);
    put(h.yaw, 0, o.cy, o.cx, std::sin(o.gt.yaw));
    put(h.yaw, 1, o.cy, o.cx, std::cos(o.gt.yaw));
  }
  return h;
}

Scene scene_with(const std::vector<Box3D>& boxes) {
  GenConfig cfg;
  Scene s;
  s.cam = camera_for(cfg);
  for (const auto& b : boxes) {
    ObjectLabel o;
    o.box3d = b;
    o.box2d = *project_box3d(b, s.cam);
    o.drawn2d = o.box2d;
    o.z_star = b.z;
    s.objects.push_back(o);
  }
  s.image = Tensor(Shape{3, s.cam.height, s.cam.width});
  s.depth = Tensor(Shape{1, s.cam.height, s.cam.width});
  return s;
}

}  // namespace

TEST_CASE("initialization is seeded and hashable") {
  DetectorParams a = make_detector(3, 7);
  DetectorParams b = make_detector(3, 7);
  CHECK(params_hash(a.t) == params_hash(b.t));
  DetectorParams c = make_detector(3, 8);
  CHECK(params_hash(a.t) != params_hash(c.t));
  b.t["stem.b"].mutable_data()[0] += 1e-12;
  CHECK(params_hash(a.t) != params_hash(b.t));

  CHECK(detector_in_channels(a) == 3);
  DetectorParams teacher = make_detector(1, 7);
  CHECK(detector_in_channels(teacher) == 1);
  check_compatible(teacher, a);  // must not throw
  DetectorParams broken = make_detector(3, 7);
  broken.t["b1c1.w"] = Tensor::zeros(Shape{10, 8, 3, 3});
  CHECK_THROWS_AS(check_compatible(teacher, broken), ShapeError);
}

TEST_CASE("backbone shapes and determinism") {
  DetectorParams p = make_detector(3, 11);
  Rng rng(3);
  Tensor x = random_input(rng, 3, 128, 128);
  FeaturePyramid f = backbone_forward(x, p);
  REQUIRE(f.size() == 2);
  CHECK(f[0].shape() == Shape{12, 32, 32});
  CHECK(f[1].shape() == Shape{12, 16, 16});

  DetectorParams t = make_detector(1, 11);
  FeaturePyramid ft = backbone_forward(random_input(rng, 1, 64, 64), t);
  CHECK(ft[0].shape() == Shape{12, 16, 16});
  CHECK(ft[1].shape() == Shape{12, 8, 8});

  CHECK_THROWS_AS(backbone_forward(random_input(rng, 3, 100, 100), p), ShapeError);
  CHECK_THROWS_AS(backbone_forward(Tensor(Shape{3, 128}), p), ShapeError);

  FeaturePyramid again = backbone_forward(x, p);
  CHECK(f[0].data() == again[0].data());
  CHECK(f[1].data() == again[1].data());

  // Zero input with the (default-zero) backbone biases gives zero features.
  FeaturePyramid z = backbone_forward(Tensor(Shape{3, 64, 64}), p);
  for (double v : z[0].data()) CHECK(v == 0.0);
  for (double v : z[1].data()) CHECK(v == 0.0);
}

TEST_CASE("heads produce six aligned maps with squashed heat") {
  DetectorParams p = make_detector(3, 13);
  Rng rng(5);
  FeaturePyramid f = backbone_forward(random_input(rng, 3, 64, 64), p);
  HeadBundle h = heads_forward(f[0], p);
  CHECK(h.heat.shape() == Shape{1, 16, 16});
  CHECK(h.offset.shape() == Shape{2, 16, 16});
  CHECK(h.depth_raw.shape() == Shape{1, 16, 16});
  CHECK(h.uncert_raw.shape() == Shape{1, 16, 16});
  CHECK(h.dims3d.shape() == Shape{3, 16, 16});
  CHECK(h.yaw.shape() == Shape{2, 16, 16});
  for (double v : h.heat.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("adapter is shape-preserving and identity-capable") {
  AdapterParams a = make_adapter(17);
  Rng rng(7);
  FeaturePyramid f{random_input(rng, 12, 8, 8), random_input(rng, 12, 4, 4)};
  FeaturePyramid out = adapter_forward(f, a);
  REQUIRE(out.size() == 2);
  CHECK(out[0].shape() == f[0].shape());
  CHECK(out[1].shape() == f[1].shape());

  // Delta kernels pass nonnegative features through both convs unchanged.
  AdapterParams id;
  for (int l = 0; l < 2; ++l) {
    Tensor w = Tensor::zeros(Shape{12, 12, 3, 3});
    for (int c = 0; c < 12; ++c)
      w.mutable_data()[((std::size_t(c) * 12 + c) * 3 + 1) * 3 + 1] = 1.0;
    const std::string base = "adapt.l" + std::to_string(l);
    id.t[base + ".c1.w"] = w;
    id.t[base + ".c1.b"] = Tensor::zeros(Shape{12});
    id.t[base + ".c2.w"] = w;
    id.t[base + ".c2.b"] = Tensor::zeros(Shape{12});
  }
  FeaturePyramid same = adapter_forward(f, id);
  CHECK(same[0].data() == f[0].data());
  CHECK(same[1].data() == f[1].data());
}

TEST_CASE("detection loss sits near its floor on planted ground truth") {
  Scene s = scene_with({Box3D{-3.0, kGroundY - 0.8, 14.0, 4.0, 1.7, 1.6, 0.4},
                        Box3D{5.0, kGroundY - 0.85, 30.0, 4.4, 1.9, 1.7, -1.1}});
  ObjectBatch batch = make_object_batch(s, 2);
  HeadBundle h = encode_gt(batch, 32, 32);
  const double loss = detection_loss(h, batch).value();
  // Exact regressions and saturated heat leave only sigma at its clamp
  // floor with zero depth error: log(0.05) per object.
  CHECK(std::abs(loss - std::log(0.05)) < 0.05);
}

TEST_CASE("detection loss is finite on degenerate heads") {
  Scene s = scene_with({Box3D{0.0, kGroundY - 0.8, 20.0, 4.2, 1.8, 1.6, 0.0}});
  ObjectBatch batch = make_object_batch(s, 2);
  HeadBundle h{Tensor::full(Shape{1, 32, 32}, 0.5), Tensor(Shape{2, 32, 32}),
               Tensor(Shape{1, 32, 32}), Tensor(Shape{1, 32, 32}),
               Tensor(Shape{3, 32, 32}), Tensor(Shape{2, 32, 32})};
  const double v = detection_loss(h, batch).value();
  CHECK(std::isfinite(v));
  CHECK(v > 0.0);

  // Empty batch: only the heat term remains, so the depth head is inert.
  ObjectBatch empty;
  empty.levels = 2;
  const double e1 = detection_loss(h, empty).value();
  HeadBundle h2 = h;
  h2.depth_raw = Tensor::full(Shape{1, 32, 32}, 3.0);
  CHECK(detection_loss(h2, empty).value() == e1);
  CHECK(std::isfinite(e1));
}

TEST_CASE("detection loss gradchecks through heads and backbone") {
  Scene s = scene_with({Box3D{-2.0, kGroundY - 0.8, 12.0, 4.0, 1.7, 1.6, 0.7},
                        Box3D{4.0, kGroundY - 0.85, 24.0, 4.4, 1.9, 1.7, -0.3}});
  // Shrink to a 16x16 input so the finite-difference sweep stays cheap: the
  // batch cells must fit the 4x4 head grid, so rebuild them by hand.
  ObjectBatch batch = make_object_batch(s, 2);
  batch.objects[0].cy = 1; batch.objects[0].cx = 1;
  batch.objects[1].cy = 2; batch.objects[1].cx = 3;
  DetectorParams p = make_detector(3, 19);
  Rng rng(23);
  Tensor x = random_input(rng, 3, 16, 16, 0.2, 1.0);
  FeaturePyramid f = backbone_forward(x, p);
  const Tensor f4 = f[0];  // constant w.r.t. the head weights below

  for (const char* name : {"head.heat.w", "head.offset.w", "head.depth.w",
                           "head.uncert.w", "head.dims.w", "head.yaw.w"}) {
    CAPTURE(name);
    const double err = gradcheck(
        [&](const Tensor& wt) {
          DetectorParams q = p;
          q.t[name] = wt;
          return detection_loss(heads_forward(f4, q), batch);
        },
        p.t[name]);
    CHECK(err < 1e-4);
  }

  // Full path: input -> backbone -> heads -> loss.
  const double err = gradcheck(
      [&](const Tensor& in) {
        return detection_loss(heads_forward(backbone_forward(in, p)[0], p),
                              batch);
      },
      x);
  CHECK(err < 1e-4);
}

TEST_CASE("decode round-trips planted ground truth") {
  Scene s = scene_with({Box3D{-6.0, kGroundY - 0.8, 16.0, 4.0, 1.7, 1.6, 0.3},
                        Box3D{2.0, kGroundY - 0.75, 28.0, 4.4, 1.9, 1.5, -2.0},
                        Box3D{9.0, kGroundY - 0.85, 45.0, 4.1, 1.8, 1.7, 1.2}});
  ObjectBatch batch = make_object_batch(s, 2);
  HeadBundle h = encode_gt(batch, 32, 32);
  auto dets = decode_detections(h, s.cam, 0.5, 10);
  REQUIRE(dets.size() == 3);
  for (const auto& o : s.objects) {
    double best = 1e30;
    const Detection* match = nullptr;
    for (const auto& d : dets) {
      const double dist = std::abs(d.box.x - o.box3d.x) + std::abs(d.z - o.box3d.z);
      if (dist < best) { best = dist; match = &d; }
    }
    REQUIRE(match != nullptr);
    CHECK(std::abs(match->z - o.z_star) < 1e-6);
    CHECK(std::abs(match->box.l - o.box3d.l) < 1e-6);
    CHECK(std::abs(match->box.w - o.box3d.w) < 1e-6);
    CHECK(std::abs(match->box.h - o.box3d.h) < 1e-6);
    CHECK(std::abs(match->box.yaw - o.box3d.yaw) < 1e-6);
    // Center recovered within one stride-4 cell (and, with the planted
    // offsets, in fact much tighter).
    const double u_true = s.cam.cx + s.cam.fx * o.box3d.x / o.box3d.z;
    const double u_dec = s.cam.cx + s.cam.fx * match->box.x / match->box.z;
    CHECK(std::abs(u_dec - u_true) <= 4.0);
    CHECK(std::abs(match->box.x - o.box3d.x) < 1e-6);
    CHECK(std::abs(match->box.y - o.box3d.y) < 1e-6);
    CHECK(match->sigma == doctest::Approx(0.05));
  }
}

TEST_CASE("decode thresholding, suppression, and top-k") {
  HeadBundle h{Tensor::full(Shape{1, 8, 8}, 0.1), Tensor(Shape{2, 8, 8}),
               Tensor(Shape{1, 8, 8}), Tensor(Shape{1, 8, 8}),
               Tensor::full(Shape{3, 8, 8}, 1.0), Tensor(Shape{2, 8, 8})};
  GenConfig cfg;
  const CameraIntrinsics cam = camera_for(cfg);
  CHECK(decode_detections(h, cam, 0.25, 10).empty());

  h.heat.mutable_data()[3 * 8 + 5] = 0.9;  // single peak at (3,5)
  auto dets = decode_detections(h, cam, 0.25, 10);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.9));

  // A second, weaker peak; raising the threshold must only remove.
  h.heat.mutable_data()[6 * 8 + 1] = 0.4;
  auto lo = decode_detections(h, cam, 0.25, 10);
  auto hi = decode_detections(h, cam, 0.5, 10);
  CHECK(lo.size() == 2);
  CHECK(hi.size() == 1);
  for (const auto& d : hi) {
    bool found = false;
    for (const auto& e : lo)
      if (e.score == d.score && e.box.x == d.box.x && e.z == d.z) found = true;
    CHECK(found);
  }
  CHECK(decode_detections(h, cam, 0.25, 1).size() == 1);
  CHECK(decode_detections(h, cam, 0.25, 1)[0].score == doctest::Approx(0.9));

  // Scores order the output descending.
  CHECK(lo[0].score >= lo[1].score);
}

TEST_CASE("object batches carry consistent targets") {
  GenConfig cfg;
  cfg.seed = 77;
  Rng rng(derive_seed(cfg.seed, 3));
  Scene s = sample_scene(cfg, rng);
  s.image = render_image(s, cfg.eta, rng);
  s.depth = render_depth_map(s, cfg.rho, rng);
  ObjectBatch b = make_object_batch(s, 2);
  REQUIRE(b.n() == int(s.objects.size()));
  CHECK(b.levels == 2);
  for (int i = 0; i < b.n(); ++i) {
    const ObjectInfo& o = b.objects[i];
    CHECK(o.cy >= 0);
    CHECK(o.cy < 32);
    CHECK(o.cx >= 0);
    CHECK(o.cx < 32);
    CHECK(o.off_u >= -0.5);
    CHECK(o.off_u < 0.5);
    CHECK(o.off_v >= -0.5);
    CHECK(o.off_v < 0.5);
    CHECK(o.z_star == s.objects[i].z_star);
    REQUIRE(o.rois.size() == 2);
    REQUIRE(o.masks.size() == 2);
    CHECK(o.rois[0].level == 0);
    CHECK(o.rois[1].level == 1);
    CHECK(o.masks[0].shape() == Shape{32, 32});
    CHECK(o.masks[1].shape() == Shape{16, 16});
  }
}

TEST_CASE("teacher and student inputs") {
  GenConfig cfg;
  cfg.seed = 81;
  Rng rng(derive_seed(cfg.seed, 0));
  Scene s = sample_scene(cfg, rng);
  s.image = render_image(s, cfg.eta, rng);
  s.depth = render_depth_map(s, cfg.rho, rng);
  Tensor ti = teacher_input(s);
  CHECK(ti.shape() == Shape{1, 128, 128});
  for (double v : ti.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(student_input(s).data() == s.image.data());
}

TEST_CASE("checkpoints round-trip bitwise") {
  DetectorParams p = make_detector(3, 29);
  fs::remove_all("tmp_ckpt");
  fs::create_directories("tmp_ckpt");
  write_checkpoint(p.t, "tmp_ckpt/d.ckpt");
  ParamMap r = read_checkpoint("tmp_ckpt/d.ckpt");
  REQUIRE(r.size() == p.t.size());
  for (const auto& [name, t] : p.t) {
    REQUIRE(r.count(name) == 1);
    CHECK(r.at(name).shape() == t.shape());
    CHECK(r.at(name).data() == t.data());
  }
  CHECK(params_hash(r) == params_hash(p.t));
}

TEST_CASE("corrupt checkpoints fail with offsets") {
  DetectorParams p = make_detector(1, 31);
  fs::remove_all("tmp_ckbad");
  fs::create_directories("tmp_ckbad");
  write_checkpoint(p.t, "tmp_ckbad/ok.ckpt");
  std::ifstream in("tmp_ckbad/ok.ckpt", std::ios::binary);
  std::string good(std::istreambuf_iterator<char>(in), {});
  in.close();

  auto spit = [](const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
  };

  spit("tmp_ckbad/magic.ckpt", "XSTL-CKP" + good.substr(8));
  try {
    read_checkpoint("tmp_ckbad/magic.ckpt");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.offset == 0);
  }

  std::string bumped = good;
  bumped[9] = 9;
  spit("tmp_ckbad/ver.ckpt", bumped);
  try {
    read_checkpoint("tmp_ckbad/ver.ckpt");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.offset == 9);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  for (const std::size_t cut :
       {std::size_t(7), std::size_t(13), std::size_t(60), good.size() - 9}) {
    spit("tmp_ckbad/cut.ckpt", good.substr(0, cut));
    try {
      read_checkpoint("tmp_ckbad/cut.ckpt");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.offset >= 0);
      CHECK(e.offset <= (long long)good.size());
    }
  }
}
