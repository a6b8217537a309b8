#include "seldist/toydet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "seldist/errors.hpp"
#include "seldist/ops.hpp"
#include "seldist/rng.hpp"

namespace seldist {

namespace {

constexpr int kStem = 8;
constexpr int kFeat = 12;
constexpr int kLevels = 2;

Tensor init_conv(Rng& rng, int co, int ci, int k) {
  Tensor w(Shape{co, ci, k, k});
  const double a = 1.0 / std::sqrt(double(ci) * k * k);
  for (double& v : w.mutable_data()) v = rng.uniform(-a, a);
  return w;
}

Tensor bias_of(const std::vector<double>& vals) {
  Tensor b(Shape{int(vals.size())});
  b.mutable_data() = vals;
  return b;
}

Tensor sigmoid(const Tensor& x) {
  return 1.0 / (1.0 + exp(0.0 - clamp(x, -15.0, 15.0)));
}

// Bounded log-uncertainty: s*tanh(x/(g*s)) keeps the raw map strictly inside
// the sigma clamp band, so the downstream exp(clamp(.)) never hits its rails
// and sigma can always recover from early saturation. The gain g > 1 flattens
// the activation around 0 so a fresh head starts near sigma = 1 regardless of
// its seed's output offset.
Tensor bounded_raw(const Tensor& x, double s, double g) {
  return (2.0 * sigmoid(x * (2.0 / (g * s))) - 1.0) * s;
}

const Tensor& at(const ParamMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw ValueError("missing parameter " + name);
  return it->second;
}

// Per-object column vector read out of a (C,Hc,Wc) map at one cell.
Tensor cell_vec(const Tensor& map, int cy, int cx) {
  const int c = map.shape()[0];
  return reshape(slice(map, {0, cy, cx}, {c, cy + 1, cx + 1}), Shape{c});
}

}  // namespace

DetectorParams make_detector(int in_channels, std::uint64_t seed) {
  if (in_channels < 1) throw ValueError("make_detector: bad input channels");
  Rng rng(derive_seed(seed, 0xD37));
  DetectorParams p;
  p.t["stem.w"] = init_conv(rng, kStem, in_channels, 3);
  p.t["stem.b"] = Tensor::zeros(Shape{kStem});
  p.t["b1c1.w"] = init_conv(rng, kFeat, kStem, 3);
  p.t["b1c1.b"] = Tensor::zeros(Shape{kFeat});
  p.t["b1c2.w"] = init_conv(rng, kFeat, kFeat, 3);
  p.t["b1c2.b"] = Tensor::zeros(Shape{kFeat});
  p.t["b1sc.w"] = init_conv(rng, kFeat, kStem, 1);
  p.t["b1sc.b"] = Tensor::zeros(Shape{kFeat});
  p.t["b2c1.w"] = init_conv(rng, kFeat, kFeat, 3);
  p.t["b2c1.b"] = Tensor::zeros(Shape{kFeat});
  p.t["b2c2.w"] = init_conv(rng, kFeat, kFeat, 3);
  p.t["b2c2.b"] = Tensor::zeros(Shape{kFeat});
  p.t["b2sc.w"] = init_conv(rng, kFeat, kFeat, 1);
  p.t["b2sc.b"] = Tensor::zeros(Shape{kFeat});
  p.t["head.heat.w"] = init_conv(rng, 1, kFeat, 1);
  p.t["head.heat.b"] = bias_of({-2.19});  // squashes to ~0.1 at init
  p.t["head.offset.w"] = init_conv(rng, 2, kFeat, 1);
  p.t["head.offset.b"] = Tensor::zeros(Shape{2});
  p.t["head.depth.w"] = init_conv(rng, 1, kFeat, 1);
  p.t["head.depth.b"] = Tensor::zeros(Shape{1});
  p.t["head.uncert.w"] = init_conv(rng, 1, kFeat, 1);
  p.t["head.uncert.b"] = Tensor::zeros(Shape{1});
  p.t["head.dims.w"] = init_conv(rng, 3, kFeat, 1);
  p.t["head.dims.b"] = bias_of({4.2, 1.8, 1.6});
  p.t["head.yaw.w"] = init_conv(rng, 2, kFeat, 1);
  p.t["head.yaw.b"] = bias_of({0.0, 1.0});
  return p;
}

AdapterParams make_adapter(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xADA));
  AdapterParams p;
  for (int l = 0; l < kLevels; ++l) {
    const std::string base = "adapt.l" + std::to_string(l);
    p.t[base + ".c1.w"] = init_conv(rng, kFeat, kFeat, 3);
    p.t[base + ".c1.b"] = Tensor::zeros(Shape{kFeat});
    p.t[base + ".c2.w"] = init_conv(rng, kFeat, kFeat, 3);
    p.t[base + ".c2.b"] = Tensor::zeros(Shape{kFeat});
  }
  return p;
}

int detector_in_channels(const DetectorParams& p) {
  return at(p.t, "stem.w").shape()[1];
}

void check_compatible(const DetectorParams& teacher,
                      const DetectorParams& student) {
  if (teacher.t.size() != student.t.size())
    throw ShapeError("detectors have different parameter sets");
  for (const auto& [name, wt] : teacher.t) {
    const Tensor& ws = at(student.t, name);
    if (name == "stem.w") {
      if (wt.shape()[0] != ws.shape()[0] || wt.shape()[2] != ws.shape()[2])
        throw ShapeError("stem output shapes differ");
      continue;
    }
    if (wt.shape() != ws.shape())
      throw ShapeError("parameter " + name + " shapes differ");
  }
}

std::vector<Tensor*> param_ptrs(ParamMap& m) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : m) out.push_back(&t);
  return out;
}

void watch_all(Tape& tape, ParamMap& m) {
  for (auto& [name, t] : m) tape.watch(t);
}

std::uint64_t params_hash(const ParamMap& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : m) {
    mix(name.data(), name.size());
    for (const int e : t.shape()) {
      const std::uint32_t u = std::uint32_t(e);
      mix(&u, 4);
    }
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

FeaturePyramid backbone_forward(const Tensor& input, const DetectorParams& p) {
  if (input.shape().size() != 3 || input.shape()[1] % 8 != 0 ||
      input.shape()[2] % 8 != 0)
    throw ShapeError("backbone_forward: input dims must be (C,H,W) with H,W "
                     "divisible by 8, got " + shape_str(input.shape()));
  // Each downsampling block carries a 1x1 stride-2 projection shortcut: it
  // gives the 1x1 heads a two-layer path back to the input grid, which the
  // relu trunk alone fails to keep linear enough for depth regression.
  Tensor s = relu(conv2d(input, at(p.t, "stem.w"), at(p.t, "stem.b"), 2, 1));
  Tensor a = relu(conv2d(s, at(p.t, "b1c1.w"), at(p.t, "b1c1.b"), 2, 1));
  Tensor f4 = relu(conv2d(a, at(p.t, "b1c2.w"), at(p.t, "b1c2.b"), 1, 1)) +
              conv2d(s, at(p.t, "b1sc.w"), at(p.t, "b1sc.b"), 2, 0);
  Tensor d = relu(conv2d(f4, at(p.t, "b2c1.w"), at(p.t, "b2c1.b"), 2, 1));
  Tensor f8 = relu(conv2d(d, at(p.t, "b2c2.w"), at(p.t, "b2c2.b"), 1, 1)) +
              conv2d(f4, at(p.t, "b2sc.w"), at(p.t, "b2sc.b"), 2, 0);
  return {f4, f8};
}

HeadBundle heads_forward(const Tensor& level0, const DetectorParams& p) {
  auto head = [&](const char* name) {
    return conv2d(level0, at(p.t, std::string("head.") + name + ".w"),
                  at(p.t, std::string("head.") + name + ".b"), 1, 0);
  };
  HeadBundle out;
  out.heat = sigmoid(head("heat"));
  out.offset = head("offset");
  out.depth_raw = head("depth");
  out.uncert_raw = bounded_raw(head("uncert"), kSigmaRawBound, kSigmaRawGain);
  out.dims3d = head("dims");
  out.yaw = head("yaw");
  return out;
}

FeaturePyramid adapter_forward(const FeaturePyramid& features,
                               const AdapterParams& p) {
  FeaturePyramid out;
  for (std::size_t l = 0; l < features.size(); ++l) {
    const std::string base = "adapt.l" + std::to_string(l);
    Tensor mid = relu(conv2d(features[l], at(p.t, base + ".c1.w"),
                             at(p.t, base + ".c1.b"), 1, 1));
    out.push_back(conv2d(mid, at(p.t, base + ".c2.w"),
                         at(p.t, base + ".c2.b"), 1, 1));
  }
  return out;
}

Tensor teacher_input(const Scene& scene) {
  // Log-depth encoding in [0, 1]: the depth head's log-space target becomes
  // an affine function of the input pixel instead of a logarithm the trunk
  // would have to synthesize. No-return pixels take the median of their
  // non-zero 3x3 neighbours (hole filling for sensor dropout); holes with no
  // returning neighbour - sky, mostly - read as the far cap, "nothing within
  // range", so they sit next to far returns instead of aliasing the near
  // plane.
  const int h = scene.depth.shape()[1], w = scene.depth.shape()[2];
  Tensor in(scene.depth.shape());
  const auto& src = scene.depth.data();
  auto& dst = in.mutable_data();
  const double cap = kZMaxDecode * 0.75;
  const double denom = std::log(cap);
  const auto encode = [&](double z) {
    return std::log(std::clamp(z, 1.0, cap)) / denom;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double z = src[std::size_t(y) * w + x];
      if (z > 0.0) {
        dst[std::size_t(y) * w + x] = encode(z);
        continue;
      }
      double nb[8];
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double v = src[std::size_t(yy) * w + xx];
          if (v > 0.0) nb[n++] = v;
        }
      if (n == 0) {
        dst[std::size_t(y) * w + x] = 1.0;
        continue;
      }
      std::sort(nb, nb + n);
      const double med = n % 2 ? nb[n / 2] : 0.5 * (nb[n / 2 - 1] + nb[n / 2]);
      dst[std::size_t(y) * w + x] = encode(med);
    }
  return in;
}

Tensor student_input(const Scene& scene) { return scene.image; }

ObjectBatch make_object_batch(const Scene& scene, int levels) {
  ObjectBatch batch;
  batch.levels = levels;
  std::vector<Box2D> boxes;
  for (const auto& o : scene.objects) boxes.push_back(o.box2d);
  for (const auto& o : scene.objects) {
    ObjectInfo info;
    info.box2d = o.box2d;
    info.z_star = o.z_star;
    info.gt = o.box3d;
    const double u = scene.cam.cx + scene.cam.fx * o.box3d.x / o.box3d.z;
    const double v = scene.cam.cy + scene.cam.fy * o.box3d.y / o.box3d.z;
    info.cx = int(u / 4);
    info.cy = int(v / 4);
    info.off_u = u / 4 - (info.cx + 0.5);
    info.off_v = v / 4 - (info.cy + 0.5);
    batch.objects.push_back(info);
  }
  for (int l = 0; l < levels; ++l) {
    const int stride = 4 << l;
    auto masks = foreground_mask(boxes, scene.cam.height / stride,
                                 scene.cam.width / stride, stride);
    for (std::size_t i = 0; i < batch.objects.size(); ++i) {
      Roi roi = box2d_to_roi(boxes[i], stride);
      roi.level = l;
      batch.objects[i].rois.push_back(roi);
      batch.objects[i].masks.push_back(masks[i]);
    }
  }
  return batch;
}

Tensor detection_loss(const HeadBundle& heads, const ObjectBatch& batch) {
  const Shape& hs = heads.heat.shape();
  if (hs.size() != 3 || hs[0] != 1)
    throw ShapeError("detection_loss: heat must be (1,Hc,Wc)");
  const int hc = hs[1], wc = hs[2];
  const int n = batch.n();

  // Gaussian-splatted heat target with exact ones at center cells.
  Tensor target(Shape{1, hc, wc});
  Tensor pos(Shape{1, hc, wc});
  {
    auto& t = target.mutable_data();
    auto& pm = pos.mutable_data();
    for (const auto& o : batch.objects) {
      if (o.cy < 0 || o.cy >= hc || o.cx < 0 || o.cx >= wc)
        throw ValueError("detection_loss: center cell outside the heat map");
      const double wcells = (o.box2d.x1 - o.box2d.x0) / 4.0;
      const double hcells = (o.box2d.y1 - o.box2d.y0) / 4.0;
      const double sg = std::max(0.75, std::min(wcells, hcells) / 4.0);
      const int r = int(std::ceil(3 * sg));
      for (int y = std::max(0, o.cy - r); y <= std::min(hc - 1, o.cy + r); ++y)
        for (int x = std::max(0, o.cx - r); x <= std::min(wc - 1, o.cx + r); ++x) {
          const double d2 = double(y - o.cy) * (y - o.cy) +
                            double(x - o.cx) * (x - o.cx);
          t[std::size_t(y) * wc + x] = std::max(
              t[std::size_t(y) * wc + x], std::exp(-d2 / (2 * sg * sg)));
        }
      t[std::size_t(o.cy) * wc + o.cx] = 1.0;
      pm[std::size_t(o.cy) * wc + o.cx] = 1.0;
    }
  }
  Tensor neg_w(Shape{1, hc, wc});
  {
    auto& nw = neg_w.mutable_data();
    const auto& t = target.data();
    const auto& pm = pos.data();
    for (std::size_t i = 0; i < nw.size(); ++i) {
      const double u = 1.0 - t[i];
      nw[i] = (1.0 - pm[i]) * u * u * u * u;
    }
  }

  const Tensor& p = heads.heat;
  Tensor one_m = 1.0 - p;
  Tensor focal = 0.0 - (sum(pos * one_m * one_m * log(p)) +
                        sum(neg_w * p * p * log(one_m)));
  Tensor loss = focal / double(std::max(n, 1));
  if (n == 0) return loss;

  std::vector<Tensor> offs, dims, yaws, zraws, uraws;
  std::vector<double> off_t, dim_t, yaw_t, z_t;
  for (const auto& o : batch.objects) {
    offs.push_back(cell_vec(heads.offset, o.cy, o.cx));
    dims.push_back(cell_vec(heads.dims3d, o.cy, o.cx));
    yaws.push_back(cell_vec(heads.yaw, o.cy, o.cx));
    zraws.push_back(cell_vec(heads.depth_raw, o.cy, o.cx));
    uraws.push_back(cell_vec(heads.uncert_raw, o.cy, o.cx));
    off_t.insert(off_t.end(), {o.off_u, o.off_v});
    dim_t.insert(dim_t.end(), {o.gt.l, o.gt.w, o.gt.h});
    yaw_t.insert(yaw_t.end(), {std::sin(o.gt.yaw), std::cos(o.gt.yaw)});
    z_t.push_back(o.z_star);
  }
  auto l1 = [n](const Tensor& pred, const std::vector<double>& tgt) {
    return sum(abs(pred - Tensor(Shape{int(tgt.size())}, tgt))) / double(n);
  };
  loss = loss + l1(concat(offs, 0), off_t) + l1(concat(dims, 0), dim_t) +
         l1(concat(yaws, 0), yaw_t);
  // Training decodes depth without the inference clamp: a hard clamp has zero
  // gradient outside its range, and an unlucky init (or one bad step) would
  // strand the whole head there. exp keeps the pull toward bounded targets.
  Tensor z = exp(concat(zraws, 0) + std::log(kZPriorDecode));
  loss = loss + depth_uncertainty_loss(z, z_t, sigma_from_head(concat(uraws, 0)));
  return loss;
}

std::vector<Detection> decode_detections(const HeadBundle& heads,
                                         const CameraIntrinsics& cam,
                                         double score_thresh, int top_k) {
  const Shape& hs = heads.heat.shape();
  const int hc = hs[1], wc = hs[2];
  const auto& p = heads.heat.data();
  auto heat_at = [&](int y, int x) { return p[std::size_t(y) * wc + x]; };

  struct Peak {
    double score;
    int y, x;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < hc; ++y)
    for (int x = 0; x < wc; ++x) {
      const double v = heat_at(y, x);
      if (v <= score_thresh) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= hc || xx < 0 || xx >= wc) continue;
          if (heat_at(yy, xx) > v) { is_max = false; break; }
        }
      if (is_max) peaks.push_back({v, y, x});
    }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (int(peaks.size()) > top_k) peaks.resize(std::size_t(top_k));

  auto map_at = [&](const Tensor& m, int c, int y, int x) {
    return m.data()[(std::size_t(c) * hc + y) * wc + x];
  };
  std::vector<Detection> dets;
  for (const Peak& pk : peaks) {
    Detection d;
    d.score = pk.score;
    const double u =
        (pk.x + 0.5 + map_at(heads.offset, 0, pk.y, pk.x)) * 4.0;
    const double v =
        (pk.y + 0.5 + map_at(heads.offset, 1, pk.y, pk.x)) * 4.0;
    d.z = std::exp(std::clamp(
        map_at(heads.depth_raw, 0, pk.y, pk.x) + std::log(kZPriorDecode),
        std::log(kZMinDecode), std::log(kZMaxDecode)));
    d.sigma = std::exp(std::clamp(map_at(heads.uncert_raw, 0, pk.y, pk.x),
                                  std::log(0.05), std::log(10.0)));
    d.box.x = (u - cam.cx) * d.z / cam.fx;
    d.box.y = (v - cam.cy) * d.z / cam.fy;
    d.box.z = d.z;
    d.box.l = std::max(0.1, map_at(heads.dims3d, 0, pk.y, pk.x));
    d.box.w = std::max(0.1, map_at(heads.dims3d, 1, pk.y, pk.x));
    d.box.h = std::max(0.1, map_at(heads.dims3d, 2, pk.y, pk.x));
    d.box.yaw = std::atan2(map_at(heads.yaw, 0, pk.y, pk.x),
                           map_at(heads.yaw, 1, pk.y, pk.x));
    dets.push_back(d);
  }
  return dets;
}

namespace {

constexpr char kCkptMagic[9] = {'M', 'S', 'T', 'L', '-', 'C', 'K', 'P', '\0'};
constexpr std::uint16_t kCkptVersion = 1;

void ck_read(std::ifstream& in, void* p, std::size_t n, long long offset,
             const char* what) {
  in.read(static_cast<char*>(p), std::streamsize(n));
  if (in.gcount() != std::streamsize(n))
    throw IoError(std::string("checkpoint truncated in ") + what,
                  offset + in.gcount());
}

}  // namespace

void write_checkpoint(const ParamMap& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_checkpoint: cannot open " + path);
  out.write(kCkptMagic, 9);
  out.write(reinterpret_cast<const char*>(&kCkptVersion), 2);
  const std::uint32_t count = std::uint32_t(params.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, t] : params) {
    const std::uint16_t len = std::uint16_t(name.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(name.data(), len);
    const std::uint8_t rank = std::uint8_t(t.shape().size());
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (const int e : t.shape()) {
      const std::uint32_t u = std::uint32_t(e);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
    out.write(reinterpret_cast<const char*>(t.data().data()),
              std::streamsize(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("write_checkpoint: short write to " + path);
}

ParamMap read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_checkpoint: cannot open " + path);
  char magic[9];
  ck_read(in, magic, 9, 0, "magic");
  if (std::memcmp(magic, kCkptMagic, 9) != 0)
    throw IoError("read_checkpoint: bad magic in " + path, 0);
  std::uint16_t version = 0;
  ck_read(in, &version, 2, 9, "version");
  if (version != kCkptVersion)
    throw IoError("read_checkpoint: unsupported version " +
                  std::to_string(version), 9);
  std::uint32_t count = 0;
  ck_read(in, &count, 4, 11, "tensor count");

  ParamMap out;
  long long offset = 15;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    ck_read(in, &len, 2, offset, "name length");
    offset += 2;
    std::string name(len, '\0');
    ck_read(in, name.data(), len, offset, "name");
    offset += len;
    std::uint8_t rank = 0;
    ck_read(in, &rank, 1, offset, "rank");
    offset += 1;
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) {
      std::uint32_t e = 0;
      ck_read(in, &e, 4, offset, "extent");
      offset += 4;
      if (e == 0 || e > (1u << 24))
        throw IoError("read_checkpoint: implausible extent in " + name, offset - 4);
      shape[d] = int(e);
    }
    Tensor t(shape);
    ck_read(in, t.mutable_data().data(), t.size() * sizeof(double), offset,
            name.c_str());
    offset += (long long)(t.size() * sizeof(double));
    if (!out.emplace(name, std::move(t)).second)
      throw IoError("read_checkpoint: duplicate tensor " + name, offset);
  }
  return out;
}

}  // namespace seldist
