#include "seldist/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "seldist/rng.hpp"

namespace seldist {

namespace {

constexpr double COLLINEAR_TOL = 1e-12;

using Pt = std::array<double, 2>;  // (x, z)

double polygon_area(const std::vector<Pt>& poly) {
  double s = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& a = poly[i];
    const Pt& b = poly[(i + 1) % n];
    s += a[0] * b[1] - b[0] * a[1];
  }
  return 0.5 * s;  // signed; positive for counter-clockwise
}

double cross(const Pt& o, const Pt& a, const Pt& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Clip subject against one directed edge a->b (inside = left side).
std::vector<Pt> clip_edge(const std::vector<Pt>& subject, const Pt& a,
                          const Pt& b) {
  std::vector<Pt> out;
  const std::size_t n = subject.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& p = subject[i];
    const Pt& q = subject[(i + 1) % n];
    const double cp = cross(a, b, p);
    const double cq = cross(a, b, q);
    const bool pin = cp >= -COLLINEAR_TOL;
    const bool qin = cq >= -COLLINEAR_TOL;
    if (pin) out.push_back(p);
    if (pin != qin) {
      const double t = cp / (cp - cq);
      out.push_back(Pt{p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
    }
  }
  return out;
}

double convex_intersection_area(std::vector<Pt> subject, std::vector<Pt> clip) {
  if (polygon_area(clip) < 0.0) std::reverse(clip.begin(), clip.end());
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i)
    subject = clip_edge(subject, clip[i], clip[(i + 1) % clip.size()]);
  if (subject.size() < 3) return 0.0;
  return std::abs(polygon_area(subject));
}

bool point_in_bev(const Box3D& b, double px, double pz) {
  const double dx = px - b.x;
  const double dz = pz - b.z;
  const double s = std::sin(b.yaw), c = std::cos(b.yaw);
  const double u = dx * s + dz * c;
  const double v = dx * c - dz * s;
  return std::abs(u) <= 0.5 * b.l && std::abs(v) <= 0.5 * b.w;
}

}  // namespace

std::array<std::array<double, 2>, 4> bev_corners(const Box3D& box) {
  const double s = std::sin(box.yaw), c = std::cos(box.yaw);
  const double hu = 0.5 * box.l, hv = 0.5 * box.w;
  std::array<std::array<double, 2>, 4> out;
  // (u, v) box-frame corners in counter-clockwise order on (x, z).
  const double us[4] = {hu, -hu, -hu, hu};
  const double vs[4] = {hv, hv, -hv, -hv};
  for (int i = 0; i < 4; ++i) {
    out[i][0] = box.x + us[i] * s + vs[i] * c;
    out[i][1] = box.z + us[i] * c - vs[i] * s;
  }
  return out;
}

std::optional<Box2D> project_box3d(const Box3D& box,
                                   const CameraIntrinsics& cam) {
  const auto bev = bev_corners(box);
  double u0 = 1e300, u1 = -1e300, v0 = 1e300, v1 = -1e300;
  for (const auto& p : bev) {
    if (p[1] <= 0.1) return std::nullopt;  // reaches behind the camera
    for (int k = 0; k < 2; ++k) {
      const double y = box.y + (k ? 0.5 : -0.5) * box.h;
      const double u = cam.fx * p[0] / p[1] + cam.cx;
      const double v = cam.fy * y / p[1] + cam.cy;
      u0 = std::min(u0, u);
      u1 = std::max(u1, u);
      v0 = std::min(v0, v);
      v1 = std::max(v1, v);
    }
  }
  Box2D out{std::max(u0, 0.0), std::max(v0, 0.0),
            std::min(u1, double(cam.width)), std::min(v1, double(cam.height))};
  if (out.x1 <= out.x0 || out.y1 <= out.y0) return std::nullopt;
  return out;
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  std::vector<Pt> pa(ca.begin(), ca.end());
  std::vector<Pt> pb(cb.begin(), cb.end());
  const double inter = convex_intersection_area(pa, pb);
  const double area_a = a.l * a.w;
  const double area_b = b.l * b.w;
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  std::vector<Pt> pa(ca.begin(), ca.end());
  std::vector<Pt> pb(cb.begin(), cb.end());
  const double inter_bev = convex_intersection_area(pa, pb);
  const double ylo = std::max(a.y - 0.5 * a.h, b.y - 0.5 * b.h);
  const double yhi = std::min(a.y + 0.5 * a.h, b.y + 0.5 * b.h);
  const double overlap = std::max(0.0, yhi - ylo);
  const double inter = inter_bev * overlap;
  const double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_bev_mc(const Box3D& a, const Box3D& b, int samples,
                  std::uint64_t seed) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  double x0 = 1e300, x1 = -1e300, z0 = 1e300, z1 = -1e300;
  for (const auto& p : ca) {
    x0 = std::min(x0, p[0]); x1 = std::max(x1, p[0]);
    z0 = std::min(z0, p[1]); z1 = std::max(z1, p[1]);
  }
  double bx0 = 1e300, bx1 = -1e300, bz0 = 1e300, bz1 = -1e300;
  for (const auto& p : cb) {
    bx0 = std::min(bx0, p[0]); bx1 = std::max(bx1, p[0]);
    bz0 = std::min(bz0, p[1]); bz1 = std::max(bz1, p[1]);
  }
  // Sample only the AABB overlap: the intersection lives there.
  const double ox0 = std::max(x0, bx0), ox1 = std::min(x1, bx1);
  const double oz0 = std::max(z0, bz0), oz1 = std::min(z1, bz1);
  if (ox1 <= ox0 || oz1 <= oz0) return 0.0;
  Rng rng(seed);
  long hits = 0;
  for (int i = 0; i < samples; ++i) {
    const double px = rng.uniform(ox0, ox1);
    const double pz = rng.uniform(oz0, oz1);
    if (point_in_bev(a, px, pz) && point_in_bev(b, px, pz)) ++hits;
  }
  const double inter =
      (ox1 - ox0) * (oz1 - oz0) * double(hits) / double(samples);
  const double uni = a.l * a.w + b.l * b.w - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Roi box2d_to_roi(const Box2D& box, int stride) {
  if (stride < 1) throw ValueError("box2d_to_roi: stride < 1");
  Roi roi;
  roi.x0 = box.x0 / stride;
  roi.y0 = box.y0 / stride;
  roi.x1 = box.x1 / stride;
  roi.y1 = box.y1 / stride;
  if (roi.x1 - roi.x0 < 1.0) {
    const double c = 0.5 * (roi.x0 + roi.x1);
    roi.x0 = c - 0.5;
    roi.x1 = c + 0.5;
  }
  if (roi.y1 - roi.y0 < 1.0) {
    const double c = 0.5 * (roi.y0 + roi.y1);
    roi.y0 = c - 0.5;
    roi.y1 = c + 0.5;
  }
  return roi;
}

std::vector<Tensor> foreground_mask(const std::vector<Box2D>& boxes,
                                    int level_h, int level_w, int stride) {
  std::vector<Tensor> masks;
  masks.reserve(boxes.size());
  for (const Box2D& b : boxes) {
    Tensor m(Shape{level_h, level_w});
    std::vector<double>& md = m.mutable_data();
    for (int y = 0; y < level_h; ++y) {
      const double py = stride * (y + 0.5);
      if (py < b.y0 || py >= b.y1) continue;
      for (int x = 0; x < level_w; ++x) {
        const double px = stride * (x + 0.5);
        if (px >= b.x0 && px < b.x1) md[std::size_t(y) * level_w + x] = 1.0;
      }
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

}  // namespace seldist
