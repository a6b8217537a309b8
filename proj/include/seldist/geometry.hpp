#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "seldist/ops.hpp"
#include "seldist/tensor.hpp"

namespace seldist {

// Camera frame: x right, y down, z forward (meters). Yaw rotates about the
// vertical axis; yaw = 0 points the length axis along +z, so the nearest
// footprint corner sits at depth z - (l/2)|cos yaw| - (w/2)|sin yaw|.
struct Box3D {
  double x = 0, y = 0, z = 0;  // center
  double l = 0, w = 0, h = 0;  // length (heading), width, height
  double yaw = 0;
};

struct Box2D {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixels, half-open extents
};

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

// Footprint corners on the BEV plane (x, z), counter-clockwise.
std::array<std::array<double, 2>, 4> bev_corners(const Box3D& box);

// Tight axis-aligned hull of the 8 projected corners, clipped to the image.
// Empty optional when the box reaches behind the camera (any corner z ≤ 0.1)
// or the hull misses the image entirely.
std::optional<Box2D> project_box3d(const Box3D& box, const CameraIntrinsics& cam);

// Rotated-rectangle intersection-over-union on the BEV plane
// (Sutherland–Hodgman clipping + shoelace area).
double iou_bev(const Box3D& a, const Box3D& b);

// BEV intersection area × vertical overlap, over the volume union.
double iou_3d(const Box3D& a, const Box3D& b);

// Monte-Carlo estimate of iou_bev by point sampling (test oracle).
double iou_bev_mc(const Box3D& a, const Box3D& b, int samples,
                  std::uint64_t seed);

// Pixel box to continuous feature-level coordinates at the given stride;
// extents below one feature cell are grown symmetrically to one cell.
Roi box2d_to_roi(const Box2D& box, int stride);

// Per-object binary (level_h, level_w) masks: cell (y,x) is set iff its pixel
// center (stride·(x+0.5), stride·(y+0.5)) lies in the half-open box.
std::vector<Tensor> foreground_mask(const std::vector<Box2D>& boxes,
                                    int level_h, int level_w, int stride);

}  // namespace seldist
