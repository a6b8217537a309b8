#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "seldist/geometry.hpp"
#include "seldist/rng.hpp"
#include "seldist/tensor.hpp"

namespace seldist {

// Camera height above the ground plane (meters, y points down).
inline constexpr double kGroundY = 1.6;
// Depth range objects are sampled in; labels must stay within [8, 60].
// The far plane keeps the smallest silhouette at ~5 pixels so depth and
// heading stay observable through stride-4 feature cells.
inline constexpr double kZNear = 8.5;
inline constexpr double kZFar = 32.0;
// Relative left-to-right shading slope at sin(yaw) = 1; the image's only
// orientation-sign cue.
inline constexpr double kShadeTilt = 0.25;
// Headings are sampled lane-aligned within +-kYawRange of the road axis.
inline constexpr double kYawRange = 0.35;

struct ObjectLabel {
  Box3D box3d;
  Box2D box2d;    // exact pinhole projection
  Box2D drawn2d;  // rectangle actually rasterized into the image (noisy at
                  // eta > 0); the image's only size cue
  double z_star = 0;
  std::string category = "car";
};

struct Scene {
  int id = 0;
  CameraIntrinsics cam;
  std::vector<ObjectLabel> objects;
  Tensor image;  // (3, H, W), flat-shaded rects over textured background
  Tensor depth;  // (1, H, W), meters; 0 = no return
};

struct GenConfig {
  int n_train = 400;
  int n_val = 100;
  int objects_min = 1;
  int objects_max = 6;
  int width = 128;
  int height = 128;
  std::array<double, 3> dims_mean{4.2, 1.8, 1.6};    // l, w, h
  std::array<double, 3> dims_spread{0.5, 0.15, 0.12};  // uniform half-range
  double eta = 0.15;  // image depth-cue noise level
  double rho = 0.05;  // depth-map dropout rate
  std::uint64_t seed = 1;
};

CameraIntrinsics camera_for(const GenConfig& cfg);

// Places objects on the ground plane inside the frustum. Rejection-samples
// each object until its full 2D projection fits the image with a margin,
// pairwise BEV IoU < 0.1, pairwise image-rect IoU < 0.3, and stride-4 center
// cells are distinct; throws after 1000 failed tries naming the constraint
// that rejected most.
Scene sample_scene(const GenConfig& cfg, Rng& rng);

// Rasterizes each object as an axis-aligned rectangle with exact-coverage
// antialiasing, composited far to near over a noisy background. The drawn
// rectangle is the true projection scaled about its center by (1 + eta*xi);
// the shade decays with depth plus eta-scaled noise and tilts horizontally
// with sin(yaw) (kShadeTilt) — so apparent size and intensity are the only
// (noisy) depth cues, and the tilt the only orientation-sign cue. Stores
// each object's drawn rect in its label and returns the (3, H, W) grid.
Tensor render_image(Scene& scene, double eta, Rng& rng);

// Nearest-surface depth per pixel: over the hull of the 8 projected corners,
// each pixel column reads the depth where its BEV ray enters the footprint
// rectangle (the column minimum is the nearest-corner depth
// z - l/2|cos yaw| - w/2|sin yaw|), nearest surface winning shared pixels;
// ground plane depth below the horizon, 0 (no return) above; then a fraction
// rho of pixels dropped to 0. Returns the (1, H, W) grid.
Tensor render_depth_map(const Scene& scene, double rho, Rng& rng);

// Scene file: magic "MSTL-SCN\0", version u16, header length u32, JSON
// header, then image and depth grids as raw little-endian doubles.
void write_scene(const Scene& scene, const std::string& path);
Scene read_scene(const std::string& path);

struct Manifest {
  int version = 1;
  std::uint64_t seed = 0;
  GenConfig cfg;
  std::vector<std::string> train;  // paths relative to the manifest
  std::vector<std::string> val;
};

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

// Generates n_train + n_val scenes with per-scene derived seeds, writes them
// plus manifest.json under out_dir, and returns the manifest.
Manifest generate_corpus(const GenConfig& cfg, const std::string& out_dir);

// Loads every scene listed in a split ("train" or "val") of a manifest.
std::vector<Scene> load_split(const std::string& manifest_path,
                              const std::string& split);

}  // namespace seldist
