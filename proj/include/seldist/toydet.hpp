#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seldist/geometry.hpp"
#include "seldist/losses.hpp"
#include "seldist/synthscene.hpp"
#include "seldist/tensor.hpp"

namespace seldist {

// Depth decode: the head predicts log(z / kZPriorDecode), centering a fresh
// head near plausible depths. Inference clamps z to [kZMinDecode, kZMaxDecode];
// the training loss decodes unclamped so the gradient never dies at the rails.
inline constexpr double kZMinDecode = 1.0;
inline constexpr double kZMaxDecode = 80.0;
inline constexpr double kZPriorDecode = 16.5;  // ~geometric mean of the z range

// The uncertainty head's raw map is squashed to (-kSigmaRawBound,
// kSigmaRawBound), strictly inside sigma_from_head's [ln 0.05, ln 10] clamp.
// The gain flattens the squash around zero so a fresh head starts near
// sigma = 1 whatever constant offset its init happens to produce.
inline constexpr double kSigmaRawBound = 2.2;
inline constexpr double kSigmaRawGain = 4.0;

using ParamMap = std::map<std::string, Tensor>;  // name-sorted by definition

struct DetectorParams {
  ParamMap t;
};

struct AdapterParams {
  ParamMap t;
};

struct Detection {
  double score = 0;
  Box3D box;
  double z = 0;
  double sigma = 0;
};

// Three stride-2 stages (stem to 8 channels, then two 12-channel residual
// downsampling blocks with projection shortcuts) yield levels at strides 4
// and 8; six 1x1 heads sit on the stride-4 level. Teacher and student differ
// only in input channel count.
DetectorParams make_detector(int in_channels, std::uint64_t seed);
// Two 3x3 convs (relu between) per level, shape-preserving.
AdapterParams make_adapter(std::uint64_t seed);

int detector_in_channels(const DetectorParams& p);
// Throws unless feature/head shapes agree level-for-level (input layer aside).
void check_compatible(const DetectorParams& teacher,
                      const DetectorParams& student);

// Pointers in name order, for the optimizer.
std::vector<Tensor*> param_ptrs(ParamMap& m);
void watch_all(Tape& tape, ParamMap& m);

// FNV-1a over names, extents, and raw parameter bytes, in name order.
std::uint64_t params_hash(const ParamMap& m);

FeaturePyramid backbone_forward(const Tensor& input, const DetectorParams& p);
// Heat is squashed to (0,1); the other five maps are raw.
HeadBundle heads_forward(const Tensor& level0, const DetectorParams& p);
FeaturePyramid adapter_forward(const FeaturePyramid& features,
                               const AdapterParams& p);

// Network inputs: the teacher reads the depth grid log-encoded to [0,1];
// the student reads the image as-is.
Tensor teacher_input(const Scene& scene);
Tensor student_input(const Scene& scene);

// Ground-truth plumbing for one scene: center cells, subpixel offsets,
// per-level rois and foreground masks, regression targets.
ObjectBatch make_object_batch(const Scene& scene, int levels);

// Focal heat loss (alpha=2, beta=4, Gaussian-splatted targets) plus L1 on
// offset/dims/yaw and the uncertainty depth loss at GT center cells, all with
// unit weights. An empty batch leaves only the heat term.
Tensor detection_loss(const HeadBundle& heads, const ObjectBatch& batch);

// 3x3 local maxima of heat above score_thresh, top_k by descending score
// (ties by scan order); centers refined by the offset head, depth/dims/yaw
// read at the peak cell, box center back-projected along the pixel ray.
std::vector<Detection> decode_detections(const HeadBundle& heads,
                                         const CameraIntrinsics& cam,
                                         double score_thresh, int top_k);

// Checkpoint: magic "MSTL-CKP\0", version u16, tensor count u32, then per
// tensor (name order): name length u16 + UTF-8 bytes, rank u8, extents u32,
// raw little-endian doubles.
void write_checkpoint(const ParamMap& params, const std::string& path);
ParamMap read_checkpoint(const std::string& path);

}  // namespace seldist
