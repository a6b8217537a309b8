#pragma once

#include <array>
#include <vector>

#include "seldist/geometry.hpp"
#include "seldist/ops.hpp"
#include "seldist/tensor.hpp"

namespace seldist {

// A feature pyramid is simply the per-level feature maps, finest first.
using FeaturePyramid = std::vector<Tensor>;

// Detection-head output maps, all at the stride-4 level.
struct HeadBundle {
  Tensor heat;        // (1,H,W) in (0,1)
  Tensor offset;      // (2,H,W) subpixel center offset, cells
  Tensor depth_raw;   // (1,H,W) pre-exp
  Tensor uncert_raw;  // (1,H,W) pre-activation t
  Tensor dims3d;      // (3,H,W)
  Tensor yaw;         // (2,H,W) sin/cos

  std::array<const Tensor*, 6> all() const {
    return {&heat, &offset, &depth_raw, &uncert_raw, &dims3d, &yaw};
  }
};

struct ObjectInfo {
  Box2D box2d;
  std::vector<Roi> rois;      // per level
  std::vector<Tensor> masks;  // per level, (H_l, W_l) binary
  double z_star = 0.0;        // GT instance depth (center z)
  int cy = 0, cx = 0;         // GT center cell at stride 4
  double off_u = 0, off_v = 0;  // subpixel center offset, cells
  Box3D gt;                   // full 3D label (regression targets)
};

struct ObjectBatch {
  std::vector<ObjectInfo> objects;
  int levels = 0;
  int n() const { return int(objects.size()); }
};

enum class WeightScheme { Student, Teacher, Sum, Multiply, Uniform };

struct DistillConfig {
  double lambda1 = 10.0, lambda2 = 1.0, lambda3 = 1.0;
  WeightScheme scheme = WeightScheme::Student;
  int roi_out = 7;
  int sampling_ratio = 2;
  double sigma_min = 0.05, sigma_max = 10.0;
  double omega_max = 5.0;
  int warmup_epochs = 5;
  int levels = 2;
  bool detach_sigma_in_relation = false;
  bool response_foreground_only = false;
};

// Pairwise object correlations; entries are scalar tensors so gradients can
// flow on the student side. Empty (n < 2) matrices carry no entries.
struct RelationMatrix {
  int n = 0;
  std::vector<Tensor> d;  // n*n, row-major
  const Tensor& at(int i, int j) const { return d[std::size_t(i) * n + j]; }
};

// σ = exp(clamp(t, ln σ_min, ln σ_max)); strictly positive, differentiable.
Tensor sigma_from_head(const Tensor& uncert_raw, double sigma_min = 0.05,
                       double sigma_max = 10.0);

// Mean over objects of |z_i − z*_i|/σ_i + log σ_i; zero for empty batches.
Tensor depth_uncertainty_loss(const Tensor& z, const std::vector<double>& z_star,
                              const Tensor& sigma);

// Per-object transfer weights; plain values, so nothing flows back through ω.
std::vector<double> selective_weights(const std::vector<double>& sigma_s,
                                      const std::vector<double>& sigma_t,
                                      WeightScheme scheme,
                                      double omega_max = 5.0);

// Σ_l mean over cells and channels of (T−S)²; teacher side detached.
Tensor general_feature_distillation(const FeaturePyramid& teacher,
                                    const FeaturePyramid& student);

// Σ_l Σ_i ω_i/(H_i·W_i) Σ_{cells in M_i} mean_channels (T−S)², with H_i/W_i
// the bounding extents of object i's mask at level l; teacher detached.
Tensor dasfd_loss(const FeaturePyramid& teacher, const FeaturePyramid& student,
                  const ObjectBatch& batch, const std::vector<double>& omega);

// R(A,B): mean over elements of (A−B)².
Tensor pairwise_relation(const Tensor& a, const Tensor& b);

// D[i,j] = Σ_l [ R(F_i^l, F_j^l)/(σ_i²+σ_j²) + log(σ_i²+σ_j²) ], symmetric,
// diagonal included. detach_all severs every gradient path (teacher side).
RelationMatrix relation_matrix(const FeaturePyramid& features,
                               const std::vector<std::vector<Roi>>& rois,
                               const Tensor& sigma, const DistillConfig& cfg,
                               bool detach_all);

// Σ_l Σ_i Σ_j |R(T_i,T_j) − R(S_i,S_j)| over ordered pairs; teacher detached.
Tensor general_relation_distillation(const FeaturePyramid& teacher,
                                     const FeaturePyramid& student,
                                     const std::vector<std::vector<Roi>>& rois,
                                     const DistillConfig& cfg);

// Σ over ordered pairs (diagonal included) of |D_T[i,j] − D_S[i,j]|.
Tensor dasrd_loss(const RelationMatrix& dt, const RelationMatrix& ds);

// (1/K) Σ_heads mean |Y_T − Y_S|; optional foreground mask restricts the
// per-head mean to masked cells. Teacher detached.
Tensor response_distillation(const HeadBundle& teacher, const HeadBundle& student,
                             const Tensor* foreground = nullptr);

// Linear 0→1 ramp across the warm-up epochs, 1 afterwards.
double warmup_ramp(int epoch, int warmup_epochs);

// L_src + ramp·(λ1·L_wfd + λ2·L_wrd + λ3·L_ed); aborts on non-finite terms.
Tensor total_loss(const Tensor& l_src, const Tensor& l_wfd, const Tensor& l_wrd,
                  const Tensor& l_ed, const DistillConfig& cfg, double ramp);

}  // namespace seldist
