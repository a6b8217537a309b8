#pragma once

#include <vector>

#include "seldist/tensor.hpp"

namespace seldist {

// Region of interest in continuous feature-level coordinates (pixel (0,0)
// spans [0,1)x[0,1), its center sits at 0.5).
struct Roi {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  int level = 0;
};

// Elementwise binary ops. Shapes must match exactly, or one operand must be a
// scalar or a trailing-suffix shape of the other (e.g. (H,W) against (C,H,W)),
// in which case it is tiled along the leading extents.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // any zero divisor → ValueError

Tensor abs(const Tensor& x);  // subgradient 0 at 0
Tensor log(const Tensor& x);  // any non-positive element → ValueError
Tensor exp(const Tensor& x);
Tensor relu(const Tensor& x);

// Gradient 1 inside [lo, hi] (boundary included), 0 outside.
Tensor clamp(const Tensor& x, double lo, double hi);

// Value-equal constant cut off from gradient flow.
Tensor detach(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)

// input (Ci,H,W), weight (Co,Ci,k,k) with square k ≤ 5, optional bias (Co),
// stride in {1,2}, zero padding pad ≥ 0.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad);

Tensor sum(const Tensor& x);   // full reduction to scalar
Tensor mean(const Tensor& x);  // full reduction to scalar

Tensor reshape(const Tensor& x, const Shape& new_shape);

// Per-dimension half-open ranges [start, stop).
Tensor slice(const Tensor& x, const std::vector<int>& starts,
             const std::vector<int>& stops);

Tensor concat(const std::vector<Tensor>& xs, int axis);

// Averaged bilinear sampling of a (C,H,W) feature map over a roi grid of
// out_h x out_w cells with sampling_ratio^2 regular sub-cell centers each.
// Sample coordinates are clamped to [0, dim-1] in center space (replicate
// border); a roi collapsed below MIN_ROI_EXTENT is re-centered to that
// extent. Differentiable w.r.t. feature.
inline constexpr double MIN_ROI_EXTENT = 1e-6;
Tensor roi_align(const Tensor& feature, const Roi& roi, int out_h, int out_w,
                 int sampling_ratio);

// Independent re-implementation of the same contract for testing; shares no
// code with roi_align and does not record on the tape.
Tensor roi_align_oracle(const Tensor& feature, const Roi& roi, int out_h,
                        int out_w, int sampling_ratio);

// Convenience scalar forms.
inline Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor div(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, b); }
inline Tensor operator+(double a, const Tensor& b) { return add(b, a); }
inline Tensor operator-(double a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator/(double a, const Tensor& b) { return div(a, b); }

}  // namespace seldist
