#include <cmath>

#include "seldist/ops.hpp"

namespace seldist {

namespace {

// Direct bilinear lookup at continuous point (x, y) with pixel centers at
// integer+0.5 and replicate-border clamping to [0, dim-1] in center space.
double bilinear_at(const double* plane, int h, int w, double x, double y) {
  double gy = y - 0.5;
  double gx = x - 0.5;
  if (gy < 0.0) gy = 0.0;
  if (gy > double(h - 1)) gy = double(h - 1);
  if (gx < 0.0) gx = 0.0;
  if (gx > double(w - 1)) gx = double(w - 1);
  const int ylo = int(std::floor(gy));
  const int xlo = int(std::floor(gx));
  const int yhi = ylo + 1 < h ? ylo + 1 : h - 1;
  const int xhi = xlo + 1 < w ? xlo + 1 : w - 1;
  const double fy = gy - ylo;
  const double fx = gx - xlo;
  const double top = plane[ylo * w + xlo] * (1.0 - fx) + plane[ylo * w + xhi] * fx;
  const double bot = plane[yhi * w + xlo] * (1.0 - fx) + plane[yhi * w + xhi] * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace

// Test oracle: same written contract as roi_align, evaluated sample by sample
// with no precomputation and no tape involvement.
Tensor roi_align_oracle(const Tensor& feature, const Roi& roi, int out_h,
                        int out_w, int sampling_ratio) {
  if (feature.rank() != 3)
    throw ShapeError("roi_align_oracle: feature shape " +
                     shape_str(feature.shape()) + " is not (C,H,W)");
  if (out_h < 1 || out_w < 1)
    throw ValueError("roi_align_oracle: output size " + std::to_string(out_h) +
                     "x" + std::to_string(out_w) + " invalid");
  if (sampling_ratio < 1)
    throw ValueError("roi_align_oracle: sampling_ratio " +
                     std::to_string(sampling_ratio) + " < 1");

  const int c = feature.shape()[0];
  const int h = feature.shape()[1];
  const int w = feature.shape()[2];

  double rx0 = roi.x0, rx1 = roi.x1, ry0 = roi.y0, ry1 = roi.y1;
  if (rx1 - rx0 < MIN_ROI_EXTENT) {
    const double mid = 0.5 * (rx0 + rx1);
    rx0 = mid - 0.5 * MIN_ROI_EXTENT;
    rx1 = mid + 0.5 * MIN_ROI_EXTENT;
  }
  if (ry1 - ry0 < MIN_ROI_EXTENT) {
    const double mid = 0.5 * (ry0 + ry1);
    ry0 = mid - 0.5 * MIN_ROI_EXTENT;
    ry1 = mid + 0.5 * MIN_ROI_EXTENT;
  }
  const double bin_h = (ry1 - ry0) / double(out_h);
  const double bin_w = (rx1 - rx0) / double(out_w);
  const int r = sampling_ratio;

  Tensor out(Shape{c, out_h, out_w});
  std::vector<double>& od = out.mutable_data();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = feature.data().data() + std::size_t(ch) * h * w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (int sy = 0; sy < r; ++sy) {
          const double y = ry0 + (double(oy) + (double(sy) + 0.5) / double(r)) * bin_h;
          for (int sx = 0; sx < r; ++sx) {
            const double x =
                rx0 + (double(ox) + (double(sx) + 0.5) / double(r)) * bin_w;
            acc += bilinear_at(plane, h, w, x, y);
          }
        }
        od[(std::size_t(ch) * out_h + oy) * out_w + ox] = acc / double(r * r);
      }
    }
  }
  return out;
}

}  // namespace seldist
