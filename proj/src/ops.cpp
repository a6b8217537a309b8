#include "seldist/ops.hpp"

#include <algorithm>
#include <cmath>

namespace seldist {

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

// Result shape for elementwise ops: exact match, scalar, or trailing-suffix
// tiling. Pairing rule downstream: element i of the result reads operand
// element i % operand_size, which is exact for all three accepted layouts.
Shape bcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  if (a.size() == 1) return b.shape();
  if (b.size() == 1) return a.shape();
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()) + " do not conform");
}

template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 DA dfda, DB dfdb) {
  Shape os = bcast_shape(name, a, b);
  const std::size_t nout = shape_size(os), na = a.size(), nb = b.size();
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(nout);
  for (std::size_t i = 0; i < nout; ++i) out[i] = f(ad[i % na], bd[i % nb]);
  Tensor r(os, std::move(out));

  const long ia = tape_node(a), ib = tape_node(b);
  Tape* tp = Tape::current();
  if (tp && (ia >= 0 || ib >= 0)) {
    Tensor as = a, bs = b;  // keep operand values alive for the sweep
    long id = tp->record(
        name, r.shape(), {ia, ib},
        [as, bs, ia, ib, nout, dfda, dfdb](const std::vector<double>& g,
                                           GradSink& sink) {
          const auto& ad = as.data();
          const auto& bd = bs.data();
          const std::size_t na = ad.size(), nb = bd.size();
          double* ga = ia >= 0 ? sink.acc(ia, na) : nullptr;
          double* gb = ib >= 0 ? sink.acc(ib, nb) : nullptr;
          for (std::size_t i = 0; i < nout; ++i) {
            const double av = ad[i % na], bv = bd[i % nb];
            if (ga) ga[i % na] += g[i] * dfda(av, bv);
            if (gb) gb[i % nb] += g[i] * dfdb(av, bv);
          }
        });
    tp->tag(r, id);
  }
  return r;
}

template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  Tensor r(x.shape(), std::move(out));

  const long ix = tape_node(x);
  Tape* tp = Tape::current();
  if (tp && ix >= 0) {
    Tensor xs = x;
    long id = tp->record(
        name, r.shape(), {ix},
        [xs, ix, df](const std::vector<double>& g, GradSink& sink) {
          const auto& xd = xs.data();
          double* gx = sink.acc(ix, xd.size());
          for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += g[i] * df(xd[i]);
        });
    tp->tag(r, id);
  }
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0) throw ValueError("div: division by zero");
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (v <= 0.0)
      throw ValueError("log: non-positive operand " + std::to_string(v));
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double v) { return std::exp(v); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi))
    throw ValueError("clamp: lo " + std::to_string(lo) + " exceeds hi " +
                     std::to_string(hi));
  return unary_op(
      "clamp", x,
      [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor detach(const Tensor& x) { return x.constant_view(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(std::size_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = ad[std::size_t(i) * k + p];
      const double* brow = &bd[std::size_t(p) * n];
      double* orow = &out[std::size_t(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  Tensor r(Shape{m, n}, std::move(out));

  const long ia = tape_node(a), ib = tape_node(b);
  Tape* tp = Tape::current();
  if (tp && (ia >= 0 || ib >= 0)) {
    Tensor as = a, bs = b;
    long id = tp->record(
        "matmul", r.shape(), {ia, ib},
        [as, bs, ia, ib, m, k, n](const std::vector<double>& g,
                                  GradSink& sink) {
          const auto& ad = as.data();
          const auto& bd = bs.data();
          if (ia >= 0) {
            double* ga = sink.acc(ia, ad.size());
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                const double gv = g[std::size_t(i) * n + j];
                for (int p = 0; p < k; ++p)
                  ga[std::size_t(i) * k + p] += gv * bd[std::size_t(p) * n + j];
              }
          }
          if (ib >= 0) {
            double* gb = sink.acc(ib, bd.size());
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) {
                const double av = ad[std::size_t(i) * k + p];
                for (int j = 0; j < n; ++j)
                  gb[std::size_t(p) * n + j] += av * g[std::size_t(i) * n + j];
              }
          }
        });
    tp->tag(r, id);
  }
  return r;
}

namespace {

Tensor conv2d_impl(const Tensor& input, const Tensor& weight,
                   const Tensor* bias, int stride, int pad) {
  if (input.rank() != 3)
    throw ShapeError("conv2d: input shape " + shape_str(input.shape()) +
                     " is not (C,H,W)");
  if (weight.rank() != 4 || weight.shape()[2] != weight.shape()[3])
    throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) +
                     " is not (Co,Ci,k,k)");
  const int ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int co = weight.shape()[0], k = weight.shape()[2];
  if (weight.shape()[1] != ci)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) +
                     " does not match input channels " + std::to_string(ci));
  if (k > 5) throw ValueError("conv2d: kernel size " + std::to_string(k) + " exceeds 5");
  if (stride != 1 && stride != 2)
    throw ValueError("conv2d: stride " + std::to_string(stride) + " not in {1,2}");
  if (pad < 0) throw ValueError("conv2d: negative padding");
  if (bias && (bias->rank() != 1 || bias->shape()[0] != co))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) +
                     " is not (" + std::to_string(co) + ")");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  if (h + 2 * pad < k || w + 2 * pad < k || oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(k) +
                     " does not fit input " + shape_str(input.shape()) +
                     " with pad " + std::to_string(pad));

  const auto& in = input.data();
  const auto& wt = weight.data();
  std::vector<double> out(std::size_t(co) * oh * ow, 0.0);
  if (bias) {
    const auto& bd = bias->data();
    for (int c = 0; c < co; ++c)
      std::fill_n(&out[std::size_t(c) * oh * ow], std::size_t(oh) * ow, bd[c]);
  }
  for (int c = 0; c < co; ++c) {
    double* oc = &out[std::size_t(c) * oh * ow];
    for (int ic = 0; ic < ci; ++ic) {
      const double* icd = &in[std::size_t(ic) * h * w];
      const double* wc = &wt[(std::size_t(c) * ci + ic) * k * k];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wv = wc[ky * k + kx];
          if (wv == 0.0) continue;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const double* irow = &icd[std::size_t(iy) * w];
            double* orow = &oc[std::size_t(oy) * ow];
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < w) orow[ox] += wv * irow[ix];
            }
          }
        }
    }
  }
  Tensor r(Shape{co, oh, ow}, std::move(out));

  const long ii = tape_node(input), iw = tape_node(weight);
  const long ib = bias ? tape_node(*bias) : -1;
  Tape* tp = Tape::current();
  if (tp && (ii >= 0 || iw >= 0 || ib >= 0)) {
    Tensor is = input, ws = weight;
    long id = tp->record(
        "conv2d", r.shape(), {ii, iw, ib},
        [is, ws, ii, iw, ib, ci, h, w, co, k, oh, ow, stride,
         pad](const std::vector<double>& g, GradSink& sink) {
          const auto& in = is.data();
          const auto& wt = ws.data();
          double* gin = ii >= 0 ? sink.acc(ii, in.size()) : nullptr;
          double* gwt = iw >= 0 ? sink.acc(iw, wt.size()) : nullptr;
          double* gb = ib >= 0 ? sink.acc(ib, std::size_t(co)) : nullptr;
          for (int c = 0; c < co; ++c) {
            const double* gc = &g[std::size_t(c) * oh * ow];
            if (gb)
              for (int i = 0; i < oh * ow; ++i) gb[c] += gc[i];
            for (int ic = 0; ic < ci; ++ic) {
              const double* icd = &in[std::size_t(ic) * h * w];
              double* gicd = gin ? &gin[std::size_t(ic) * h * w] : nullptr;
              const double* wc = &wt[(std::size_t(c) * ci + ic) * k * k];
              double* gwc =
                  gwt ? &gwt[(std::size_t(c) * ci + ic) * k * k] : nullptr;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const double wv = wc[ky * k + kx];
                  double wacc = 0.0;
                  for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* irow = &icd[std::size_t(iy) * w];
                    double* girow =
                        gicd ? &gicd[std::size_t(iy) * w] : nullptr;
                    const double* grow = &gc[std::size_t(oy) * ow];
                    for (int ox = 0; ox < ow; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= w) continue;
                      if (girow) girow[ix] += wv * grow[ox];
                      wacc += irow[ix] * grow[ox];
                    }
                  }
                  if (gwc) gwc[ky * k + kx] += wacc;
                }
            }
          }
        });
    tp->tag(r, id);
  }
  return r;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
  return conv2d_impl(input, weight, &bias, stride, pad);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad) {
  return conv2d_impl(input, weight, nullptr, stride, pad);
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor r = Tensor::scalar(s);
  const long ix = tape_node(x);
  Tape* tp = Tape::current();
  if (tp && ix >= 0) {
    const std::size_t n = x.size();
    long id = tp->record("sum", r.shape(), {ix},
                         [ix, n](const std::vector<double>& g, GradSink& sink) {
                           double* gx = sink.acc(ix, n);
                           for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                         });
    tp->tag(r, id);
  }
  return r;
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.size();
  Tensor r = Tensor::scalar(s / double(n));
  const long ix = tape_node(x);
  Tape* tp = Tape::current();
  if (tp && ix >= 0) {
    long id = tp->record("mean", r.shape(), {ix},
                         [ix, n](const std::vector<double>& g, GradSink& sink) {
                           double* gx = sink.acc(ix, n);
                           const double gv = g[0] / double(n);
                           for (std::size_t i = 0; i < n; ++i) gx[i] += gv;
                         });
    tp->tag(r, id);
  }
  return r;
}

Tensor reshape(const Tensor& x, const Shape& new_shape) {
  if (shape_size(new_shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " +
                     shape_str(new_shape) + " changes element count");
  Tensor r(new_shape, x.data());
  const long ix = tape_node(x);
  Tape* tp = Tape::current();
  if (tp && ix >= 0) {
    const std::size_t n = x.size();
    long id = tp->record("reshape", r.shape(), {ix},
                         [ix, n](const std::vector<double>& g, GradSink& sink) {
                           double* gx = sink.acc(ix, n);
                           for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
                         });
    tp->tag(r, id);
  }
  return r;
}

Tensor slice(const Tensor& x, const std::vector<int>& starts,
             const std::vector<int>& stops) {
  const int rank = x.rank();
  if (int(starts.size()) != rank || int(stops.size()) != rank)
    throw ShapeError("slice: got " + std::to_string(starts.size()) + "/" +
                     std::to_string(stops.size()) + " bounds for rank " +
                     std::to_string(rank));
  Shape os(rank);
  for (int d = 0; d < rank; ++d) {
    if (starts[d] < 0 || stops[d] > x.shape()[d] || starts[d] >= stops[d])
      throw ShapeError("slice: range [" + std::to_string(starts[d]) + "," +
                       std::to_string(stops[d]) + ") invalid for extent " +
                       std::to_string(x.shape()[d]));
    os[d] = stops[d] - starts[d];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (int d = rank - 2; d >= 0; --d)
    in_stride[d] = in_stride[d + 1] * std::size_t(x.shape()[d + 1]);
  const std::size_t nout = shape_size(os);
  // Flat output index -> flat input index, via the odometer of os.
  auto idx_map = std::make_shared<std::vector<std::size_t>>(nout);
  for (std::size_t i = 0; i < nout; ++i) {
    std::size_t flat = i, off = 0;
    for (int d = rank - 1; d >= 0; --d) {
      const std::size_t e = std::size_t(os[d]);
      off += (flat % e + std::size_t(starts[d])) * in_stride[d];
      flat /= e;
    }
    (*idx_map)[i] = off;
  }
  const auto& xd = x.data();
  std::vector<double> out(nout);
  for (std::size_t i = 0; i < nout; ++i) out[i] = xd[(*idx_map)[i]];
  Tensor r(os, std::move(out));

  const long ix = tape_node(x);
  Tape* tp = Tape::current();
  if (tp && ix >= 0) {
    const std::size_t n = x.size();
    long id = tp->record(
        "slice", r.shape(), {ix},
        [ix, n, nout, idx_map](const std::vector<double>& g, GradSink& sink) {
          double* gx = sink.acc(ix, n);
          for (std::size_t i = 0; i < nout; ++i) gx[(*idx_map)[i]] += g[i];
        });
    tp->tag(r, id);
  }
  return r;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  Shape os = xs[0].shape();
  for (std::size_t t = 1; t < xs.size(); ++t) {
    if (xs[t].rank() != rank)
      throw ShapeError("concat: mixed ranks " + shape_str(xs[0].shape()) +
                       " and " + shape_str(xs[t].shape()));
    for (int d = 0; d < rank; ++d)
      if (d != axis && xs[t].shape()[d] != os[d])
        throw ShapeError("concat: shapes " + shape_str(xs[0].shape()) +
                         " and " + shape_str(xs[t].shape()) +
                         " differ off axis " + std::to_string(axis));
    os[axis] += xs[t].shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= std::size_t(os[d]);
  for (int d = axis + 1; d < rank; ++d) inner *= std::size_t(os[d]);
  const std::size_t out_row = std::size_t(os[axis]) * inner;

  std::vector<double> out(shape_size(os));
  std::size_t col_off = 0;
  for (const Tensor& t : xs) {
    const std::size_t trow = std::size_t(t.shape()[axis]) * inner;
    const auto& td = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&td[o * trow], trow, &out[o * out_row + col_off]);
    col_off += trow;
  }
  Tensor r(os, std::move(out));

  Tape* tp = Tape::current();
  std::vector<long> ids(xs.size());
  bool any = false;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    ids[t] = tape_node(xs[t]);
    any = any || ids[t] >= 0;
  }
  if (tp && any) {
    std::vector<std::size_t> sizes(xs.size()), rows(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) {
      sizes[t] = xs[t].size();
      rows[t] = std::size_t(xs[t].shape()[axis]) * inner;
    }
    long id = tp->record(
        "concat", r.shape(), ids,
        [ids, sizes, rows, outer, out_row](const std::vector<double>& g,
                                           GradSink& sink) {
          std::size_t col_off = 0;
          for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] >= 0) {
              double* gx = sink.acc(ids[t], sizes[t]);
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < rows[t]; ++i)
                  gx[o * rows[t] + i] += g[o * out_row + col_off + i];
            }
            col_off += rows[t];
          }
        });
    tp->tag(r, id);
  }
  return r;
}

// ROIAlign contract (the oracle implements the identical text independently):
//  - roi extents below MIN_ROI_EXTENT are expanded to it about their center;
//  - bin (oy,ox) spans [y0+oy*bh, y0+(oy+1)*bh) x [x0+ox*bw, x0+(ox+1)*bw)
//    with bh=(y1-y0)/out_h, bw=(x1-x0)/out_w;
//  - sample point (sy,sx in 0..r-1): y = y0+(oy+(sy+0.5)/r)*bh, x likewise;
//  - bilinear lookup at (x,y): gy = min(max(y-0.5, 0), H-1), gx likewise;
//    y0i = floor(gy), y1i = min(y0i+1, H-1), ty = gy-y0i (same for x);
//    value = (1-ty)(1-tx)F[y0i][x0i] + (1-ty)tx F[y0i][x1i]
//          + ty(1-tx)F[y1i][x0i] + ty tx F[y1i][x1i];
//  - output cell = mean of the r^2 samples.
Tensor roi_align(const Tensor& feature, const Roi& roi, int out_h, int out_w,
                 int sampling_ratio) {
  if (feature.rank() != 3)
    throw ShapeError("roi_align: feature shape " + shape_str(feature.shape()) +
                     " is not (C,H,W)");
  if (out_h < 1 || out_w < 1)
    throw ValueError("roi_align: output size " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " invalid");
  if (sampling_ratio < 1)
    throw ValueError("roi_align: sampling_ratio " +
                     std::to_string(sampling_ratio) + " < 1");
  const int c = feature.shape()[0], h = feature.shape()[1],
            w = feature.shape()[2];
  const int r = sampling_ratio;

  double x0 = roi.x0, x1 = roi.x1, y0 = roi.y0, y1 = roi.y1;
  if (x1 - x0 < MIN_ROI_EXTENT) {
    const double cx = 0.5 * (x0 + x1);
    x0 = cx - 0.5 * MIN_ROI_EXTENT;
    x1 = cx + 0.5 * MIN_ROI_EXTENT;
  }
  if (y1 - y0 < MIN_ROI_EXTENT) {
    const double cy = 0.5 * (y0 + y1);
    y0 = cy - 0.5 * MIN_ROI_EXTENT;
    y1 = cy + 0.5 * MIN_ROI_EXTENT;
  }
  const double bh = (y1 - y0) / out_h, bw = (x1 - x0) / out_w;

  // Precompute the sample support (4 corner indices + weights per sample);
  // channels reuse it in both passes.
  struct Support {
    int i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  auto supports = std::make_shared<std::vector<Support>>();
  supports->reserve(std::size_t(out_h) * out_w * r * r);
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      for (int sy = 0; sy < r; ++sy)
        for (int sx = 0; sx < r; ++sx) {
          const double y = y0 + (oy + (sy + 0.5) / r) * bh;
          const double x = x0 + (ox + (sx + 0.5) / r) * bw;
          const double gy = std::min(std::max(y - 0.5, 0.0), double(h - 1));
          const double gx = std::min(std::max(x - 0.5, 0.0), double(w - 1));
          const int y0i = int(std::floor(gy));
          const int x0i = int(std::floor(gx));
          const int y1i = std::min(y0i + 1, h - 1);
          const int x1i = std::min(x0i + 1, w - 1);
          const double ty = gy - y0i, tx = gx - x0i;
          supports->push_back(Support{
              y0i * w + x0i, y0i * w + x1i, y1i * w + x0i, y1i * w + x1i,
              (1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx});
        }

  const auto& fd = feature.data();
  const int per_cell = r * r;
  const double inv = 1.0 / per_cell;
  std::vector<double> out(std::size_t(c) * out_h * out_w, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double* f = &fd[std::size_t(ch) * h * w];
    double* oc = &out[std::size_t(ch) * out_h * out_w];
    std::size_t s = 0;
    for (int cell = 0; cell < out_h * out_w; ++cell) {
      double acc = 0.0;
      for (int k = 0; k < per_cell; ++k, ++s) {
        const Support& sp = (*supports)[s];
        acc += sp.w00 * f[sp.i00] + sp.w01 * f[sp.i01] + sp.w10 * f[sp.i10] +
               sp.w11 * f[sp.i11];
      }
      oc[cell] = acc * inv;
    }
  }
  Tensor res(Shape{c, out_h, out_w}, std::move(out));

  const long ifeat = tape_node(feature);
  Tape* tp = Tape::current();
  if (tp && ifeat >= 0) {
    const std::size_t fsize = feature.size();
    long id = tp->record(
        "roi_align", res.shape(), {ifeat},
        [supports, ifeat, fsize, c, h, w, out_h, out_w, per_cell,
         inv](const std::vector<double>& g, GradSink& sink) {
          double* gf = sink.acc(ifeat, fsize);
          for (int ch = 0; ch < c; ++ch) {
            double* gfc = &gf[std::size_t(ch) * h * w];
            const double* gc = &g[std::size_t(ch) * out_h * out_w];
            std::size_t s = 0;
            for (int cell = 0; cell < out_h * out_w; ++cell) {
              const double gv = gc[cell] * inv;
              for (int k = 0; k < per_cell; ++k, ++s) {
                const Support& sp = (*supports)[s];
                gfc[sp.i00] += gv * sp.w00;
                gfc[sp.i01] += gv * sp.w01;
                gfc[sp.i10] += gv * sp.w10;
                gfc[sp.i11] += gv * sp.w11;
              }
            }
          }
        });
    tp->tag(res, id);
  }
  return res;
}

}  // namespace seldist
