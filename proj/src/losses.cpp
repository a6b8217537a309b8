#include "seldist/losses.hpp"

#include <cmath>

namespace seldist {

namespace {

// Bounding extents (rows, cols) of the set cells of a binary mask; false if
// the mask is empty.
bool mask_bounds(const Tensor& mask, int& h_i, int& w_i) {
  const int h = mask.shape()[0], w = mask.shape()[1];
  int y0 = h, y1 = -1, x0 = w, x1 = -1;
  const auto& md = mask.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (md[std::size_t(y) * w + x] != 0.0) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) return false;
  h_i = y1 - y0 + 1;
  w_i = x1 - x0 + 1;
  return true;
}

void check_pyramids(const char* op, const FeaturePyramid& teacher,
                    const FeaturePyramid& student) {
  if (teacher.size() != student.size())
    throw ShapeError(std::string(op) + ": " + std::to_string(teacher.size()) +
                     " teacher levels vs " + std::to_string(student.size()) +
                     " student levels");
  for (std::size_t l = 0; l < teacher.size(); ++l)
    if (teacher[l].shape() != student[l].shape())
      throw ShapeError(std::string(op) + ": level " + std::to_string(l) +
                       " shapes " + shape_str(teacher[l].shape()) + " and " +
                       shape_str(student[l].shape()) + " differ");
}

}  // namespace

Tensor sigma_from_head(const Tensor& uncert_raw, double sigma_min,
                       double sigma_max) {
  return exp(clamp(uncert_raw, std::log(sigma_min), std::log(sigma_max)));
}

Tensor depth_uncertainty_loss(const Tensor& z, const std::vector<double>& z_star,
                              const Tensor& sigma) {
  const std::size_t n = z_star.size();
  if (n == 0) return Tensor::scalar(0.0);
  if (z.size() != n || sigma.size() != n)
    throw ShapeError("depth_uncertainty_loss: z " + shape_str(z.shape()) +
                     ", sigma " + shape_str(sigma.shape()) + " for " +
                     std::to_string(n) + " objects");
  Tensor target(z.shape(), z_star);
  return mean(abs(z - target) / sigma + log(sigma));
}

std::vector<double> selective_weights(const std::vector<double>& sigma_s,
                                      const std::vector<double>& sigma_t,
                                      WeightScheme scheme, double omega_max) {
  const std::size_t n =
      scheme == WeightScheme::Teacher ? sigma_t.size() : sigma_s.size();
  if (scheme != WeightScheme::Student && scheme != WeightScheme::Uniform &&
      sigma_t.size() != n)
    throw ShapeError("selective_weights: sigma sizes " +
                     std::to_string(sigma_s.size()) + " and " +
                     std::to_string(sigma_t.size()) + " differ");
  std::vector<double> w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 1.0;
    switch (scheme) {
      case WeightScheme::Student: v = sigma_s[i]; break;
      case WeightScheme::Teacher: v = std::max(0.0, 1.0 - sigma_t[i]); break;
      case WeightScheme::Sum:
        v = sigma_s[i] + std::max(0.0, 1.0 - sigma_t[i]);
        break;
      case WeightScheme::Multiply:
        v = sigma_s[i] * std::max(0.0, 1.0 - sigma_t[i]);
        break;
      case WeightScheme::Uniform: v = 1.0; break;
    }
    w[i] = std::clamp(v, 0.0, omega_max);
  }
  return w;
}

Tensor general_feature_distillation(const FeaturePyramid& teacher,
                                    const FeaturePyramid& student) {
  check_pyramids("general_feature_distillation", teacher, student);
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    Tensor diff = detach(teacher[l]) - student[l];
    acc = acc + mean(diff * diff);
  }
  return acc;
}

Tensor dasfd_loss(const FeaturePyramid& teacher, const FeaturePyramid& student,
                  const ObjectBatch& batch, const std::vector<double>& omega) {
  check_pyramids("dasfd_loss", teacher, student);
  if (omega.size() != batch.objects.size())
    throw ShapeError("dasfd_loss: " + std::to_string(omega.size()) +
                     " weights for " + std::to_string(batch.objects.size()) +
                     " objects");
  Tensor acc = Tensor::scalar(0.0);
  if (batch.objects.empty()) return acc;
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    const int c = teacher[l].shape()[0];
    Tensor diff = detach(teacher[l]) - student[l];
    Tensor sq = diff * diff;
    for (std::size_t i = 0; i < batch.objects.size(); ++i) {
      if (omega[i] == 0.0) continue;
      const Tensor& mask = batch.objects[i].masks[l];
      if (mask.shape()[0] != teacher[l].shape()[1] ||
          mask.shape()[1] != teacher[l].shape()[2])
        throw ShapeError("dasfd_loss: mask " + shape_str(mask.shape()) +
                         " vs level " + shape_str(teacher[l].shape()));
      int h_i = 0, w_i = 0;
      if (!mask_bounds(mask, h_i, w_i)) continue;
      // sum(sq·M) = Σ_c Σ_{mask}; dividing by c gives Σ_{mask} mean_channels.
      acc = acc + sum(sq * mask) * (omega[i] / (double(h_i) * w_i * c));
    }
  }
  return acc;
}

Tensor pairwise_relation(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("pairwise_relation: shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
  Tensor diff = a - b;
  return mean(diff * diff);
}

RelationMatrix relation_matrix(const FeaturePyramid& features,
                               const std::vector<std::vector<Roi>>& rois,
                               const Tensor& sigma, const DistillConfig& cfg,
                               bool detach_all) {
  RelationMatrix out;
  out.n = int(rois.size());
  if (out.n < 2) return out;
  if (sigma.size() != std::size_t(out.n))
    throw ShapeError("relation_matrix: sigma " + shape_str(sigma.shape()) +
                     " for " + std::to_string(out.n) + " objects");

  const std::size_t levels = features.size();
  // Crop every object once per level.
  std::vector<std::vector<Tensor>> crops(out.n);
  for (int i = 0; i < out.n; ++i) {
    if (rois[i].size() != levels)
      throw ShapeError("relation_matrix: object " + std::to_string(i) +
                       " has " + std::to_string(rois[i].size()) +
                       " rois for " + std::to_string(levels) + " levels");
    for (std::size_t l = 0; l < levels; ++l) {
      Tensor src = detach_all ? detach(features[l]) : features[l];
      crops[i].push_back(
          roi_align(src, rois[i][l], cfg.roi_out, cfg.roi_out, cfg.sampling_ratio));
    }
  }
  Tensor sig = (detach_all || cfg.detach_sigma_in_relation) ? detach(sigma) : sigma;

  out.d.resize(std::size_t(out.n) * out.n);
  for (int i = 0; i < out.n; ++i) {
    Tensor s_i = slice(sig, {i}, {i + 1});
    for (int j = i; j < out.n; ++j) {
      Tensor s_j = slice(sig, {j}, {j + 1});
      Tensor denom = s_i * s_i + s_j * s_j;
      Tensor entry = Tensor::scalar(0.0);
      for (std::size_t l = 0; l < levels; ++l)
        entry = entry + pairwise_relation(crops[i][l], crops[j][l]) / denom +
                log(denom);
      out.d[std::size_t(i) * out.n + j] = entry;
      out.d[std::size_t(j) * out.n + i] = entry;
    }
  }
  return out;
}

Tensor general_relation_distillation(const FeaturePyramid& teacher,
                                     const FeaturePyramid& student,
                                     const std::vector<std::vector<Roi>>& rois,
                                     const DistillConfig& cfg) {
  check_pyramids("general_relation_distillation", teacher, student);
  const int n = int(rois.size());
  Tensor acc = Tensor::scalar(0.0);
  if (n < 2) return acc;
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    std::vector<Tensor> tcrop(n), scrop(n);
    Tensor tdet = detach(teacher[l]);
    for (int i = 0; i < n; ++i) {
      tcrop[i] = roi_align(tdet, rois[i][l], cfg.roi_out, cfg.roi_out,
                           cfg.sampling_ratio);
      scrop[i] = roi_align(student[l], rois[i][l], cfg.roi_out, cfg.roi_out,
                           cfg.sampling_ratio);
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        acc = acc + abs(pairwise_relation(tcrop[i], tcrop[j]) -
                        pairwise_relation(scrop[i], scrop[j]));
  }
  return acc;
}

Tensor dasrd_loss(const RelationMatrix& dt, const RelationMatrix& ds) {
  if (dt.n != ds.n)
    throw ShapeError("dasrd_loss: matrices " + std::to_string(dt.n) + " vs " +
                     std::to_string(ds.n) + " objects");
  Tensor acc = Tensor::scalar(0.0);
  if (dt.n < 2) return acc;
  for (int i = 0; i < dt.n; ++i)
    for (int j = 0; j < dt.n; ++j)
      acc = acc + abs(detach(dt.at(i, j)) - ds.at(i, j));
  return acc;
}

Tensor response_distillation(const HeadBundle& teacher, const HeadBundle& student,
                             const Tensor* foreground) {
  const auto th = teacher.all();
  const auto sh = student.all();
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < th.size(); ++k) {
    if (th[k]->shape() != sh[k]->shape())
      throw ShapeError("response_distillation: head " + std::to_string(k) +
                       " shapes " + shape_str(th[k]->shape()) + " and " +
                       shape_str(sh[k]->shape()) + " differ");
    Tensor d = abs(detach(*th[k]) - *sh[k]);
    if (foreground) {
      double cells = 0.0;
      for (double v : foreground->data()) cells += v;
      if (cells == 0.0) continue;
      const double c = th[k]->shape()[0];
      acc = acc + sum(d * *foreground) / (cells * c);
    } else {
      acc = acc + mean(d);
    }
  }
  return acc / double(th.size());
}

double warmup_ramp(int epoch, int warmup_epochs) {
  if (warmup_epochs <= 0) return 1.0;
  return std::min(1.0, double(epoch) / double(warmup_epochs));
}

Tensor total_loss(const Tensor& l_src, const Tensor& l_wfd, const Tensor& l_wrd,
                  const Tensor& l_ed, const DistillConfig& cfg, double ramp) {
  const struct { const char* name; const Tensor* t; } terms[] = {
      {"L_src", &l_src}, {"L_wfd", &l_wfd}, {"L_wrd", &l_wrd}, {"L_ed", &l_ed}};
  for (const auto& term : terms)
    if (!std::isfinite(term.t->value()))
      throw NumericError(std::string("total_loss: non-finite ") + term.name);
  return l_src + (l_wfd * cfg.lambda1 + l_wrd * cfg.lambda2 +
                  l_ed * cfg.lambda3) * ramp;
}

}  // namespace seldist
