#include "seldist/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "seldist/adam.hpp"
#include "seldist/errors.hpp"
#include "seldist/ops.hpp"

namespace seldist {

namespace fs = std::filesystem;

void validate(const TrainConfig& cfg) {
  if (cfg.toggles.dasfd && cfg.toggles.general_fd)
    throw ConfigError("validate: dasfd and general_fd are mutually exclusive");
  if (cfg.toggles.dasrd && cfg.toggles.general_rd)
    throw ConfigError("validate: dasrd and general_rd are mutually exclusive");
  if (cfg.epochs < 0) throw ConfigError("validate: epochs must be >= 0");
  if (cfg.batch < 1) throw ConfigError("validate: batch must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("validate: lr must be > 0");
  if (cfg.distill.warmup_epochs < 0)
    throw ConfigError("validate: warmup must be >= 0");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string format_opt(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

namespace {

// Frozen per-scene teacher context, computed once per run.
struct TeacherCtx {
  FeaturePyramid feats;
  HeadBundle heads;
  std::vector<double> sigma_cells;  // per object, at its GT center cell
  RelationMatrix relations;         // detached, present only under dasrd
};

struct SceneCtx {
  Tensor input;
  ObjectBatch batch;
  std::vector<std::vector<Roi>> rois;
  TeacherCtx teacher;
};

std::vector<double> sigma_at_cells(const Tensor& sigma_map,
                                   const ObjectBatch& batch) {
  std::vector<double> out;
  const int w = sigma_map.shape()[2];
  for (const auto& o : batch.objects)
    out.push_back(sigma_map.data()[std::size_t(o.cy) * w + o.cx]);
  return out;
}

// Per-object sigma as a connected {n} tensor so the relation matrix keeps the
// student's uncertainty path differentiable.
Tensor sigma_vec(const Tensor& sigma_map, const ObjectBatch& batch) {
  std::vector<Tensor> parts;
  for (const auto& o : batch.objects)
    parts.push_back(reshape(
        slice(sigma_map, {0, o.cy, o.cx}, {1, o.cy + 1, o.cx + 1}), {1}));
  return concat(parts, 0);
}

void shuffle(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.below(i)]);
}

struct StepTerms {
  double l_src = 0, l_wfd = 0, l_wrd = 0, l_ed = 0, total = 0;
};

std::string log_header() {
  return "epoch,step,l_src,l_wfd,l_wrd,l_ed,ramp,total\n";
}

void log_row(std::string& csv, int epoch, long step, const StepTerms& t,
             double ramp) {
  csv += std::to_string(epoch) + "," + std::to_string(step) + "," +
         format_double(t.l_src) + "," + format_double(t.l_wfd) + "," +
         format_double(t.l_wrd) + "," + format_double(t.l_ed) + "," +
         format_double(ramp) + "," + format_double(t.total) + "\n";
}

// One training step over a batch of scenes: per-scene backward passes with
// gradients averaged across the batch. `forward` returns the scalar total for
// one scene and fills `terms` with the unweighted term values.
template <typename Forward>
void run_epochs(int epochs, int batch_size, const std::vector<Scene>& train,
                std::vector<Tensor*>& params, const TrainConfig& cfg,
                Forward&& forward, std::string& csv) {
  AdamState state;
  Rng order_rng(derive_seed(cfg.seed, 4));
  std::vector<int> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double ramp = warmup_ramp(epoch, cfg.distill.warmup_epochs);
    // Cosine decay to 2.5% of the base rate: the tail steps shrink the
    // optimizer's noise ball, which otherwise pins the depth error well
    // above what the features support.
    const double lr =
        cfg.lr * (0.025 + 0.975 * 0.5 *
                              (1.0 + std::cos(M_PI * double(epoch) /
                                              double(std::max(1, epochs)))));
    shuffle(idx, order_rng);
    for (std::size_t b = 0; b < idx.size(); b += std::size_t(batch_size)) {
      const std::size_t end = std::min(idx.size(), b + std::size_t(batch_size));
      const double inv = 1.0 / double(end - b);
      std::vector<std::vector<double>> acc(params.size());
      for (std::size_t p = 0; p < params.size(); ++p)
        acc[p].assign(params[p]->size(), 0.0);
      StepTerms mean;
      for (std::size_t k = b; k < end; ++k) {
        try {
          Tape tape;
          for (Tensor* p : params) tape.watch(*p);
          StepTerms terms;
          Tensor total = forward(idx[k], ramp, terms);
          GradTable g = tape.backward(total);
          for (std::size_t p = 0; p < params.size(); ++p) {
            const Tensor& gr = g.at(*params[p]);
            for (std::size_t j = 0; j < acc[p].size(); ++j)
              acc[p][j] += inv * gr.data()[j];
          }
          mean.l_src += inv * terms.l_src;
          mean.l_wfd += inv * terms.l_wfd;
          mean.l_wrd += inv * terms.l_wrd;
          mean.l_ed += inv * terms.l_ed;
          mean.total += inv * terms.total;
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step) + ": " + e.what());
        }
      }
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (std::size_t p = 0; p < params.size(); ++p)
        grads.emplace_back(params[p]->shape(), acc[p]);
      try {
        adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + ": " + e.what());
      }
      log_row(csv, epoch, step, mean, ramp);
      ++step;
    }
  }
}

std::vector<SceneCtx> build_contexts(const std::vector<Scene>& train,
                                     bool student_view,
                                     const DetectorParams* teacher,
                                     const TrainConfig& cfg) {
  const Toggles& tg = cfg.toggles;
  const bool need_teacher =
      tg.dasfd || tg.dasrd || tg.general_fd || tg.general_rd || tg.response;
  std::vector<SceneCtx> ctx;
  ctx.reserve(train.size());
  for (const Scene& s : train) {
    SceneCtx c;
    c.input = student_view ? student_input(s) : teacher_input(s);
    c.batch = make_object_batch(s, cfg.distill.levels);
    for (const auto& o : c.batch.objects) c.rois.push_back(o.rois);
    if (need_teacher && teacher != nullptr) {
      c.teacher.feats = backbone_forward(teacher_input(s), *teacher);
      c.teacher.heads = heads_forward(c.teacher.feats[0], *teacher);
      Tensor sig_map = sigma_from_head(c.teacher.heads.uncert_raw,
                                       cfg.distill.sigma_min,
                                       cfg.distill.sigma_max);
      c.teacher.sigma_cells = sigma_at_cells(sig_map, c.batch);
      if (tg.dasrd)
        c.teacher.relations = relation_matrix(
            c.teacher.feats, c.rois, sigma_vec(sig_map, c.batch), cfg.distill,
            /*detach_all=*/true);
    }
    ctx.push_back(std::move(c));
  }
  return ctx;
}

std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int thread_count() {
  const char* env = std::getenv("MSTL_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_text: cannot open " + path.string());
  out.write(text.data(), std::streamsize(text.size()));
  if (!out) throw IoError("write_text: short write to " + path.string());
}

}  // namespace

TeacherResult train_teacher_core(const std::vector<Scene>& train,
                                 const TrainConfig& cfg) {
  validate(cfg);
  if (train.empty()) throw ValueError("train_teacher: empty training split");
  DetectorParams det = make_detector(1, derive_seed(cfg.seed, 1));
  TrainConfig plain = cfg;
  plain.toggles = Toggles{};
  std::vector<SceneCtx> ctx = build_contexts(train, false, nullptr, plain);
  std::vector<Tensor*> params = param_ptrs(det.t);

  TeacherResult res;
  res.log_csv = log_header();
  run_epochs(cfg.epochs, cfg.batch, train, params, cfg,
             [&](int i, double, StepTerms& terms) {
               Tensor l_src =
                   detection_loss(heads_forward(
                                      backbone_forward(ctx[i].input, det)[0],
                                      det),
                                  ctx[i].batch);
               terms.l_src = l_src.value();
               terms.total = terms.l_src;
               return l_src;
             },
             res.log_csv);

  EvalConfig ev;
  ev.levels = cfg.distill.levels;
  EvalReport rep = evaluate_core(det.t, train, "train", ev);
  res.train_depth_mae =
      rep.depth_mae.value_or(std::numeric_limits<double>::quiet_NaN());
  res.params = std::move(det.t);
  return res;
}

DistillResult distill_student_core(const std::vector<Scene>& train,
                                   const ParamMap& teacher,
                                   const TrainConfig& cfg) {
  validate(cfg);
  if (train.empty()) throw ValueError("distill_student: empty training split");
  const std::uint64_t teacher_hash_before = params_hash(teacher);
  DetectorParams tdet{teacher};
  DetectorParams sdet = make_detector(3, derive_seed(cfg.seed, 2));
  AdapterParams adapter = make_adapter(derive_seed(cfg.seed, 3));
  check_compatible(tdet, sdet);

  const Toggles& tg = cfg.toggles;
  const bool need_adapter =
      tg.dasfd || tg.general_fd || tg.dasrd || tg.general_rd;
  std::vector<SceneCtx> ctx = build_contexts(train, true, &tdet, cfg);

  std::vector<Tensor*> params = param_ptrs(sdet.t);
  for (Tensor* p : param_ptrs(adapter.t)) params.push_back(p);

  DistillResult res;
  res.log_csv = log_header();
  run_epochs(
      cfg.epochs, cfg.batch, train, params, cfg,
      [&](int i, double ramp, StepTerms& terms) {
        const SceneCtx& c = ctx[i];
        FeaturePyramid sf = backbone_forward(c.input, sdet);
        HeadBundle sh = heads_forward(sf[0], sdet);
        Tensor l_src = detection_loss(sh, c.batch);
        Tensor l_wfd = Tensor::scalar(0.0);
        Tensor l_wrd = Tensor::scalar(0.0);
        Tensor l_ed = Tensor::scalar(0.0);
        FeaturePyramid af;
        if (need_adapter) af = adapter_forward(sf, adapter);
        Tensor sig_map;
        if (tg.dasfd || tg.dasrd)
          sig_map = sigma_from_head(sh.uncert_raw, cfg.distill.sigma_min,
                                    cfg.distill.sigma_max);
        if (tg.dasfd) {
          std::vector<double> omega = selective_weights(
              sigma_at_cells(sig_map, c.batch), c.teacher.sigma_cells,
              cfg.distill.scheme, cfg.distill.omega_max);
          l_wfd = dasfd_loss(c.teacher.feats, af, c.batch, omega);
        } else if (tg.general_fd) {
          l_wfd = general_feature_distillation(c.teacher.feats, af);
        }
        if (tg.dasrd) {
          RelationMatrix ds = relation_matrix(af, c.rois,
                                              sigma_vec(sig_map, c.batch),
                                              cfg.distill, /*detach_all=*/false);
          l_wrd = dasrd_loss(c.teacher.relations, ds);
        } else if (tg.general_rd) {
          l_wrd = general_relation_distillation(c.teacher.feats, af, c.rois,
                                                cfg.distill);
        }
        if (tg.response) l_ed = response_distillation(c.teacher.heads, sh);
        Tensor total = total_loss(l_src, l_wfd, l_wrd, l_ed, cfg.distill, ramp);
        terms.l_src = l_src.value();
        terms.l_wfd = l_wfd.value();
        terms.l_wrd = l_wrd.value();
        terms.l_ed = l_ed.value();
        terms.total = total.value();
        return total;
      },
      res.log_csv);

  if (params_hash(teacher) != teacher_hash_before)
    throw NumericError("distill_student: frozen teacher was modified");
  res.student = std::move(sdet.t);
  res.adapter = std::move(adapter.t);
  return res;
}

std::string train_teacher(const std::string& manifest_path,
                          const TrainConfig& cfg, const std::string& out_dir) {
  std::vector<Scene> train = load_split(manifest_path, "train");
  TeacherResult res = train_teacher_core(train, cfg);
  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "teacher.ckpt").string();
  write_checkpoint(res.params, ckpt);
  write_text(fs::path(out_dir) / "training_log.csv", res.log_csv);
  return ckpt;
}

std::string distill_student(const std::string& manifest_path,
                            const std::string& teacher_ckpt,
                            const TrainConfig& cfg, const std::string& out_dir) {
  std::vector<Scene> train = load_split(manifest_path, "train");
  ParamMap teacher = read_checkpoint(teacher_ckpt);
  DistillResult res = distill_student_core(train, teacher, cfg);
  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "student.ckpt").string();
  write_checkpoint(res.student, ckpt);
  write_checkpoint(res.adapter, (fs::path(out_dir) / "adapter.ckpt").string());
  write_text(fs::path(out_dir) / "training_log.csv", res.log_csv);
  return ckpt;
}

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<Box3D>& gts, IouKind kind,
                             double thresh) {
  MatchResult mr;
  mr.det_tp.assign(dets.size(), 0);
  mr.det_gt.assign(dets.size(), -1);
  mr.gt_matched.assign(gts.size(), 0);
  std::vector<int> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[std::size_t(a)].score > dets[std::size_t(b)].score;
  });
  for (int di : order) {
    const Detection& d = dets[std::size_t(di)];
    double best = thresh;
    int best_gt = -1;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (mr.gt_matched[j]) continue;
      const double iou = kind == IouKind::Bev ? iou_bev(d.box, gts[j])
                                              : iou_3d(d.box, gts[j]);
      if (iou >= best) {
        best = iou;
        best_gt = int(j);
      }
    }
    if (best_gt >= 0) {
      mr.det_tp[std::size_t(di)] = 1;
      mr.det_gt[std::size_t(di)] = best_gt;
      mr.gt_matched[std::size_t(best_gt)] = 1;
    }
  }
  return mr;
}

std::optional<double> ap40(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<Box3D>>& gts,
                           IouKind kind, double thresh) {
  if (dets.size() != gts.size())
    throw ShapeError("ap40: detections and ground truth differ in scene count");
  std::size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  if (total_gt == 0) return std::nullopt;

  struct Entry {
    double score;
    bool tp;
  };
  std::vector<Entry> entries;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    MatchResult mr = match_detections(dets[s], gts[s], kind, thresh);
    for (std::size_t i = 0; i < dets[s].size(); ++i)
      entries.push_back({dets[s][i].score, mr.det_tp[i] != 0});
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) {
                     return a.score > b.score;
                   });

  std::vector<double> recall, precision;
  long tp = 0, fp = 0;
  for (const Entry& e : entries) {
    e.tp ? ++tp : ++fp;
    recall.push_back(double(tp) / double(total_gt));
    precision.push_back(double(tp) / double(tp + fp));
  }
  // Interpolated precision: max precision at recall >= r, as a suffix max.
  std::vector<double> interp(precision);
  for (std::size_t i = interp.size(); i-- > 1;)
    interp[i - 1] = std::max(interp[i - 1], interp[i]);

  double ap = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double r = double(k) / 40.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end())
      ap += interp[std::size_t(it - recall.begin())];
  }
  return ap / 40.0;
}

EvalReport evaluate_core(const ParamMap& detector,
                         const std::vector<Scene>& scenes,
                         const std::string& split_name, const EvalConfig& cfg) {
  DetectorParams det{detector};
  const bool depth_view = detector_in_channels(det) == 1;
  EvalReport rep;
  rep.split = split_name;

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box3D>> gts;
  double mae_sum = 0, sigma_sum = 0;
  long mae_n = 0;
  for (const Scene& s : scenes) {
    Tensor input = depth_view ? teacher_input(s) : student_input(s);
    HeadBundle h = heads_forward(backbone_forward(input, det)[0], det);
    std::vector<Detection> d =
        decode_detections(h, s.cam, cfg.score_thresh, cfg.top_k);
    std::vector<Box3D> g;
    for (const auto& o : s.objects) g.push_back(o.box3d);

    MatchResult strict = match_detections(d, g, IouKind::Bev, cfg.iou_thresh);
    for (char f : strict.det_tp) f ? ++rep.tp : ++rep.fp;
    for (char f : strict.gt_matched)
      if (!f) ++rep.fn;

    MatchResult loose = match_detections(d, g, IouKind::Bev, 0.3);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!loose.det_tp[i]) continue;
      mae_sum += std::abs(d[i].z - g[std::size_t(loose.det_gt[i])].z);
      sigma_sum += d[i].sigma;
      ++mae_n;
    }
    dets.push_back(std::move(d));
    gts.push_back(std::move(g));
  }
  rep.ap3d = ap40(dets, gts, IouKind::ThreeD, cfg.iou_thresh);
  rep.apbev = ap40(dets, gts, IouKind::Bev, cfg.iou_thresh);
  if (mae_n > 0) {
    rep.depth_mae = mae_sum / double(mae_n);
    rep.mean_sigma = sigma_sum / double(mae_n);
  }
  return rep;
}

std::string eval_csv(const EvalReport& r) {
  std::string csv = "split,ap3d,apbev,depth_mae,mean_sigma,tp,fp,fn\n";
  csv += r.split + "," + format_opt(r.ap3d) + "," + format_opt(r.apbev) + "," +
         format_opt(r.depth_mae) + "," + format_opt(r.mean_sigma) + "," +
         std::to_string(r.tp) + "," + std::to_string(r.fp) + "," +
         std::to_string(r.fn) + "\n";
  return csv;
}

EvalReport evaluate(const std::string& ckpt_path,
                    const std::string& manifest_path, const std::string& split,
                    const EvalConfig& cfg, const std::string& out_dir) {
  ParamMap params = read_checkpoint(ckpt_path);
  std::vector<Scene> scenes = load_split(manifest_path, split);
  EvalReport rep = evaluate_core(params, scenes, split, cfg);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "eval.csv", eval_csv(rep));
  return rep;
}

std::vector<AblateCell> make_grid(const std::string& which,
                                  const TrainConfig& base) {
  std::vector<AblateCell> cells;
  auto add = [&](const std::string& table, const std::string& cell,
                 auto&& tweak) {
    TrainConfig cfg = base;
    cfg.toggles = Toggles{};
    tweak(cfg);
    cells.push_back({table, cell, cfg});
  };
  const bool t5 = which == "table5" || which == "all";
  const bool t6 = which == "table6" || which == "all";
  const bool t7 = which == "table7" || which == "all";
  if (!t5 && !t6 && !t7)
    throw ConfigError("make_grid: unknown grid '" + which + "'");

  auto full = [](TrainConfig& c) {
    c.toggles.dasfd = c.toggles.dasrd = c.toggles.response = true;
  };
  if (t5) {
    add("table5", "none", [](TrainConfig&) {});
    add("table5", "ed", [](TrainConfig& c) { c.toggles.response = true; });
    add("table5", "ed+fd+rd", [](TrainConfig& c) {
      c.toggles.general_fd = c.toggles.general_rd = c.toggles.response = true;
    });
    add("table5", "ed+dasfd+dasrd", full);
  }
  if (t6) {
    for (const auto& [name, scheme] :
         {std::pair<const char*, WeightScheme>{"student", WeightScheme::Student},
          {"teacher", WeightScheme::Teacher},
          {"sum", WeightScheme::Sum},
          {"multiply", WeightScheme::Multiply}})
      add("table6", name, [&, s = scheme](TrainConfig& c) {
        full(c);
        c.distill.scheme = s;
      });
  }
  if (t7) {
    for (double l3 : {0.1, 1.0, 10.0})
      add("table7", "lambda3=" + format_double(l3),
          [&, l3](TrainConfig& c) {
            full(c);
            c.distill.lambda3 = l3;
          });
  }
  return cells;
}

namespace {

// Cells that share toggles, scheme, lambdas, epochs, and seed are the same
// run; tables 6/7 overlap table5's full cell this way.
std::string run_key(const TrainConfig& c) {
  const Toggles& t = c.toggles;
  return std::to_string(t.dasfd) + std::to_string(t.dasrd) +
         std::to_string(t.general_fd) + std::to_string(t.general_rd) +
         std::to_string(t.response) + "|" +
         std::to_string(int(c.distill.scheme)) + "|" +
         format_double(c.distill.lambda1) + "," +
         format_double(c.distill.lambda2) + "," +
         format_double(c.distill.lambda3) + "|" +
         std::to_string(c.distill.warmup_epochs) + "|" +
         std::to_string(c.epochs) + "|" + std::to_string(c.seed);
}

struct RunOutcome {
  std::optional<double> ap3d, apbev, depth_mae;
  std::string error;
};

}  // namespace

std::vector<AblateRow> ablate(const std::string& manifest_path,
                              const AblateConfig& cfg,
                              const std::string& out_dir) {
  std::vector<Scene> train = load_split(manifest_path, "train");
  std::vector<Scene> val = load_split(manifest_path, "val");
  fs::create_directories(out_dir);

  TeacherResult teacher = train_teacher_core(train, cfg.base);
  write_checkpoint(teacher.params,
                   (fs::path(out_dir) / "teacher.ckpt").string());

  std::vector<AblateCell> cells = make_grid(cfg.grid, cfg.base);
  struct RunSpec {
    std::string key;
    TrainConfig cfg;
  };
  std::vector<RunSpec> specs;
  std::vector<std::pair<const AblateCell*, std::vector<std::uint64_t>>> plan;
  for (const AblateCell& cell : cells) {
    const auto& seeds = cell.table == "table5" ? cfg.seeds : cfg.small_seeds;
    plan.emplace_back(&cell, seeds);
    for (std::uint64_t seed : seeds) {
      TrainConfig rc = cell.cfg;
      rc.epochs = cfg.cell_epochs;
      rc.seed = seed;
      const std::string key = run_key(rc);
      bool seen = false;
      for (const auto& sp : specs) seen = seen || sp.key == key;
      if (!seen) specs.push_back({key, rc});
    }
  }

  std::vector<RunOutcome> outcomes(specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      RunOutcome& out = outcomes[i];
      try {
        DistillResult dr = distill_student_core(train, teacher.params,
                                                specs[i].cfg);
        EvalReport rep = evaluate_core(dr.student, val, "val", cfg.eval);
        out.ap3d = rep.ap3d;
        out.apbev = rep.apbev;
        out.depth_mae = rep.depth_mae;
      } catch (const std::exception& e) {
        out.error = e.what();
      }
    }
  };
  const int threads = thread_count();
  if (threads <= 1 || specs.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(threads, int(specs.size())); ++t)
      pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  auto find_outcome = [&](const std::string& key) -> const RunOutcome& {
    for (std::size_t i = 0; i < specs.size(); ++i)
      if (specs[i].key == key) return outcomes[i];
    throw std::logic_error("ablate: missing run outcome");
  };

  std::vector<AblateRow> rows;
  std::string errors;
  for (const auto& [cell, seeds] : plan) {
    std::vector<double> m3d, mbev, mmae;
    for (std::uint64_t seed : seeds) {
      TrainConfig rc = cell->cfg;
      rc.epochs = cfg.cell_epochs;
      rc.seed = seed;
      const RunOutcome& out = find_outcome(run_key(rc));
      AblateRow row;
      row.table = cell->table;
      row.cell = cell->cell;
      row.seed = std::to_string(seed);
      row.ap3d = out.ap3d;
      row.apbev = out.apbev;
      row.depth_mae = out.depth_mae;
      row.error = out.error;
      if (!out.error.empty())
        errors += cell->table + "/" + cell->cell + " seed " +
                  std::to_string(seed) + ": " + out.error + "\n";
      if (out.ap3d) m3d.push_back(*out.ap3d);
      if (out.apbev) mbev.push_back(*out.apbev);
      if (out.depth_mae) mmae.push_back(*out.depth_mae);
      rows.push_back(std::move(row));
    }
    AblateRow med;
    med.table = cell->table;
    med.cell = cell->cell;
    med.seed = "median";
    med.ap3d = median(m3d);
    med.apbev = median(mbev);
    med.depth_mae = median(mmae);
    rows.push_back(std::move(med));
  }

  write_text(fs::path(out_dir) / "ablation.csv", ablation_csv(rows));
  if (!errors.empty())
    write_text(fs::path(out_dir) / "ablation_errors.log", errors);
  return rows;
}

std::string ablation_csv(const std::vector<AblateRow>& rows) {
  std::string csv = "cell,seed,ap3d,apbev,depth_mae\n";
  for (const AblateRow& r : rows)
    csv += r.table + "/" + r.cell + "," + r.seed + "," + format_opt(r.ap3d) +
           "," + format_opt(r.apbev) + "," + format_opt(r.depth_mae) + "\n";
  return csv;
}

}  // namespace seldist
