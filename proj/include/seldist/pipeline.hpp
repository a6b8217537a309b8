#pragma once

#include <optional>
#include <string>
#include <vector>

#include "seldist/losses.hpp"
#include "seldist/synthscene.hpp"
#include "seldist/toydet.hpp"

namespace seldist {

// Which distillation terms are active. general_* and das* variants of the
// same term are mutually exclusive.
struct Toggles {
  bool dasfd = false;
  bool dasrd = false;
  bool general_fd = false;
  bool general_rd = false;
  bool response = false;
};

struct TrainConfig {
  int epochs = 60;
  int batch = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  DistillConfig distill;
  Toggles toggles;
};

// Throws ConfigError on an inconsistent config (conflicting toggles,
// non-positive batch/lr, negative epochs).
void validate(const TrainConfig& cfg);

struct TeacherResult {
  ParamMap params;
  double train_depth_mae = 0.0;  // on TP matches after the final epoch
  std::string log_csv;           // epoch,step,l_src,l_wfd,l_wrd,l_ed,ramp,total
};

struct DistillResult {
  ParamMap student;
  ParamMap adapter;
  std::string log_csv;
};

// Teacher training: L_src only on the depth-grid input. Divergence raises
// NumericError naming the epoch/step.
TeacherResult train_teacher_core(const std::vector<Scene>& train,
                                 const TrainConfig& cfg);

// Student + adapter training against a frozen teacher; the distillation terms
// chosen by cfg.toggles enter the objective scaled by λ and the warm-up ramp.
// The teacher map is never modified (hash-checked).
DistillResult distill_student_core(const std::vector<Scene>& train,
                                   const ParamMap& teacher,
                                   const TrainConfig& cfg);

// Manifest-level wrappers; write <out_dir>/{teacher.ckpt|student.ckpt,
// adapter.ckpt} and training_log.csv, returning the checkpoint path.
std::string train_teacher(const std::string& manifest_path,
                          const TrainConfig& cfg, const std::string& out_dir);
std::string distill_student(const std::string& manifest_path,
                            const std::string& teacher_ckpt,
                            const TrainConfig& cfg, const std::string& out_dir);

enum class IouKind { Bev, ThreeD };

struct MatchResult {
  // Per detection, in the caller's order: TP flag and matched GT index (-1
  // for FP). Per GT: matched flag.
  std::vector<char> det_tp;
  std::vector<int> det_gt;
  std::vector<char> gt_matched;
};

// Greedy matching in descending score order (ties by input order): each
// detection takes the highest-IoU unmatched GT with IoU >= thresh.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<Box3D>& gts, IouKind kind,
                             double thresh);

// AP at 40 interpolated recall points over a scene-tagged corpus. Matching is
// per scene on the full detection lists; the sweep is global in descending
// score. Zero ground truth -> absent (not zero).
std::optional<double> ap40(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<Box3D>>& gts,
                           IouKind kind, double thresh);

struct EvalConfig {
  double iou_thresh = 0.5;      // AP matching threshold
  double score_thresh = 0.25;   // decode threshold
  int top_k = 32;
  int levels = 2;
};

struct EvalReport {
  std::string split;
  std::optional<double> ap3d;
  std::optional<double> apbev;
  // Depth diagnostics on TPs of a loose BEV matching (IoU >= 0.3), which
  // decouples the depth signal from the AP operating point.
  std::optional<double> depth_mae;
  std::optional<double> mean_sigma;
  // Counts from the BEV matching at iou_thresh: tp+fp = decoded detections,
  // tp+fn = ground-truth objects.
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

EvalReport evaluate_core(const ParamMap& detector,
                         const std::vector<Scene>& scenes,
                         const std::string& split_name, const EvalConfig& cfg);
// Wrapper: loads checkpoint + split, writes <out_dir>/eval.csv.
EvalReport evaluate(const std::string& ckpt_path,
                    const std::string& manifest_path, const std::string& split,
                    const EvalConfig& cfg, const std::string& out_dir);
std::string eval_csv(const EvalReport& r);

// One ablation cell: a named TrainConfig variant evaluated over seeds.
struct AblateCell {
  std::string table;  // "table5" | "table6" | "table7"
  std::string cell;   // row label within the table
  TrainConfig cfg;    // seed field overridden per run
};

struct AblateRow {
  std::string table;
  std::string cell;
  std::string seed;  // seed number, or "median"
  std::optional<double> ap3d, apbev, depth_mae;
  std::string error;  // nonempty if the run failed
};

struct AblateConfig {
  TrainConfig base;                          // shared teacher + cell template
  int cell_epochs = 40;                      // student epochs per cell
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};   // table5
  std::vector<std::uint64_t> small_seeds{1};         // tables 6/7
  EvalConfig eval;
  std::string grid = "all";  // table5 | table6 | table7 | all
};

std::vector<AblateCell> make_grid(const std::string& which,
                                  const TrainConfig& base);

// Runs distill+evaluate per (cell, seed) against one shared teacher trained
// from cfg.base; writes <out_dir>/ablation.csv (+ teacher.ckpt). Failed cells
// are recorded and the rest continue. MSTL_THREADS>1 runs cells concurrently;
// results are emitted in grid order either way.
std::vector<AblateRow> ablate(const std::string& manifest_path,
                              const AblateConfig& cfg,
                              const std::string& out_dir);
std::string ablation_csv(const std::vector<AblateRow>& rows);

// %.9g, empty for absent.
std::string format_double(double v);
std::string format_opt(const std::optional<double>& v);

}  // namespace seldist
