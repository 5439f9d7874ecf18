#pragma once
// Quantization-aware training of a student against a frozen full-precision
// teacher on a calibration set:
//   beta_kl * L_kd + beta_feat * L_feat + beta_detect * L_detect
// L_kd compares temperature-softened class distributions per cell (and, when
// enabled, the objectness probabilities). Box channels are not distilled.

#include <functional>
#include <string>
#include <vector>

#include "zsq/data.hpp"
#include "zsq/detector.hpp"
#include "zsq/eval.hpp"

namespace zsq {

struct QatConfig {
  int weight_bits = 4;
  int act_bits = 8;
  bool asymmetric_activations = false;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double quantizer_lr = 1e-3;
  double tau = 1.0;
  bool kd_objectness = true;
  double beta_detect = 0.04;
  double beta_kl = 0.1;
  double beta_feat = 1.0;
  bool hflip = false;  // synthetic images are not mirror-invariant for the teacher
  bool freeze_bn = true;  // student BN normalizes with its running stats and never updates them
  std::uint64_t seed = 0;
  DetectLossWeights loss_weights;
  std::size_t eval_every = 1;  // epochs; the last epoch always evaluates

  void validate() const;
};

// (tau^2 / N) * sum over cells of KL(softmax(t / tau) || softmax(s / tau)) on
// the class channels, plus the binary KL on objectness when requested.
// N is the batch size. Gradients flow to student_pred only.
Tensor kd_loss(const Tensor& teacher_pred, const Tensor& student_pred, double tau, bool objectness = true);

// (1 / (N L)) * sum over the L tapped layers of ||f_teacher - f_student||^2.
Tensor feature_loss(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps);

struct QatLoss {
  Tensor total;
  double kd = 0, feat = 0, detect = 0;
};

QatLoss qat_total_loss(const ForwardResult& teacher, const ForwardResult& student,
                       const std::vector<BoxLabel>& labels, const QatConfig& cfg);

struct QatEpochLog {
  std::size_t epoch = 0;  // 0 is the calibrated student before any update
  double kd = 0, feat = 0, detect = 0, total = 0;
  bool evaluated = false;
  double map = 0, map50 = 0;
  double seconds = 0;
};

struct QatResult {
  Detector best;              // highest mAP among evaluated epochs
  std::size_t best_epoch = 0;
  std::vector<QatEpochLog> log;
  bool diverged = false;      // a non-finite loss stopped training early
  std::string divergence;     // what went wrong, when diverged
};

using QatEpochCallback = std::function<void(const QatEpochLog&)>;

// The student starts as a quantized copy of the teacher with activation steps
// calibrated on the first calibration batch. Evaluation uses val_indices of
// `val`; with no indices every epoch is scored 0 and the last epoch is kept.
QatResult run_qat(const Detector& teacher, const Dataset& calibration, const Dataset& val,
                  const std::vector<std::size_t>& val_indices, const QatConfig& cfg,
                  const QatEpochCallback& on_epoch = {}, const EvalOptions& eval_opts = {});

// epoch,L_KD,L_feat,L_detect,total,mAP,mAP50 rows. Wall-clock time goes to
// qat_timing_csv so the metrics file is reproducible byte for byte.
std::string qat_metrics_csv(const std::vector<QatEpochLog>& log);
std::string qat_timing_csv(const std::vector<QatEpochLog>& log);

}  // namespace zsq
