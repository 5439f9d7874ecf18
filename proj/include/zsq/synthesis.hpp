#pragma once
// Calibration-set synthesis by inverting a frozen detector.
//
// Images are optimized in an unconstrained domain z and fed to the model as
// x = sigmoid(z). The objective for a batch with labels y is
//   alpha_prior * L_bns(x) + alpha_detect * L_detect(model(x), y)
//     + alpha_tv * L_tv(x) + alpha_l2 * ||x||^2
// where L_bns sums, over BN layers, the L2 distances between batch and
// running means and between batch and running variances.

#include <cstdint>
#include <string>
#include <vector>

#include "zsq/data.hpp"
#include "zsq/detector.hpp"
#include "zsq/random.hpp"

namespace zsq {

struct SynthesisConfig {
  double alpha_prior = 0.01;
  double alpha_detect = 0.5;
  double alpha_tv = 0.0;
  double alpha_l2 = 1e-6;  // the norm is summed over every pixel
  std::size_t iterations = 200;          // full-resolution stage
  std::size_t low_res_iterations = 100;  // label-sampling stage
  std::size_t relabel_interval = 0;      // 0: low_res_iterations / 10
  double lr = 0.1;
  std::size_t resolution = 64;
  std::size_t low_resolution = 16;
  double conf_thresh = 0.5;
  double iou_thresh = 0.45;
  double nms_iou = 0.6;
  bool cutout_enabled = true;  // one gray square of side resolution/4 per image per step
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  DetectLossWeights detect_weights;

  std::size_t effective_relabel_interval() const;
  void validate() const;
};

// L_bns over every BN layer of a forward pass run in BnMode::kMeasure.
Tensor bns_loss_from_forward(const Detector& model, const ForwardResult& forward);
// Runs the measure-mode forward. Throws ValidationError for models without BN.
Tensor bns_alignment_loss(const Detector& model, const Tensor& images);

// L_tv: mean squared forward difference along height plus the same along width.
Tensor total_variation(const Tensor& images);
Tensor regularizer_loss(const Tensor& images, double alpha_tv, double alpha_l2);

struct ObjectiveTerms {
  Tensor total;
  Tensor bns, detect, reg;  // unweighted bns and detect; reg already weighted
};

// With alpha_detect == 0 the detection term is skipped (and left undefined).
ObjectiveTerms synthesis_objective(const Detector& model, const Tensor& images, const std::vector<BoxLabel>& labels,
                                   const SynthesisConfig& cfg);

// class ~ U{0..C-1}, w, h ~ U(0.2, 0.8), center uniform over positions that
// keep the box inside the image. Confidence is 1.
BoxLabel sample_initial_label(int num_classes, Rng& rng);

// One image's label update from its teacher detections:
//   add detections whose max IoU with the existing labels is below iou_thresh,
//   drop existing labels whose max IoU with the detections is below iou_thresh,
//   and if nothing would remain keep the most confident existing label.
std::vector<BoxLabel> adaptive_label_update(const std::vector<BoxLabel>& existing,
                                            const std::vector<BoxLabel>& detections, double iou_thresh);

// Batch form: runs the teacher on the images, decodes detections above
// conf_thresh and updates every image's labels. batch_index selects the image.
std::vector<BoxLabel> adaptive_label_step(const std::vector<BoxLabel>& labels, const Tensor& images,
                                          const Detector& teacher, double conf_thresh, double iou_thresh,
                                          double nms_iou);

enum class LabelSource { kAdaptive, kTile, kMultisample, kGaussian, kReal };
const char* label_source_name(LabelSource source);
LabelSource parse_label_source(const std::string& name);

struct LabelPlan {
  LabelSource source = LabelSource::kAdaptive;
  bool in_distribution = false;
  // Images with k labels, indexed by k; required for in-distribution plans.
  std::vector<std::size_t> label_count_histogram;
  std::size_t tile_grid = 2;        // out-of-distribution tile: k x k boxes
  std::size_t multisample_count = 3;  // out-of-distribution multisample
  const Dataset* real = nullptr;    // kReal: labels of the training split
};

// Labels for tile, multisample, gaussian and real plans, one list per image.
std::vector<std::vector<BoxLabel>> baseline_labels(const LabelPlan& plan, std::size_t count, int num_classes,
                                                   Rng& rng);

struct BatchReport {
  std::size_t first_image = 0, size = 0;
  double bns_initial = 0, bns_final = 0;  // full-resolution stage, no cutout
  std::vector<double> objective_trace;    // full-resolution stage, per iteration
};

struct CalibrationSet {
  Dataset data;  // manifest.source names the label plan
  std::vector<BatchReport> batches;
};

// Stage 1 (adaptive plans only): optimize at low resolution from one sampled
// label per image, relabeling every relabel_interval iterations. Stage 2:
// fresh z ~ N(0, 1) at full resolution, fixed labels, Adam with cosine decay
// and cutout. Gaussian plans skip both stages. Throws DivergenceError on a
// non-finite objective.
CalibrationSet generate_calibration_set(const Detector& teacher, const SynthesisConfig& cfg, std::size_t count,
                                        const LabelPlan& plan);

}  // namespace zsq
