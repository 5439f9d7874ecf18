#pragma once
// COCO-style detection metrics: greedy matching by descending confidence at
// IoU thresholds 0.50:0.05:0.95, 101-point interpolated AP, mAP averaged over
// classes present in the ground truth and then over thresholds.

#include <array>
#include <string>
#include <vector>

#include "zsq/data.hpp"
#include "zsq/detector.hpp"

namespace zsq {

inline constexpr std::size_t kNumIouThresholds = 10;
double iou_threshold(std::size_t i);  // 0.50 + 0.05 i

struct EvalResult {
  // [class][threshold]; classes without ground truth hold -1 and are skipped.
  std::vector<std::array<double, kNumIouThresholds>> per_class_ap;
  double map_5095 = 0.0;
  double map_50 = 0.0;
  // Counts at IoU 0.50.
  std::size_t tp = 0, fp = 0, fn = 0;
};

// predictions[i] and ground_truth[i] belong to image i. Prediction order
// within an image breaks confidence ties (earlier wins).
EvalResult evaluate_detections(const std::vector<std::vector<BoxLabel>>& predictions,
                               const std::vector<std::vector<BoxLabel>>& ground_truth, int num_classes);

// 101-point interpolated AP of one ranked list. `hits` is in ranking order.
double average_precision(const std::vector<bool>& hits, std::size_t num_gt);

struct EvalOptions {
  double conf_thresh = 0.001;
  double nms_iou = 0.6;
  std::size_t batch_size = 64;
};

std::vector<std::vector<BoxLabel>> predict(const Detector& model, const Dataset& data,
                                           const std::vector<std::size_t>& indices, const EvalOptions& opts);

EvalResult evaluate(const Detector& model, const Dataset& data, const std::vector<std::size_t>& indices,
                    const EvalOptions& opts = {});

std::string eval_csv(const EvalResult& r, const std::vector<std::string>& class_names);
std::string eval_summary(const EvalResult& r, const std::vector<std::string>& class_names);

}  // namespace zsq
