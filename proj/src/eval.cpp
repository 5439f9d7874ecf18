#include "zsq/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "zsq/error.hpp"

namespace zsq {

double iou_threshold(std::size_t i) { return 0.50 + 0.05 * static_cast<double>(i); }

double average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += hits[i];
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // Precision envelope: non-increasing in recall.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

EvalResult evaluate_detections(const std::vector<std::vector<BoxLabel>>& predictions,
                               const std::vector<std::vector<BoxLabel>>& ground_truth, int num_classes) {
  if (ground_truth.empty()) throw ValidationError("evaluate: empty dataset");
  if (predictions.size() != ground_truth.size()) {
    throw ValidationError("evaluate: " + std::to_string(predictions.size()) + " prediction lists for " +
                          std::to_string(ground_truth.size()) + " images");
  }
  const std::size_t nc = static_cast<std::size_t>(num_classes);
  EvalResult result;
  result.per_class_ap.assign(nc, {});
  for (auto& row : result.per_class_ap) row.fill(-1.0);

  struct Ranked {
    std::size_t image, order;
    const BoxLabel* box;
  };
  std::size_t total_gt = 0;
  std::vector<std::size_t> classes_with_gt;
  for (std::size_t c = 0; c < nc; ++c) {
    std::size_t num_gt = 0;
    for (const auto& g : ground_truth) {
      for (const BoxLabel& b : g) num_gt += static_cast<std::size_t>(b.class_id) == c;
    }
    total_gt += num_gt;
    std::vector<Ranked> ranked;
    for (std::size_t img = 0; img < predictions.size(); ++img) {
      for (std::size_t k = 0; k < predictions[img].size(); ++k) {
        if (static_cast<std::size_t>(predictions[img][k].class_id) == c) ranked.push_back({img, k, &predictions[img][k]});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      return a.box->confidence > b.box->confidence;
    });
    if (num_gt == 0) {
      result.fp += ranked.size();
      continue;
    }
    classes_with_gt.push_back(c);
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
      const double thresh = iou_threshold(t);
      std::vector<std::vector<bool>> matched(ground_truth.size());
      for (std::size_t img = 0; img < ground_truth.size(); ++img) matched[img].assign(ground_truth[img].size(), false);
      std::vector<bool> hits;
      hits.reserve(ranked.size());
      for (const Ranked& r : ranked) {
        const auto& gts = ground_truth[r.image];
        long best = -1;
        double best_iou = thresh;
        for (std::size_t g = 0; g < gts.size(); ++g) {
          if (static_cast<std::size_t>(gts[g].class_id) != c || matched[r.image][g]) continue;
          const double v = iou(*r.box, gts[g]);
          if (v >= best_iou && (best < 0 || v > best_iou)) {
            best_iou = v;
            best = static_cast<long>(g);
          }
        }
        if (best >= 0) matched[r.image][static_cast<std::size_t>(best)] = true;
        hits.push_back(best >= 0);
      }
      result.per_class_ap[c][t] = average_precision(hits, num_gt);
      if (t == 0) {
        const std::size_t tp = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
        result.tp += tp;
        result.fp += hits.size() - tp;
      }
    }
  }
  result.fn = total_gt - result.tp;
  if (classes_with_gt.empty()) throw ValidationError("evaluate: ground truth holds no objects");

  double sum_all = 0.0, sum_50 = 0.0;
  for (std::size_t c : classes_with_gt) {
    sum_50 += result.per_class_ap[c][0];
    for (double ap : result.per_class_ap[c]) sum_all += ap;
  }
  const double k = static_cast<double>(classes_with_gt.size());
  result.map_50 = sum_50 / k;
  result.map_5095 = sum_all / (k * kNumIouThresholds);
  return result;
}

std::vector<std::vector<BoxLabel>> predict(const Detector& model, const Dataset& data,
                                           const std::vector<std::size_t>& indices, const EvalOptions& opts) {
  std::vector<std::vector<BoxLabel>> out(indices.size());
  NoGradGuard guard;
  for (std::size_t start = 0; start < indices.size(); start += opts.batch_size) {
    const std::size_t end = std::min(indices.size(), start + opts.batch_size);
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&data.images.at(indices[i]));
    const Tensor pred = model.forward(images_to_tensor(batch), BnMode::kEval).pred;
    for (BoxLabel b : decode_predictions(pred, opts.conf_thresh, opts.nms_iou)) {
      const std::size_t slot = start + b.batch_index;
      b.batch_index = 0;
      out[slot].push_back(b);
    }
  }
  return out;
}

EvalResult evaluate(const Detector& model, const Dataset& data, const std::vector<std::size_t>& indices,
                    const EvalOptions& opts) {
  if (indices.empty()) throw ValidationError("evaluate: empty dataset");
  std::vector<std::vector<BoxLabel>> gt;
  for (std::size_t i : indices) gt.push_back(data.labels.at(i));
  return evaluate_detections(predict(model, data, indices, opts), gt, model.config.num_classes);
}

std::string eval_csv(const EvalResult& r, const std::vector<std::string>& class_names) {
  std::string out = "class,AP50,AP50_95\n";
  char buf[256];
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    if (r.per_class_ap[c][0] < 0) continue;
    const double mean = std::accumulate(r.per_class_ap[c].begin(), r.per_class_ap[c].end(), 0.0) / kNumIouThresholds;
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", name.c_str(), r.per_class_ap[c][0], mean);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "all,%.6f,%.6f\n", r.map_50, r.map_5095);
  out += buf;
  return out;
}

std::string eval_summary(const EvalResult& r, const std::vector<std::string>& class_names) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "mAP50 %.4f  mAP50-95 %.4f  TP %zu  FP %zu  FN %zu\n", r.map_50, r.map_5095, r.tp,
                r.fp, r.fn);
  out += buf;
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    if (r.per_class_ap[c][0] < 0) continue;
    const double mean = std::accumulate(r.per_class_ap[c].begin(), r.per_class_ap[c].end(), 0.0) / kNumIouThresholds;
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    std::snprintf(buf, sizeof buf, "  %-10s AP50 %.4f  AP50-95 %.4f\n", name.c_str(), r.per_class_ap[c][0], mean);
    out += buf;
  }
  return out;
}

}  // namespace zsq
