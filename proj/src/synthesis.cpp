#include "zsq/synthesis.hpp"

#include <algorithm>
#include <cmath>

#include "zsq/error.hpp"
#include "zsq/ops.hpp"
#include "zsq/optim.hpp"

namespace zsq {

std::size_t SynthesisConfig::effective_relabel_interval() const {
  if (relabel_interval > 0) return relabel_interval;
  return std::max<std::size_t>(1, low_res_iterations / 10);
}

void SynthesisConfig::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string("synthesis: ") + name + " must be >= 0");
  };
  nonneg(alpha_prior, "alpha_prior");
  nonneg(alpha_detect, "alpha_detect");
  nonneg(alpha_tv, "alpha_tv");
  nonneg(alpha_l2, "alpha_l2");
  if (!(lr > 0.0)) throw ValidationError("synthesis: lr must be > 0");
  if (resolution == 0 || resolution % kTotalStride != 0)
    throw ValidationError("synthesis: resolution must be a positive multiple of 8");
  if (low_resolution == 0 || low_resolution % kTotalStride != 0)
    throw ValidationError("synthesis: low_resolution must be a positive multiple of 8");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0)) throw ValidationError("synthesis: conf_thresh must be in [0, 1]");
  if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0)) throw ValidationError("synthesis: iou_thresh must be in [0, 1]");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ValidationError("synthesis: nms_iou must be in (0, 1]");
  if (batch_size == 0) throw ValidationError("synthesis: batch_size must be > 0");
}

Tensor bns_loss_from_forward(const Detector& model, const ForwardResult& forward) {
  if (model.blocks.empty()) throw ValidationError("bns loss: model has no batch-norm layers");
  Tensor total;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const BnLayer& bn = model.blocks[i].bn;
    const BatchNormResult& r = forward.bn.at(i);
    if (!r.batch_mean.defined()) throw ValidationError("bns loss: forward was not run in measure mode");
    const Tensor term = add(l2_norm(sub(r.batch_mean, bn.running_mean.detach())),
                            l2_norm(sub(r.batch_var, bn.running_var.detach())));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor bns_alignment_loss(const Detector& model, const Tensor& images) {
  if (model.blocks.empty()) throw ValidationError("bns loss: model has no batch-norm layers");
  return bns_loss_from_forward(model, model.forward(images, BnMode::kMeasure));
}

Tensor total_variation(const Tensor& images) {
  if (images.dim() != 4) throw ShapeError("total_variation: expected [N, C, H, W]");
  const std::size_t h = images.size(2), w = images.size(3);
  Tensor tv = Tensor::scalar(0.0);
  if (h > 1) tv = add(tv, mean(square(sub(slice(images, 2, 1, h - 1), slice(images, 2, 0, h - 1)))));
  if (w > 1) tv = add(tv, mean(square(sub(slice(images, 3, 1, w - 1), slice(images, 3, 0, w - 1)))));
  return tv;
}

Tensor regularizer_loss(const Tensor& images, double alpha_tv, double alpha_l2) {
  Tensor reg = Tensor::scalar(0.0);
  if (alpha_tv != 0.0) reg = add(reg, scale(total_variation(images), alpha_tv));
  if (alpha_l2 != 0.0) reg = add(reg, scale(sum(square(images)), alpha_l2));
  return reg;
}

ObjectiveTerms synthesis_objective(const Detector& model, const Tensor& images, const std::vector<BoxLabel>& labels,
                                   const SynthesisConfig& cfg) {
  ObjectiveTerms t;
  const ForwardResult fr = model.forward(images, BnMode::kMeasure);
  t.bns = bns_loss_from_forward(model, fr);
  t.reg = regularizer_loss(images, cfg.alpha_tv, cfg.alpha_l2);
  t.total = add(scale(t.bns, cfg.alpha_prior), t.reg);
  if (cfg.alpha_detect != 0.0) {
    t.detect = detect_loss(fr.pred, labels, cfg.detect_weights).total;
    t.total = add(t.total, scale(t.detect, cfg.alpha_detect));
  }
  return t;
}

BoxLabel sample_initial_label(int num_classes, Rng& rng) {
  if (num_classes <= 0) throw ValidationError("sample_initial_label: num_classes must be > 0");
  BoxLabel l;
  l.class_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
  l.w = rng.uniform(0.2, 0.8);
  l.h = rng.uniform(0.2, 0.8);
  l.cx = rng.uniform(l.w / 2, 1.0 - l.w / 2);
  l.cy = rng.uniform(l.h / 2, 1.0 - l.h / 2);
  l.confidence = 1.0;
  return l;
}

namespace {

double max_iou(const BoxLabel& box, const std::vector<BoxLabel>& others) {
  double best = 0.0;
  for (const BoxLabel& o : others) best = std::max(best, iou(box, o));
  return best;
}

}  // namespace

std::vector<BoxLabel> adaptive_label_update(const std::vector<BoxLabel>& existing,
                                            const std::vector<BoxLabel>& detections, double iou_thresh) {
  std::vector<BoxLabel> out;
  for (const BoxLabel& e : existing) {
    if (max_iou(e, detections) >= iou_thresh) out.push_back(e);
  }
  for (const BoxLabel& d : detections) {
    if (max_iou(d, existing) < iou_thresh) out.push_back(d);
  }
  if (out.empty() && !existing.empty()) {
    const auto best = std::max_element(existing.begin(), existing.end(),
                                       [](const BoxLabel& a, const BoxLabel& b) { return a.confidence < b.confidence; });
    out.push_back(*best);
  }
  return out;
}

std::vector<BoxLabel> adaptive_label_step(const std::vector<BoxLabel>& labels, const Tensor& images,
                                          const Detector& teacher, double conf_thresh, double iou_thresh,
                                          double nms_iou) {
  NoGradGuard guard;
  const std::size_t n = images.size(0);
  const std::vector<BoxLabel> dets =
      decode_predictions(teacher.forward(images, BnMode::kEval).pred, conf_thresh, nms_iou);
  std::vector<std::vector<BoxLabel>> existing(n), found(n);
  for (const BoxLabel& l : labels) existing.at(l.batch_index).push_back(l);
  for (const BoxLabel& d : dets) found.at(d.batch_index).push_back(d);
  std::vector<BoxLabel> out;
  for (std::size_t i = 0; i < n; ++i) {
    for (BoxLabel l : adaptive_label_update(existing[i], found[i], iou_thresh)) {
      l.batch_index = i;
      out.push_back(l);
    }
  }
  return out;
}

const char* label_source_name(LabelSource source) {
  switch (source) {
    case LabelSource::kAdaptive: return "adaptive";
    case LabelSource::kTile: return "tile";
    case LabelSource::kMultisample: return "multisample";
    case LabelSource::kGaussian: return "gaussian";
    case LabelSource::kReal: return "real";
  }
  return "?";
}

LabelSource parse_label_source(const std::string& name) {
  for (LabelSource s : {LabelSource::kAdaptive, LabelSource::kTile, LabelSource::kMultisample, LabelSource::kGaussian,
                        LabelSource::kReal}) {
    if (name == label_source_name(s)) return s;
  }
  throw ValidationError("unknown label source '" + name + "'");
}

namespace {

std::size_t draw_count(const std::vector<std::size_t>& histogram, Rng& rng) {
  std::size_t total = 0;
  for (std::size_t k = 1; k < histogram.size(); ++k) total += histogram[k];
  if (total == 0) throw ValidationError("label plan: histogram has no images with labels");
  std::uint64_t r = rng.below(total);
  for (std::size_t k = 1; k < histogram.size(); ++k) {
    if (r < histogram[k]) return k;
    r -= histogram[k];
  }
  return histogram.size() - 1;
}

std::vector<BoxLabel> tile_labels(std::size_t count, std::size_t grid, int num_classes, Rng& rng) {
  const double cell = 1.0 / static_cast<double>(grid);
  std::vector<std::size_t> cells(grid * grid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  for (std::size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.below(i)]);
  std::vector<BoxLabel> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t gx = cells[i] % grid, gy = cells[i] / grid;
    BoxLabel l;
    l.class_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
    l.w = rng.uniform(0.2, 0.8) * cell;
    l.h = rng.uniform(0.2, 0.8) * cell;
    l.cx = static_cast<double>(gx) * cell + rng.uniform(l.w / 2, cell - l.w / 2);
    l.cy = static_cast<double>(gy) * cell + rng.uniform(l.h / 2, cell - l.h / 2);
    out.push_back(l);
  }
  return out;
}

}  // namespace

std::vector<std::vector<BoxLabel>> baseline_labels(const LabelPlan& plan, std::size_t count, int num_classes,
                                                   Rng& rng) {
  std::vector<std::vector<BoxLabel>> out(count);
  switch (plan.source) {
    case LabelSource::kAdaptive:
    case LabelSource::kGaussian:
      for (auto& ls : out) ls.push_back(sample_initial_label(num_classes, rng));
      break;
    case LabelSource::kMultisample:
      for (auto& ls : out) {
        const std::size_t n =
            plan.in_distribution ? draw_count(plan.label_count_histogram, rng) : plan.multisample_count;
        for (std::size_t i = 0; i < n; ++i) ls.push_back(sample_initial_label(num_classes, rng));
      }
      break;
    case LabelSource::kTile:
      for (auto& ls : out) {
        std::size_t n = plan.tile_grid * plan.tile_grid, grid = plan.tile_grid;
        if (plan.in_distribution) {
          n = draw_count(plan.label_count_histogram, rng);
          grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n)) - 1e-9));
        }
        if (grid == 0) throw ValidationError("label plan: tile grid must be > 0");
        ls = tile_labels(n, grid, num_classes, rng);
      }
      break;
    case LabelSource::kReal: {
      if (plan.real == nullptr) throw ValidationError("label plan: real labels need a dataset");
      const std::vector<std::size_t> train = plan.real->train_indices();
      if (train.empty()) throw ValidationError("label plan: real dataset has no training images");
      for (std::size_t i = 0; i < count; ++i) out[i] = plan.real->labels[train[i % train.size()]];
      break;
    }
  }
  for (auto& ls : out) {
    for (BoxLabel& l : ls) {
      l.batch_index = 0;
      l.confidence = 1.0;
    }
  }
  return out;
}

namespace {

struct BatchImages {
  Tensor z;
  std::vector<BoxLabel> labels;  // batch-indexed
};

Tensor random_z(std::size_t n, std::size_t res, Rng& rng) {
  Tensor z({n, 3, res, res});
  for (double& v : z.data()) v = rng.normal();
  z.set_requires_grad(true);
  return z;
}

Tensor cutout_mask(std::size_t n, std::size_t res, Rng& rng) {
  Tensor mask({n, 3, res, res}, 1.0);
  const std::size_t side = std::max<std::size_t>(1, res / 4);
  auto m = mask.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y0 = rng.below(res - side + 1), x0 = rng.below(res - side + 1);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = y0; y < y0 + side; ++y) {
        for (std::size_t x = x0; x < x0 + side; ++x) m[((i * 3 + c) * res + y) * res + x] = 0.0;
      }
    }
  }
  return mask;
}

void check_finite(double value, const char* stage, std::size_t first_image, std::size_t iteration) {
  if (std::isfinite(value)) return;
  Tape::current().clear();
  throw DivergenceError(std::string("synthesis: non-finite objective in ") + stage + " stage, batch starting at image " +
                        std::to_string(first_image) + ", iteration " + std::to_string(iteration));
}

double measure_bns(const Detector& teacher, const Tensor& z) {
  NoGradGuard guard;
  return bns_alignment_loss(teacher, sigmoid(z.detach())).item();
}

// Label sampling at low resolution; returns the final labels.
std::vector<BoxLabel> label_stage(const Detector& teacher, const SynthesisConfig& cfg, std::vector<BoxLabel> labels,
                                  std::size_t n, std::size_t first_image, Rng& rng) {
  Tensor z = random_z(n, cfg.low_resolution, rng);
  Adam opt({z});
  const std::size_t interval = cfg.effective_relabel_interval();
  for (std::size_t it = 0; it < cfg.low_res_iterations; ++it) {
    const ObjectiveTerms t = synthesis_objective(teacher, sigmoid(z), labels, cfg);
    check_finite(t.total.item(), "label", first_image, it);
    opt.zero_grad();
    backward(t.total);
    opt.step(cfg.lr);
    if ((it + 1) % interval == 0) {
      NoGradGuard guard;
      labels = adaptive_label_step(labels, sigmoid(z.detach()), teacher, cfg.conf_thresh, cfg.iou_thresh,
                                   cfg.nms_iou);
    }
  }
  return labels;
}

Tensor image_stage(const Detector& teacher, const SynthesisConfig& cfg, const std::vector<BoxLabel>& labels,
                   std::size_t n, BatchReport& report, Rng& rng) {
  Tensor z = random_z(n, cfg.resolution, rng);
  report.bns_initial = measure_bns(teacher, z);
  Adam opt({z});
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Tensor x = sigmoid(z);
    Tensor input = x;
    if (cfg.cutout_enabled) {
      const Tensor keep = cutout_mask(n, cfg.resolution, rng);
      input = add(mul(x, keep), scale(add_scalar(scale(keep, -1.0), 1.0), 0.5));
    }
    const ForwardResult fr = teacher.forward(input, BnMode::kMeasure);
    Tensor total = add(scale(bns_loss_from_forward(teacher, fr), cfg.alpha_prior),
                       regularizer_loss(x, cfg.alpha_tv, cfg.alpha_l2));
    if (cfg.alpha_detect != 0.0)
      total = add(total, scale(detect_loss(fr.pred, labels, cfg.detect_weights).total, cfg.alpha_detect));
    const double value = total.item();
    check_finite(value, "image", report.first_image, it);
    report.objective_trace.push_back(value);
    opt.zero_grad();
    backward(total);
    opt.step(cosine_lr(cfg.lr, it, cfg.iterations));
  }
  report.bns_final = measure_bns(teacher, z);
  NoGradGuard guard;
  return sigmoid(z.detach());
}

}  // namespace

CalibrationSet generate_calibration_set(const Detector& teacher, const SynthesisConfig& cfg, std::size_t count,
                                        const LabelPlan& plan) {
  cfg.validate();
  if (count == 0) throw ValidationError("synthesis: image count must be > 0");
  const int num_classes = teacher.config.num_classes;
  Rng label_rng(cfg.seed, 0x1abe1);
  const std::vector<std::vector<BoxLabel>> planned = baseline_labels(plan, count, num_classes, label_rng);

  CalibrationSet out;
  out.data.images.reserve(count);
  out.data.labels.reserve(count);
  for (std::size_t first = 0; first < count; first += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, count - first);
    Rng rng(cfg.seed, 0x5a00000 + first);
    BatchReport report;
    report.first_image = first;
    report.size = n;

    std::vector<BoxLabel> labels;
    for (std::size_t i = 0; i < n; ++i) {
      for (BoxLabel l : planned[first + i]) {
        l.batch_index = i;
        labels.push_back(l);
      }
    }

    Tensor images;
    if (plan.source == LabelSource::kGaussian) {
      NoGradGuard guard;
      images = sigmoid(random_z(n, cfg.resolution, rng).detach());
      report.bns_initial = report.bns_final = bns_alignment_loss(teacher, images).item();
    } else {
      if (plan.source == LabelSource::kAdaptive) labels = label_stage(teacher, cfg, labels, n, first, rng);
      images = image_stage(teacher, cfg, labels, n, report, rng);
    }

    std::vector<std::vector<BoxLabel>> per_image(n);
    for (BoxLabel l : labels) {
      const std::size_t i = l.batch_index;
      l.batch_index = 0;
      per_image.at(i).push_back(l);
    }
    for (std::size_t i = 0; i < n; ++i) {
      out.data.images.push_back(tensor_to_image(images, i));
      out.data.labels.push_back(std::move(per_image[i]));
    }
    out.batches.push_back(std::move(report));
  }
  out.data.manifest = build_manifest(out.data.labels, cfg.resolution, num_classes, 1.0);
  out.data.manifest.source = label_source_name(plan.source);
  out.data.manifest.seed = cfg.seed;
  return out;
}

}  // namespace zsq
