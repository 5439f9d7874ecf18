#include "zsq/qat.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "zsq/error.hpp"
#include "zsq/ops.hpp"
#include "zsq/optim.hpp"
#include "zsq/random.hpp"

namespace zsq {

void QatConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("qat.tau must be > 0");
  for (int b : {weight_bits, act_bits}) {
    if (b < 2 || (b > 16 && b != kPassthroughBits)) throw ValidationError("qat: bit widths must be in [2, 16] or 32");
  }
  if (batch_size == 0) throw ValidationError("qat.batch_size must be > 0");
  if (!(lr >= 0.0) || !(quantizer_lr >= 0.0)) throw ValidationError("qat: learning rates must be >= 0");
  for (double b : {beta_detect, beta_kl, beta_feat}) {
    if (!(b >= 0.0) || !std::isfinite(b)) throw ValidationError("qat: loss weights must be >= 0");
  }
}

Tensor kd_loss(const Tensor& teacher_pred, const Tensor& student_pred, double tau, bool objectness) {
  if (!(tau > 0.0)) throw ValidationError("kd_loss: tau must be > 0");
  if (teacher_pred.shape() != student_pred.shape()) throw ShapeError("kd_loss: prediction shapes differ");
  if (student_pred.dim() != 4 || student_pred.size(1) <= kBoxChannels) throw ShapeError("kd_loss: expected [N, 5 + C, G, G]");
  const std::size_t n = student_pred.size(0);
  const std::size_t classes = student_pred.size(1) - kBoxChannels;
  const Tensor t = teacher_pred.detach();

  const Tensor tz = scale(slice(t, 1, kBoxChannels, classes), 1.0 / tau);
  const Tensor sz = scale(slice(student_pred, 1, kBoxChannels, classes), 1.0 / tau);
  const Tensor log_p = log_softmax(tz, 1);
  Tensor kl = sum(mul(exp(log_p), sub(log_p, log_softmax(sz, 1))));

  if (objectness) {
    const Tensor to = scale(slice(t, 1, kObjChannel, 1), 1.0 / tau);
    const Tensor so = scale(slice(student_pred, 1, kObjChannel, 1), 1.0 / tau);
    const Tensor log_p1 = log_sigmoid(to), log_p0 = log_sigmoid(scale(to, -1.0));
    const Tensor log_q1 = log_sigmoid(so), log_q0 = log_sigmoid(scale(so, -1.0));
    kl = add(kl, sum(add(mul(exp(log_p1), sub(log_p1, log_q1)), mul(exp(log_p0), sub(log_p0, log_q0)))));
  }
  return scale(kl, tau * tau / static_cast<double>(n));
}

Tensor feature_loss(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps) {
  if (teacher_taps.size() != student_taps.size() || student_taps.empty())
    throw ShapeError("feature_loss: tap lists differ or are empty");
  Tensor total;
  for (std::size_t i = 0; i < student_taps.size(); ++i) {
    if (teacher_taps[i].shape() != student_taps[i].shape()) throw ShapeError("feature_loss: tap shapes differ");
    const Tensor term = sum(square(sub(student_taps[i], teacher_taps[i].detach())));
    total = total.defined() ? add(total, term) : term;
  }
  const double n = static_cast<double>(student_taps[0].size(0));
  return scale(total, 1.0 / (n * static_cast<double>(student_taps.size())));
}

QatLoss qat_total_loss(const ForwardResult& teacher, const ForwardResult& student,
                       const std::vector<BoxLabel>& labels, const QatConfig& cfg) {
  const Tensor kd = kd_loss(teacher.pred, student.pred, cfg.tau, cfg.kd_objectness);
  const Tensor feat = feature_loss(teacher.taps, student.taps);
  const Tensor det = detect_loss(student.pred, labels, cfg.loss_weights).total;
  QatLoss out;
  out.kd = kd.item();
  out.feat = feat.item();
  out.detect = det.item();
  out.total = add(add(scale(kd, cfg.beta_kl), scale(feat, cfg.beta_feat)), scale(det, cfg.beta_detect));
  return out;
}

namespace {

struct Batch {
  Tensor images;
  std::vector<BoxLabel> labels;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t start, std::size_t end,
                 bool flip, Rng* rng) {
  std::vector<Image> images;
  std::vector<std::vector<BoxLabel>> labels;
  for (std::size_t i = start; i < end; ++i) {
    images.push_back(data.images.at(order[i]));
    labels.push_back(data.labels.at(order[i]));
    if (flip && rng->bernoulli(0.5)) hflip(images.back(), labels.back());
  }
  std::vector<const Image*> image_ptrs;
  std::vector<const std::vector<BoxLabel>*> label_ptrs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    image_ptrs.push_back(&images[i]);
    label_ptrs.push_back(&labels[i]);
  }
  return Batch{images_to_tensor(image_ptrs), batch_labels(label_ptrs)};
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

bool finite(const QatLoss& l) {
  return std::isfinite(l.kd) && std::isfinite(l.feat) && std::isfinite(l.detect) && std::isfinite(l.total.item());
}

}  // namespace

QatResult run_qat(const Detector& teacher, const Dataset& calibration, const Dataset& val,
                  const std::vector<std::size_t>& val_indices, const QatConfig& cfg,
                  const QatEpochCallback& on_epoch, const EvalOptions& eval_opts) {
  cfg.validate();
  if (calibration.size() == 0) throw ValidationError("qat: empty calibration set");
  if (calibration.manifest.num_classes != teacher.config.num_classes && calibration.manifest.num_classes != 0)
    throw ValidationError("qat: calibration set and teacher disagree on the number of classes");

  std::vector<std::size_t> order(calibration.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  Detector student = attach_quantizers(teacher, cfg.weight_bits, cfg.act_bits, cfg.asymmetric_activations);
  {
    const Batch first = make_batch(calibration, order, 0, std::min(cfg.batch_size, order.size()), false, nullptr);
    calibrate_activation_quantizers(student, first.images);
  }

  Adam weight_opt(tensors_of(student.parameters()));
  Adam quant_opt(tensors_of(quantizer_parameters(student)));
  Rng rng(cfg.seed, 0x9a7);

  QatResult result;
  double best_score = -1.0;
  auto score = [&](QatEpochLog& log, bool last) {
    if (val_indices.empty()) return;
    if (!last && (cfg.eval_every == 0 || log.epoch % cfg.eval_every != 0)) return;
    const EvalResult r = evaluate(student, val, val_indices, eval_opts);
    log.evaluated = true;
    log.map = r.map_5095;
    log.map50 = r.map_50;
  };
  auto keep_if_best = [&](const QatEpochLog& log) {
    const double s = log.evaluated ? log.map : -0.5;
    if (s > best_score || (val_indices.empty() && log.epoch > 0)) {
      best_score = s;
      result.best = student.clone();
      result.best_epoch = log.epoch;
    }
  };

  {
    const auto t0 = std::chrono::steady_clock::now();
    QatEpochLog log;
    NoGradGuard guard;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch b = make_batch(calibration, order, start, end, false, nullptr);
      const QatLoss l = qat_total_loss(teacher.forward(b.images, BnMode::kEval),
                                       student.forward(b.images, BnMode::kEval), b.labels, cfg);
      const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
      log.kd += l.kd * w;
      log.feat += l.feat * w;
      log.detect += l.detect * w;
      log.total += l.total.item() * w;
    }
    score(log, cfg.epochs == 0);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    keep_if_best(log);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }

  const std::size_t steps_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    QatEpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch b = make_batch(calibration, order, start, end, cfg.hflip, &rng);
      ForwardResult tf;
      {
        NoGradGuard guard;
        tf = teacher.forward(b.images, BnMode::kEval);
      }
      const QatLoss l = qat_total_loss(tf, student.forward(b.images, cfg.freeze_bn ? BnMode::kEval : BnMode::kTrain), b.labels, cfg);
      if (!finite(l)) {
        Tape::current().clear();
        result.diverged = true;
        result.divergence = "non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                            std::to_string(start) + " (kd " + std::to_string(l.kd) + ", feat " +
                            std::to_string(l.feat) + ", detect " + std::to_string(l.detect) + ")";
        return result;
      }
      weight_opt.zero_grad();
      quant_opt.zero_grad();
      backward(l.total);
      if (!grads_finite(weight_opt.params()) || !grads_finite(quant_opt.params())) {
        result.diverged = true;
        result.divergence = "non-finite gradient at epoch " + std::to_string(epoch);
        return result;
      }
      const std::size_t step = weight_opt.steps();
      weight_opt.step(cosine_lr(cfg.lr, step, total_steps));
      quant_opt.step(cosine_lr(cfg.quantizer_lr, step, total_steps));
      clamp_quantizer_steps(student);
      const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
      log.kd += l.kd * w;
      log.feat += l.feat * w;
      log.detect += l.detect * w;
      log.total += l.total.item() * w;
    }
    score(log, epoch == cfg.epochs);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    keep_if_best(log);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

std::string qat_metrics_csv(const std::vector<QatEpochLog>& log) {
  std::string out = "epoch,L_KD,L_feat,L_detect,total,mAP,mAP50\n";
  char buf[256];
  for (const QatEpochLog& l : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,", l.epoch, l.kd, l.feat, l.detect, l.total);
    out += buf;
    if (l.evaluated) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", l.map, l.map50);
      out += buf;
    } else {
      out += ",\n";
    }
  }
  return out;
}

std::string qat_timing_csv(const std::vector<QatEpochLog>& log) {
  std::string out = "epoch,seconds\n";
  char buf[64];
  for (const QatEpochLog& l : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.3f\n", l.epoch, l.seconds);
    out += buf;
  }
  return out;
}

}  // namespace zsq
