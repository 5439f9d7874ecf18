#include "zsq/train.hpp"

#include <chrono>
#include <cmath>

#include "zsq/error.hpp"
#include "zsq/optim.hpp"
#include "zsq/random.hpp"

namespace zsq {

Detector train_teacher(const Dataset& data, const DetectorConfig& model_config, const TeacherConfig& config,
                       const EpochCallback& on_epoch) {
  const std::vector<std::size_t> train = data.train_indices();
  const std::vector<std::size_t> val = data.val_indices();
  if (train.empty()) throw ValidationError("train_teacher: empty training split");
  if (config.batch_size == 0 || config.epochs == 0) throw ValidationError("train_teacher: zero epochs or batch size");

  Detector model = Detector::build(model_config);
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  Adam opt(params);
  Rng rng(config.seed, 0x7ea);

  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  std::vector<std::size_t> order = train;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    TrainEpochLog log;
    log.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Image> images;
      std::vector<std::vector<BoxLabel>> labels;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(data.images[order[i]]);
        labels.push_back(data.labels[order[i]]);
        if (config.hflip && rng.bernoulli(0.5)) hflip(images.back(), labels.back());
      }
      std::vector<const Image*> image_ptrs;
      std::vector<const std::vector<BoxLabel>*> label_ptrs;
      for (std::size_t i = 0; i < images.size(); ++i) {
        image_ptrs.push_back(&images[i]);
        label_ptrs.push_back(&labels[i]);
      }
      const Tensor x = images_to_tensor(image_ptrs);
      const ForwardResult fr = model.forward(x, BnMode::kTrain);
      const DetectLoss loss = detect_loss(fr.pred, batch_labels(label_ptrs), config.loss_weights);
      const double value = loss.total.item();
      if (!std::isfinite(value)) {
        Tape::current().clear();
        throw DivergenceError("train_teacher: non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      opt.zero_grad();
      backward(loss.total);
      if (!grads_finite(params)) throw DivergenceError("train_teacher: non-finite gradient");
      const std::size_t step = opt.steps();
      double lr = cosine_lr(config.lr, step, total_steps);
      if (step < config.warmup_steps) lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
      opt.step(lr);
      const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
      log.loss += value * w;
      log.box += loss.box * w;
      log.conf += loss.conf * w;
      log.cls += loss.cls * w;
    }
    const bool last = epoch + 1 == config.epochs;
    if (!val.empty() && (last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0))) {
      const EvalResult r = evaluate(model, data, val);
      log.evaluated = true;
      log.map = r.map_5095;
      log.map50 = r.map_50;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(log);
  }
  return model;
}

}  // namespace zsq
