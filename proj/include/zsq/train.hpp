#pragma once
// Full-precision teacher training on a labeled dataset.

#include <functional>

#include "zsq/data.hpp"
#include "zsq/detector.hpp"
#include "zsq/eval.hpp"

namespace zsq {

struct TeacherConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  std::size_t warmup_steps = 100;
  bool hflip = true;
  std::uint64_t seed = 0;
  DetectLossWeights loss_weights;
  std::size_t eval_every = 5;  // epochs between validation passes; the last epoch always evaluates
};

struct TrainEpochLog {
  std::size_t epoch = 0;
  double loss = 0, box = 0, conf = 0, cls = 0;
  bool evaluated = false;
  double map = 0, map50 = 0;
  double seconds = 0;
};

using EpochCallback = std::function<void(const TrainEpochLog&)>;

// Trains from a fresh build_model(model_config). Throws DivergenceError on a
// non-finite loss or gradient.
Detector train_teacher(const Dataset& data, const DetectorConfig& model_config, const TeacherConfig& config,
                       const EpochCallback& on_epoch = {});

}  // namespace zsq
