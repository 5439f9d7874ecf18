#pragma once
// Calibration methods and baseline-grid cells shared by the CLI and the
// acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "zsq/config.hpp"
#include "zsq/qat.hpp"
#include "zsq/synthesis.hpp"

namespace zsq {

struct Method {
  std::string name;  // real | adaptive | multisample-in | multisample-out | tile-in | tile-out | gaussian
  LabelSource source = LabelSource::kAdaptive;
  bool in_distribution = false;

  bool uses_label_info() const { return source == LabelSource::kReal; }
  bool uses_count_distribution() const { return source == LabelSource::kReal || in_distribution; }
};

std::vector<Method> baseline_methods();
Method parse_method(const std::string& name);
// The method the calibration section of a config describes.
Method configured_method(const Config& config);

LabelPlan make_label_plan(const Method& method, const Config& config, const Dataset& real);

CalibrationSet synthesize_calibration(const Detector& teacher, const Config& config, const Method& method,
                                      std::size_t count, const Dataset& real);

// QAT at config.qat settings, scored on the real validation split.
QatResult quantize_student(const Detector& teacher, const Dataset& calibration, const Dataset& real,
                           const Config& config, const QatEpochCallback& on_epoch = {});

struct CellResult {
  Method method;
  std::string bits;
  bool with_detect = true;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string error;  // set when the cell failed for another reason
  double map = 0, map50 = 0;
};

// One grid cell: synthesize `count` images with seed config.seed + seed_offset,
// then QAT at `bits`, optionally without the detection term.
CellResult run_cell(const Detector& teacher, const Dataset& real, const Config& config, const Method& method,
                    const std::string& bits, bool with_detect, std::size_t count, std::uint64_t seed_offset);

// One row per (method, bits, detect) with seed-averaged metrics; cells where
// any seed diverged show "diverged", failed cells "failed".
std::string baseline_table_csv(const std::vector<CellResult>& cells);
std::string cell_results_csv(const std::vector<CellResult>& cells);

}  // namespace zsq
