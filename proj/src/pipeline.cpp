#include "zsq/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "zsq/error.hpp"

namespace zsq {

std::vector<Method> baseline_methods() {
  return {{"real", LabelSource::kReal, true},
          {"adaptive", LabelSource::kAdaptive, false},
          {"multisample-in", LabelSource::kMultisample, true},
          {"multisample-out", LabelSource::kMultisample, false},
          {"tile-in", LabelSource::kTile, true},
          {"tile-out", LabelSource::kTile, false},
          {"gaussian", LabelSource::kGaussian, false}};
}

Method parse_method(const std::string& name) {
  for (const Method& m : baseline_methods()) {
    if (m.name == name) return m;
  }
  throw ValidationError("unknown calibration method '" + name + "'");
}

Method configured_method(const Config& config) {
  const LabelSource s = parse_label_source(config.calibration.label_source);
  const bool in = s == LabelSource::kReal || config.calibration.in_distribution;
  for (const Method& m : baseline_methods()) {
    if (m.source == s && (m.in_distribution == in || s == LabelSource::kAdaptive || s == LabelSource::kGaussian))
      return m;
  }
  throw ValidationError("no calibration method for label source '" + config.calibration.label_source + "'");
}

LabelPlan make_label_plan(const Method& method, const Config& config, const Dataset& real) {
  LabelPlan plan;
  plan.source = method.source;
  plan.in_distribution = method.in_distribution;
  plan.tile_grid = config.calibration.tile_grid;
  plan.multisample_count = config.calibration.multisample_count;
  if (method.uses_count_distribution()) {
    // Counts from the training split only.
    for (std::size_t i : real.train_indices()) {
      const std::size_t k = real.labels[i].size();
      if (plan.label_count_histogram.size() <= k) plan.label_count_histogram.resize(k + 1, 0);
      ++plan.label_count_histogram[k];
    }
  }
  if (method.source == LabelSource::kReal) plan.real = &real;
  return plan;
}

CalibrationSet synthesize_calibration(const Detector& teacher, const Config& config, const Method& method,
                                      std::size_t count, const Dataset& real) {
  const LabelPlan plan = make_label_plan(method, config, real);
  CalibrationSet set = generate_calibration_set(teacher, config.synthesis, count, plan);
  set.data.manifest.source = method.name;
  set.data.manifest.class_names = real.manifest.class_names;
  return set;
}

QatResult quantize_student(const Detector& teacher, const Dataset& calibration, const Dataset& real,
                           const Config& config, const QatEpochCallback& on_epoch) {
  return run_qat(teacher, calibration, real, real.val_indices(), config.qat, on_epoch, config.eval);
}

CellResult run_cell(const Detector& teacher, const Dataset& real, const Config& config, const Method& method,
                    const std::string& bits, bool with_detect, std::size_t count, std::uint64_t seed_offset) {
  CellResult cell;
  cell.method = method;
  cell.bits = bits;
  cell.with_detect = with_detect;
  Config c = config;
  c.seed = config.seed + seed_offset;
  c.propagate();
  cell.seed = c.seed;
  if (!with_detect) c.qat.beta_detect = 0.0;
  try {
    std::tie(c.qat.weight_bits, c.qat.act_bits) = parse_bits(bits);
    const CalibrationSet calib = synthesize_calibration(teacher, c, method, count, real);
    const QatResult r = quantize_student(teacher, calib.data, real, c);
    if (r.diverged) {
      cell.diverged = true;
      cell.error = r.divergence;
      return cell;
    }
    for (const QatEpochLog& l : r.log) {
      if (l.epoch == r.best_epoch) {
        cell.map = l.map;
        cell.map50 = l.map50;
      }
    }
  } catch (const DivergenceError& e) {
    cell.diverged = true;
    cell.error = e.what();
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  return cell;
}

namespace {

std::string row_name(const CellResult& c) {
  return c.with_detect ? c.method.name : c.method.name + " w/o L_detect";
}

const char* yes_no(bool v) { return v ? "yes" : "no"; }

}  // namespace

std::string baseline_table_csv(const std::vector<CellResult>& cells) {
  struct Acc {
    const CellResult* first = nullptr;
    double map = 0, map50 = 0;
    std::size_t n = 0;
    bool diverged = false, failed = false;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> acc;
  for (const CellResult& c : cells) {
    const std::string key = row_name(c) + "|" + c.bits;
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) {
      order.push_back(key);
      it->second.first = &c;
    }
    Acc& a = it->second;
    if (c.diverged) {
      a.diverged = true;
    } else if (!c.error.empty()) {
      a.failed = true;
    } else {
      a.map += c.map;
      a.map50 += c.map50;
      ++a.n;
    }
  }
  std::string out = "method,info,distri,bits,mAP,mAP50\n";
  char buf[128];
  for (const std::string& key : order) {
    const Acc& a = acc.at(key);
    const CellResult& c = *a.first;
    out += row_name(c) + "," + yes_no(c.method.uses_label_info()) + "," + yes_no(c.method.uses_count_distribution()) +
           "," + c.bits + ",";
    if (a.diverged) {
      out += "diverged,diverged\n";
    } else if (a.failed || a.n == 0) {
      out += "failed,failed\n";
    } else {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", a.map / static_cast<double>(a.n), a.map50 / static_cast<double>(a.n));
      out += buf;
    }
  }
  return out;
}

std::string cell_results_csv(const std::vector<CellResult>& cells) {
  std::string out = "method,bits,detect,seed,status,mAP,mAP50,error\n";
  char buf[128];
  for (const CellResult& c : cells) {
    const char* status = c.diverged ? "diverged" : (c.error.empty() ? "ok" : "failed");
    std::snprintf(buf, sizeof buf, ",%llu,%s,%.6f,%.6f,", static_cast<unsigned long long>(c.seed), status, c.map,
                  c.map50);
    std::string err = c.error;
    for (char& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out += c.method.name + "," + c.bits + "," + yes_no(c.with_detect) + buf + err + "\n";
  }
  return out;
}

}  // namespace zsq
