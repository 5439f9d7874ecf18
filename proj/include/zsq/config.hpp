#pragma once
// Pipeline configuration: one JSON document with a section per stage.
// Absent keys take their defaults, unknown keys are rejected, and a type
// mismatch names the offending key. Key reference in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zsq/data.hpp"
#include "zsq/detector.hpp"
#include "zsq/eval.hpp"
#include "zsq/qat.hpp"
#include "zsq/synthesis.hpp"
#include "zsq/train.hpp"

namespace zsq {

// What `synthesize` produces, on top of the optimization settings.
struct CalibrationJob {
  std::size_t num_images = 2000;
  std::string label_source = "adaptive";  // adaptive | tile | multisample | gaussian | real
  bool in_distribution = false;
  std::size_t tile_grid = 2;
  std::size_t multisample_count = 3;
};

struct CompareConfig {
  std::vector<std::string> bits = {"w6a6"};
  std::size_t num_images = 256;
  std::size_t seeds = 1;
  bool without_detect = true;  // also run every cell with beta_detect = 0
};

struct Config {
  std::uint64_t seed = 0;
  DatasetSpec data;
  DetectorConfig model;
  TeacherConfig teacher;
  SynthesisConfig synthesis;
  CalibrationJob calibration;
  QatConfig qat;
  EvalOptions eval;
  CompareConfig compare;

  // Copies seed, image size and class count into the stage configs.
  void propagate();
  void validate() const;
};

Config default_config();
// Throws ParseError for malformed JSON and ValidationError for unknown keys,
// type mismatches and out-of-range values.
Config parse_config(const std::string& json_text, const std::string& origin);
Config load_config(const std::filesystem::path& path);
// Every key, sorted, pretty-printed. parse_config(config_to_json(c)) == c.
std::string config_to_json(const Config& config);
std::string config_hash(const Config& config);
// Hash of the sections that fix what a checkpoint means: seed, data and model.
std::string task_config_hash(const Config& config);
// Sets one dotted key ("qat.tau") from a command-line value. The value is read
// as JSON when possible and as a bare string otherwise.
void apply_override(Config& config, const std::string& key, const std::string& value);

// "w4a8" -> {4, 8}; "fp" -> {32, 32}.
std::pair<int, int> parse_bits(const std::string& text);

}  // namespace zsq
