#include <gtest/gtest.h>

#include "zsq/error.hpp"
#include "zsq/pipeline.hpp"

namespace zsq {
namespace {

Config tiny_config() {
  Config c = default_config();
  c.seed = 3;
  c.data.num_images = 24;
  c.data.image_size = 16;
  c.data.num_classes = 2;
  c.data.max_objects = 2;
  c.data.min_size = 0.3;
  c.data.max_size = 0.45;
  c.model.channels = {3, 4, 4};
  c.synthesis.iterations = 3;
  c.synthesis.low_res_iterations = 2;
  c.synthesis.low_resolution = 8;
  c.synthesis.batch_size = 4;
  c.qat.epochs = 1;
  c.qat.batch_size = 4;
  c.propagate();
  return c;
}

TEST(Methods, TableFlags) {
  EXPECT_TRUE(parse_method("real").uses_label_info());
  EXPECT_TRUE(parse_method("real").uses_count_distribution());
  EXPECT_FALSE(parse_method("adaptive").uses_label_info());
  EXPECT_FALSE(parse_method("adaptive").uses_count_distribution());
  EXPECT_TRUE(parse_method("tile-in").uses_count_distribution());
  EXPECT_FALSE(parse_method("tile-out").uses_count_distribution());
  EXPECT_TRUE(parse_method("multisample-in").uses_count_distribution());
  EXPECT_FALSE(parse_method("gaussian").uses_count_distribution());
  EXPECT_THROW(parse_method("tile"), ValidationError);
  EXPECT_EQ(baseline_methods().size(), 7u);
}

TEST(Methods, ConfiguredFromCalibrationSection) {
  Config c = default_config();
  EXPECT_EQ(configured_method(c).name, "adaptive");
  c.calibration.label_source = "tile";
  EXPECT_EQ(configured_method(c).name, "tile-out");
  c.calibration.in_distribution = true;
  EXPECT_EQ(configured_method(c).name, "tile-in");
  c.calibration.label_source = "multisample";
  EXPECT_EQ(configured_method(c).name, "multisample-in");
  c.calibration.label_source = "real";
  EXPECT_EQ(configured_method(c).name, "real");
}

TEST(LabelPlan, HistogramComesFromTheTrainSplitOnly) {
  const Config c = tiny_config();
  const Dataset real = generate_dataset(c.data);
  const LabelPlan plan = make_label_plan(parse_method("tile-in"), c, real);
  std::size_t total = 0;
  for (std::size_t v : plan.label_count_histogram) total += v;
  EXPECT_EQ(total, real.train_indices().size());
  EXPECT_TRUE(make_label_plan(parse_method("tile-out"), c, real).label_count_histogram.empty());
  EXPECT_EQ(make_label_plan(parse_method("real"), c, real).real, &real);
}

TEST(Grid, SingleCellEqualsDirectRun) {
  const Config c = tiny_config();
  const Dataset real = generate_dataset(c.data);
  const Detector teacher = Detector::build(c.model);
  const CellResult cell = run_cell(teacher, real, c, parse_method("tile-out"), "w6a6", true, 8, 1);
  ASSERT_TRUE(cell.error.empty()) << cell.error;
  EXPECT_EQ(cell.seed, 4u);

  Config direct = c;
  direct.seed = 4;
  direct.propagate();
  direct.qat.weight_bits = 6;
  direct.qat.act_bits = 6;
  const CalibrationSet set = synthesize_calibration(teacher, direct, parse_method("tile-out"), 8, real);
  const QatResult r = quantize_student(teacher, set.data, real, direct);
  EXPECT_EQ(cell.map, r.log[r.best_epoch].map);
  EXPECT_EQ(cell.map50, r.log[r.best_epoch].map50);
}

TEST(Grid, WithoutDetectZeroesTheDetectionWeight) {
  const Config c = tiny_config();
  const Dataset real = generate_dataset(c.data);
  const Detector teacher = Detector::build(c.model);
  Config direct = c;
  direct.qat.beta_detect = 0;
  direct.qat.weight_bits = 4;
  direct.qat.act_bits = 8;
  const CalibrationSet set = synthesize_calibration(teacher, direct, parse_method("gaussian"), 8, real);
  const QatResult r = quantize_student(teacher, set.data, real, direct);
  const CellResult cell = run_cell(teacher, real, c, parse_method("gaussian"), "w4a8", false, 8, 0);
  EXPECT_EQ(cell.map, r.log[r.best_epoch].map);
}

TEST(Grid, FailureIsRecordedNotThrown) {
  const Config c = tiny_config();
  const Dataset real = generate_dataset(c.data);
  const Detector teacher = Detector::build(c.model);
  const CellResult cell = run_cell(teacher, real, c, parse_method("adaptive"), "w9x9", true, 8, 0);
  EXPECT_FALSE(cell.error.empty());
  EXPECT_FALSE(cell.diverged);
}

TEST(Grid, NanTeacherMarksTheCellDiverged) {
  const Config c = tiny_config();
  const Dataset real = generate_dataset(c.data);
  Detector teacher = Detector::build(c.model);
  teacher.blocks.back().bn.running_var.data()[0] = -1.0;
  const CellResult cell = run_cell(teacher, real, c, parse_method("gaussian"), "w4a8", true, 8, 0);
  EXPECT_TRUE(cell.diverged);
}

CellResult fake_cell(const std::string& method, bool detect, double map, double map50) {
  CellResult c;
  c.method = parse_method(method);
  c.bits = "w4a8";
  c.with_detect = detect;
  c.map = map;
  c.map50 = map50;
  return c;
}

TEST(BaselineTable, AveragesSeedsAndFlagsFailures) {
  std::vector<CellResult> cells = {fake_cell("adaptive", true, 0.5, 0.9), fake_cell("adaptive", true, 0.7, 0.7),
                                   fake_cell("gaussian", true, 0, 0), fake_cell("adaptive", false, 0.25, 0.5),
                                   fake_cell("tile-in", true, 0, 0)};
  cells[2].diverged = true;
  cells[2].error = "non-finite loss";
  cells[4].error = "disk full, twice";
  EXPECT_EQ(baseline_table_csv(cells),
            "method,info,distri,bits,mAP,mAP50\n"
            "adaptive,no,no,w4a8,0.600000,0.800000\n"
            "gaussian,no,no,w4a8,diverged,diverged\n"
            "adaptive w/o L_detect,no,no,w4a8,0.250000,0.500000\n"
            "tile-in,no,yes,w4a8,failed,failed\n");
  const std::string per_cell = cell_results_csv(cells);
  EXPECT_NE(per_cell.find("tile-in,w4a8,yes,0,failed,0.000000,0.000000,disk full; twice\n"), std::string::npos);
  EXPECT_NE(per_cell.find("gaussian,w4a8,yes,0,diverged,"), std::string::npos);
}

}  // namespace
}  // namespace zsq
