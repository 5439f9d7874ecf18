// zsq: command-line driver for the quantization pipeline.
//
//   zsq --out DIR [--config FILE] [--set key=value]... [--seed N] <command> [options]
//
// Artifacts under DIR:
//   data/            gen-data
//   teacher/         train-teacher
//   calib/<name>/    synthesize
//   qat/<name>/      qat
//   eval/<name>/     eval
//   compare/         compare-baselines
//   report.txt       report
// Every command also writes run.json into its artifact directory.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "zsq/checkpoint.hpp"
#include "zsq/config.hpp"
#include "zsq/error.hpp"
#include "zsq/io.hpp"
#include "zsq/pipeline.hpp"
#include "zsq/train.hpp"

namespace fs = std::filesystem;
using namespace zsq;
using nlohmann::ordered_json;

namespace {

struct Globals {
  fs::path out;
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> argv;
};

Config resolve_config(const Globals& g, const std::vector<std::pair<std::string, std::string>>& flag_overrides) {
  Config c = g.config_path.empty() ? default_config() : load_config(g.config_path);
  for (const std::string& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    apply_override(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : flag_overrides) apply_override(c, k, v);
  if (g.seed) apply_override(c, "seed", std::to_string(*g.seed));
  c.validate();
  return c;
}

fs::path require(const fs::path& path, const std::string& what, const std::string& command) {
  if (!fs::exists(path))
    throw ValidationError("missing " + what + " at " + path.string() + "; run `zsq --out <DIR> " + command + "` first");
  return path;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// A dataset directory is rewritten from scratch so stale images never linger.
void reset_dataset_dir(const fs::path& dir) {
  for (const char* sub : {"images", "labels"}) fs::remove_all(dir / sub);
  fs::remove(dir / "manifest.json");
  make_dir(dir);
}

void write_run_json(const fs::path& dir, const std::string& command, const Config& config, const Globals& g,
                    const std::vector<std::pair<std::string, fs::path>>& inputs) {
  ordered_json j;
  j["command"] = command;
  j["argv"] = g.argv;
  j["seed"] = config.seed;
  j["config_hash"] = config_hash(config);
  j["config"] = nlohmann::json::parse(config_to_json(config));
  ordered_json in = ordered_json::object();
  for (const auto& [name, path] : inputs) in[name] = {{"path", path.generic_string()}, {"hash", content_hash(path)}};
  j["inputs"] = in;
  write_file(dir / "run.json", j.dump(2) + "\n");
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const Globals& g, const Config& c) {
  const fs::path dir = g.out / "data";
  reset_dataset_dir(dir);
  const Dataset d = generate_dataset(c.data);
  save_dataset(d, dir);
  write_run_json(dir, "gen-data", c, g, {});
  std::printf("wrote %zu images (%zu train) to %s\n", d.size(), d.manifest.train_count, dir.string().c_str());
}

void cmd_train_teacher(const Globals& g, const Config& c) {
  const fs::path data_dir = require(g.out / "data" / "manifest.json", "dataset", "gen-data").parent_path();
  const Dataset d = load_dataset(data_dir);
  const fs::path dir = g.out / "teacher";
  make_dir(dir);
  std::string log = "epoch,loss,box,conf,cls,mAP,mAP50\n", timing = "epoch,seconds\n";
  double map = 0, map50 = 0;
  const Detector t = train_teacher(d, c.model, c.teacher, [&](const TrainEpochLog& l) {
    log += std::to_string(l.epoch) + "," + fmt(l.loss) + "," + fmt(l.box) + "," + fmt(l.conf) + "," + fmt(l.cls) + "," +
           (l.evaluated ? fmt(l.map) + "," + fmt(l.map50) : std::string(",")) + "\n";
    timing += std::to_string(l.epoch) + "," + fmt(l.seconds, "%.3f") + "\n";
    if (l.evaluated) {
      map = l.map;
      map50 = l.map50;
    }
    std::fprintf(stderr, "epoch %zu loss %.4f%s (%.1fs)\n", l.epoch, l.loss,
                 l.evaluated ? (" mAP " + fmt(l.map, "%.4f") + " mAP50 " + fmt(l.map50, "%.4f")).c_str() : "",
                 l.seconds);
  });
  CheckpointMeta meta;
  meta.kind = "teacher";
  meta.seed = c.seed;
  meta.config_hash = task_config_hash(c);
  meta.epoch = c.teacher.epochs;
  meta.metrics = {{"map", map}, {"map50", map50}};
  save_checkpoint(t, meta, dir / "teacher.ckpt");
  write_file(dir / "train_log.csv", log);
  write_file(dir / "timing.csv", timing);
  const EvalResult r = evaluate(t, d, d.val_indices(), c.eval);
  write_file(dir / "eval.csv", eval_csv(r, d.manifest.class_names));
  write_run_json(dir, "train-teacher", c, g, {{"data", data_dir}});
  std::printf("%s", eval_summary(r, d.manifest.class_names).c_str());
}

Checkpoint load_teacher(const Globals& g) {
  return load_checkpoint(require(g.out / "teacher" / "teacher.ckpt", "teacher checkpoint", "train-teacher"));
}

void cmd_synthesize(const Globals& g, const Config& c, const std::string& name_flag) {
  const fs::path data_dir = require(g.out / "data" / "manifest.json", "dataset", "gen-data").parent_path();
  const Dataset real = load_dataset(data_dir);
  const Checkpoint teacher = load_teacher(g);
  const Method method = configured_method(c);
  const std::string name = name_flag.empty() ? method.name : name_flag;
  const fs::path dir = g.out / "calib" / name;
  reset_dataset_dir(dir);
  const CalibrationSet set = synthesize_calibration(teacher.model, c, method, c.calibration.num_images, real);
  save_dataset(set.data, dir);
  std::string report = "first_image,size,bns_initial,bns_final,objective_first,objective_last\n";
  for (const BatchReport& b : set.batches) {
    report += std::to_string(b.first_image) + "," + std::to_string(b.size) + "," + fmt(b.bns_initial) + "," +
              fmt(b.bns_final) + "," + (b.objective_trace.empty() ? "," : fmt(b.objective_trace.front()) + "," +
                                                                             fmt(b.objective_trace.back())) +
              "\n";
  }
  write_file(dir / "synthesis.csv", report);
  write_run_json(dir, "synthesize", c, g, {{"data", data_dir}, {"teacher", g.out / "teacher" / "teacher.ckpt"}});
  std::printf("wrote %zu %s images to %s\n", set.data.size(), method.name.c_str(), dir.string().c_str());
}

void cmd_qat(const Globals& g, const Config& c, const std::string& calib_name, const std::string& name_flag,
             const std::string& bits, int& exit_code) {
  const fs::path data_dir = require(g.out / "data" / "manifest.json", "dataset", "gen-data").parent_path();
  const Dataset real = load_dataset(data_dir);
  const Checkpoint teacher = load_teacher(g);
  const fs::path calib_dir =
      require(g.out / "calib" / calib_name / "manifest.json", "calibration set '" + calib_name + "'",
              "synthesize --name " + calib_name)
          .parent_path();
  const Dataset calib = load_dataset(calib_dir);
  const std::string name = name_flag.empty() ? calib_name + "-" + bits : name_flag;
  const fs::path dir = g.out / "qat" / name;
  make_dir(dir);
  const QatResult r = quantize_student(teacher.model, calib, real, c, [](const QatEpochLog& l) {
    std::fprintf(stderr, "epoch %zu total %.4f kd %.4f feat %.4f det %.4f%s (%.1fs)\n", l.epoch, l.total, l.kd, l.feat,
                 l.detect,
                 l.evaluated ? (" mAP " + fmt(l.map, "%.4f") + " mAP50 " + fmt(l.map50, "%.4f")).c_str() : "",
                 l.seconds);
  });
  CheckpointMeta meta;
  meta.kind = "student";
  meta.seed = c.seed;
  meta.config_hash = task_config_hash(c);
  meta.epoch = r.best_epoch;
  for (const QatEpochLog& l : r.log) {
    if (l.epoch == r.best_epoch && l.evaluated) meta.metrics = {{"map", l.map}, {"map50", l.map50}};
  }
  save_checkpoint(r.best, meta, dir / "student.ckpt");
  write_file(dir / "metrics.csv", qat_metrics_csv(r.log));
  write_file(dir / "timing.csv", qat_timing_csv(r.log));
  write_run_json(dir, "qat", c, g,
                 {{"data", data_dir}, {"teacher", g.out / "teacher" / "teacher.ckpt"}, {"calibration", calib_dir}});
  if (r.diverged) {
    std::fprintf(stderr, "qat diverged: %s; kept epoch %zu\n", r.divergence.c_str(), r.best_epoch);
    exit_code = 3;
    return;
  }
  std::printf("best epoch %zu: mAP %.4f mAP50 %.4f -> %s\n", r.best_epoch, meta.metrics["map"], meta.metrics["map50"],
              (dir / "student.ckpt").string().c_str());
}

void cmd_eval(const Globals& g, const Config& c, const std::string& checkpoint_flag, const std::string& name_flag,
              bool force) {
  const fs::path data_dir = require(g.out / "data" / "manifest.json", "dataset", "gen-data").parent_path();
  const Dataset real = load_dataset(data_dir);
  const fs::path ckpt_path = checkpoint_flag.empty() ? g.out / "teacher" / "teacher.ckpt" : fs::path(checkpoint_flag);
  const Checkpoint ck = load_checkpoint(require(ckpt_path, "checkpoint", checkpoint_flag.empty() ? "train-teacher" : "qat"));
  if (ck.meta.config_hash != task_config_hash(c) && !force)
    throw ValidationError(ckpt_path.string() + " was trained under a different data/model config (hash " +
                          ck.meta.config_hash + ", current " + task_config_hash(c) + "); pass --force to evaluate anyway");
  const std::string name = name_flag.empty() ? ckpt_path.stem().string() : name_flag;
  const fs::path dir = g.out / "eval" / name;
  make_dir(dir);
  const EvalResult r = evaluate(ck.model, real, real.val_indices(), c.eval);
  write_file(dir / "eval.csv", eval_csv(r, real.manifest.class_names));
  write_file(dir / "summary.txt", eval_summary(r, real.manifest.class_names));
  write_run_json(dir, "eval", c, g, {{"data", data_dir}, {"checkpoint", ckpt_path}});
  std::printf("%s", eval_summary(r, real.manifest.class_names).c_str());
}

void cmd_compare(const Globals& g, const Config& c, const std::vector<std::string>& method_names) {
  const fs::path data_dir = require(g.out / "data" / "manifest.json", "dataset", "gen-data").parent_path();
  const Dataset real = load_dataset(data_dir);
  const Checkpoint teacher = load_teacher(g);
  std::vector<Method> methods;
  if (method_names.empty()) {
    methods = baseline_methods();
  } else {
    for (const auto& n : method_names) methods.push_back(parse_method(n));
  }
  const fs::path dir = g.out / "compare";
  make_dir(dir);
  std::vector<CellResult> cells;
  for (const std::string& bits : c.compare.bits) {
    for (bool with_detect : {true, false}) {
      if (!with_detect && !c.compare.without_detect) continue;
      for (const Method& m : methods) {
        for (std::uint64_t s = 0; s < c.compare.seeds; ++s) {
          std::fprintf(stderr, "cell %s %s%s seed %llu ...\n", m.name.c_str(), bits.c_str(),
                       with_detect ? "" : " w/o L_detect", static_cast<unsigned long long>(c.seed + s));
          cells.push_back(run_cell(teacher.model, real, c, m, bits, with_detect, c.compare.num_images, s));
          const CellResult& r = cells.back();
          if (r.diverged) {
            std::fprintf(stderr, "  diverged: %s\n", r.error.c_str());
          } else if (!r.error.empty()) {
            std::fprintf(stderr, "  failed: %s\n", r.error.c_str());
          } else {
            std::fprintf(stderr, "  mAP %.4f mAP50 %.4f\n", r.map, r.map50);
          }
          write_file(dir / "cells.csv", cell_results_csv(cells));
          write_file(dir / "baselines.csv", baseline_table_csv(cells));
        }
      }
    }
  }
  write_run_json(dir, "compare-baselines", c, g, {{"data", data_dir}, {"teacher", g.out / "teacher" / "teacher.ckpt"}});
  std::printf("%s", read_file(dir / "baselines.csv").c_str());
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t comma; (comma = line.find(',', start)) != std::string::npos; start = comma + 1)
      cells.push_back(line.substr(start, comma - start));
    cells.push_back(line.substr(start));
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string render_table(const std::string& title, const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return "";
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  auto rule = [&] {
    std::string s = "+";
    for (std::size_t w : width) s += std::string(w + 2, '-') + "+";
    return s + "\n";
  };
  std::string out = title + "\n" + rule();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::string line = "|";
    for (std::size_t i = 0; i < width.size(); ++i) {
      const std::string cell = i < rows[k].size() ? rows[k][i] : "";
      line += " " + cell + std::string(width[i] - cell.size(), ' ') + " |";
    }
    out += line + "\n";
    if (k == 0) out += rule();
  }
  return out + rule() + "\n";
}

void cmd_report(const Globals& g) {
  std::string out;
  const fs::path teacher_eval = g.out / "teacher" / "eval.csv";
  if (fs::exists(teacher_eval)) out += render_table("Teacher (full precision), validation split", parse_csv(read_file(teacher_eval)));

  std::vector<std::vector<std::string>> qat_rows = {{"run", "best epoch", "PTQ mAP", "PTQ mAP50", "mAP", "mAP50"}};
  if (fs::exists(g.out / "qat")) {
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(g.out / "qat"))
      if (fs::exists(e.path() / "metrics.csv")) runs.push_back(e.path());
    std::sort(runs.begin(), runs.end());
    for (const fs::path& run : runs) {
      const auto rows = parse_csv(read_file(run / "metrics.csv"));
      std::vector<std::string> ptq = {"", ""}, best = {"", ""};
      std::string best_epoch = "-";
      double best_map = -1;
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() < 7 || rows[i][5].empty()) continue;
        if (rows[i][0] == "0") ptq = {rows[i][5], rows[i][6]};
        const double m = std::stod(rows[i][5]);
        if (m > best_map) {
          best_map = m;
          best = {rows[i][5], rows[i][6]};
          best_epoch = rows[i][0];
        }
      }
      qat_rows.push_back({run.filename().string(), best_epoch, ptq[0], ptq[1], best[0], best[1]});
    }
  }
  if (qat_rows.size() > 1) out += render_table("Quantization-aware training runs", qat_rows);

  const fs::path baselines = g.out / "compare" / "baselines.csv";
  if (fs::exists(baselines)) out += render_table("Data-free calibration baselines", parse_csv(read_file(baselines)));

  if (out.empty()) throw ValidationError("nothing to report under " + g.out.string() + "; run train-teacher, qat or compare-baselines first");
  write_file(g.out / "report.txt", out);
  std::printf("%s", out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot quantization toolkit for grid object detectors"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.emplace_back(argv[i]);
  std::string out;
  app.add_option("--out", out, "Artifact root directory")->required();
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set qat.tau=2")->take_all();
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every stage");

  auto* gen = app.add_subcommand("gen-data", "Render the labeled shapes dataset");
  std::size_t num_images = 0;
  auto* num_images_opt = gen->add_option("--num-images", num_images, "Dataset size");

  auto* train = app.add_subcommand("train-teacher", "Train the full-precision teacher");
  std::size_t epochs = 0;
  auto* epochs_opt = train->add_option("--epochs", epochs, "Training epochs");

  auto* synth = app.add_subcommand("synthesize", "Synthesize a labeled calibration set from the teacher");
  std::string mode, synth_name;
  std::size_t count = 0;
  bool in_dist = false;
  auto* mode_opt = synth->add_option("--mode", mode, "adaptive | tile | multisample | gaussian | real");
  auto* count_opt = synth->add_option("--count", count, "Number of images");
  auto* in_opt = synth->add_flag("--in-distribution", in_dist, "Draw label counts from the real histogram");
  synth->add_option("--name", synth_name, "Output name under calib/ (default: method name)");

  auto* qat = app.add_subcommand("qat", "Quantization-aware training against the teacher");
  std::string bits = "w4a8", calib_name = "adaptive", qat_name;
  bool no_detect = false, no_distill = false;
  qat->add_option("--bits", bits, "Bit setting, e.g. w4a8")->capture_default_str();
  qat->add_option("--calib", calib_name, "Calibration set name under calib/")->capture_default_str();
  qat->add_option("--name", qat_name, "Output name under qat/ (default: <calib>-<bits>)");
  auto* qat_epochs_opt = qat->add_option("--epochs", epochs, "QAT epochs");
  qat->add_flag("--no-detect", no_detect, "Drop the detection loss term");
  qat->add_flag("--no-distill", no_distill, "Drop the KD and feature loss terms");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  std::string checkpoint, eval_name;
  bool force = false;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint path (default: the teacher)");
  ev->add_option("--name", eval_name, "Output name under eval/");
  ev->add_flag("--force", force, "Evaluate even if the checkpoint's config hash differs");

  auto* cmp = app.add_subcommand("compare-baselines", "Run the calibration-method grid");
  std::vector<std::string> methods, grid_bits;
  cmp->add_option("--methods", methods, "Subset of methods (default: all)");
  auto* grid_bits_opt = cmp->add_option("--bits", grid_bits, "Bit settings (default: compare.bits)");

  app.add_subcommand("report", "Render collected CSVs as plain-text tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  int exit_code = 0;
  try {
    g.out = out;
    if (*seed_opt) g.seed = seed;
    std::vector<std::pair<std::string, std::string>> flags;
    if (*num_images_opt) flags.emplace_back("data.num_images", std::to_string(num_images));
    if (*epochs_opt) flags.emplace_back("teacher.epochs", std::to_string(epochs));
    if (*mode_opt) flags.emplace_back("calibration.label_source", mode);
    if (*count_opt) flags.emplace_back("calibration.num_images", std::to_string(count));
    if (*in_opt) flags.emplace_back("calibration.in_distribution", "true");
    if (*qat_epochs_opt) flags.emplace_back("qat.epochs", std::to_string(epochs));
    if (qat->parsed()) {
      const auto [w, a] = parse_bits(bits);
      flags.emplace_back("qat.weight_bits", std::to_string(w));
      flags.emplace_back("qat.act_bits", std::to_string(a));
      if (no_detect) flags.emplace_back("qat.beta_detect", "0");
      if (no_distill) {
        flags.emplace_back("qat.beta_kl", "0");
        flags.emplace_back("qat.beta_feat", "0");
      }
    }
    if (*grid_bits_opt) {
      nlohmann::json arr = grid_bits;
      flags.emplace_back("compare.bits", arr.dump());
    }
    const Config c = resolve_config(g, flags);
    make_dir(g.out);

    if (gen->parsed()) cmd_gen_data(g, c);
    else if (train->parsed()) cmd_train_teacher(g, c);
    else if (synth->parsed()) cmd_synthesize(g, c, synth_name);
    else if (qat->parsed()) cmd_qat(g, c, calib_name, qat_name, bits, exit_code);
    else if (ev->parsed()) cmd_eval(g, c, checkpoint, eval_name, force);
    else if (cmp->parsed()) cmd_compare(g, c, methods);
    else cmd_report(g);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.kind()) {
      case ErrorKind::kUsage: return 1;
      case ErrorKind::kDivergence: return 3;
      default: return 2;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return exit_code;
}
