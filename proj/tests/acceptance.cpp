// End-to-end acceptance run. Prints one line per criterion:
//   criterion N: PASS|FAIL  <measurements>
// Exit status is nonzero when any selected criterion fails.
//
// ZSQ_ACCEPTANCE_ONLY=1,2,3   run a subset (others print SKIP)
// ZSQ_ACCEPTANCE_DIR=path     scratch directory for the CLI runs

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"
#include "zsq/checkpoint.hpp"
#include "zsq/config.hpp"
#include "zsq/io.hpp"
#include "zsq/pipeline.hpp"
#include "zsq/random.hpp"

namespace fs = std::filesystem;
using namespace zsq;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

void report(int id, const Outcome& o) {
  std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  std::string worst_op;
  std::size_t ops = 0, min_probes = ~std::size_t{0};
  for (const testing::OpCase& c : testing::op_cases()) {
    std::size_t probes = 0;
    double op_worst = 0.0;
    while (probes < 20) {
      const auto r = testing::grad_check(c.make_inputs(rng), c.loss, rng, 4);
      probes += r.probes;
      op_worst = std::max(op_worst, r.max_rel_err);
    }
    ++ops;
    min_probes = std::min(min_probes, probes);
    if (op_worst > worst) {
      worst = op_worst;
      worst_op = c.name;
    }
  }
  // Step-size gradient of the quantizer: 4 bit widths x 2 schemes x 500 samples.
  double step_worst = 0.0, offset_worst = 0.0;
  bool offset_ok = true;
  for (int bits : {2, 3, 4, 8}) {
    for (bool asym : {false, true}) {
      const auto c = testing::step_gradient_check(bits, asym, 500, rng);
      step_worst = std::max(step_worst, c.step_rel_err);
      offset_worst = std::max(offset_worst, c.offset_abs_err);
      offset_ok = offset_ok && c.has_offset_grad == asym;
    }
  }
  const double sec = since(t0);
  Outcome o;
  o.pass = worst <= 1e-4 && step_worst <= 1e-4 && offset_worst <= 1e-12 && offset_ok && min_probes >= 20 && sec < 60;
  o.detail = std::to_string(ops) + " ops, >=" + std::to_string(min_probes) + " probes each, max rel err " +
             fmt("%.2e", worst) + " (" + worst_op + "), step grad rel err " + fmt("%.2e", step_worst) + ", " +
             fmt("%.1fs", sec);
  return o;
}

Outcome quantizer_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> bits_dist(2, 8);
  std::uniform_real_distribution<double> log_step(-6.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution plant_tie(0.2);
  std::size_t mismatches = 0, ties = 0;
  NoGradGuard guard;
  for (int trial = 0; trial < 10000; ++trial) {
    const int bits = bits_dist(rng);
    const bool asym = trial % 2 == 1;
    const double s = plant_tie(rng) ? std::ldexp(1.0, static_cast<int>(log_step(rng))) : std::exp2(log_step(rng));
    const double beta = asym ? std::ldexp(std::round(normal(rng) * 8), -3) : 0.0;
    double x;
    if (plant_tie(rng)) {
      const double k = std::floor(normal(rng) * static_cast<double>(1L << (bits - 1)));
      x = s * (k + 0.5) + beta;
      ++ties;
    } else {
      x = normal(rng) * s * std::ldexp(1.0, bits - 1) * 1.5 + beta;
    }
    auto q = QuantizerParams::make(bits, QuantKind::kActivation, asym, s);
    q.offset.values()[0] = beta;
    const double got = fake_quantize(Tensor({1}, {x}), q).data()[0];
    if (got != testing::brute_force_quantize(x, s, beta, bits)) ++mismatches;
  }
  bool props = true;
  for (int bits : {2, 3, 4, 8}) {
    for (bool asym : {false, true}) {
      auto q = QuantizerParams::make(bits, QuantKind::kActivation, asym, 0.37);
      if (asym) q.offset.values()[0] = 0.81;
      std::vector<double> xs(4000);
      for (double& x : xs) x = 2.0 * normal(rng);
      std::sort(xs.begin(), xs.end());
      const std::vector<double> once = fake_quantize(Tensor({xs.size()}, xs), q).values();
      const std::vector<double> twice = fake_quantize(Tensor({once.size()}, once), q).values();
      const std::set<double> levels(once.begin(), once.end());
      props = props && once == twice && std::is_sorted(once.begin(), once.end()) &&
              levels.size() <= (std::size_t{1} << bits);
    }
  }
  const double sec = since(t0);
  Outcome o;
  o.pass = mismatches == 0 && props && sec < 10;
  o.detail = "10000 triples (" + std::to_string(ties) + " planted ties), " + std::to_string(mismatches) +
             " mismatches, idempotent/monotone/<=2^b levels " + (props ? "hold" : "VIOLATED") + ", " +
             fmt("%.2fs", sec);
  return o;
}

BoxLabel box(int cls, double cx, double cy, double w, double h, double conf = 1.0) {
  BoxLabel b;
  b.class_id = cls;
  b.cx = cx;
  b.cy = cy;
  b.w = w;
  b.h = h;
  b.confidence = conf;
  return b;
}

Outcome label_update_suite() {
  const auto t0 = Clock::now();
  std::size_t hand_ok = 0;
  {
    // Empty detections: the most confident existing label survives.
    const BoxLabel a = box(0, 0.3, 0.3, 0.2, 0.2, 0.6), b = box(1, 0.7, 0.7, 0.2, 0.2, 0.9);
    hand_ok += adaptive_label_update({a, b}, {}, 0.45) == std::vector<BoxLabel>{b};
  }
  {
    // Fixed point: detections reproduce the labels exactly.
    const BoxLabel a = box(0, 0.3, 0.3, 0.3, 0.3), b = box(2, 0.7, 0.6, 0.2, 0.3);
    hand_ok += adaptive_label_update({a, b}, {a, b}, 0.45) == std::vector<BoxLabel>{a, b};
  }
  {
    // Add and keep: an overlapping detection keeps the label, a disjoint one is added.
    const BoxLabel a = box(0, 0.3, 0.3, 0.4, 0.4), a2 = box(0, 0.34, 0.3, 0.4, 0.4, 0.8),
                   b = box(1, 0.8, 0.8, 0.2, 0.2, 0.7);
    hand_ok += adaptive_label_update({a}, {a2, b}, 0.45) == std::vector<BoxLabel>{a, b};
  }
  Rng rng(31);
  std::size_t random_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto draw = [&](std::size_t n) {
      std::vector<BoxLabel> out;
      for (std::size_t i = 0; i < n; ++i) {
        BoxLabel l = sample_initial_label(4, rng);
        l.confidence = rng.uniform(0.3, 1.0);
        out.push_back(l);
      }
      return out;
    };
    const std::vector<BoxLabel> tgts = draw(rng.below(5));
    std::vector<BoxLabel> news = draw(rng.below(5));
    for (const BoxLabel& t : tgts) {
      if (rng.bernoulli(0.5)) {
        BoxLabel j = t;
        j.cx += rng.uniform(-0.05, 0.05);
        j.cy += rng.uniform(-0.05, 0.05);
        news.push_back(j);
      }
    }
    const double thresh = rng.uniform(0.2, 0.7);
    random_ok += adaptive_label_update(tgts, news, thresh) == testing::brute_force_update(tgts, news, thresh);
  }
  const double sec = since(t0);
  Outcome o;
  o.pass = hand_ok == 3 && random_ok == 100 && sec < 10;
  o.detail = std::to_string(hand_ok) + "/3 hand cases, " + std::to_string(random_ok) + "/100 random cases match, " +
             fmt("%.2fs", sec);
  return o;
}

Outcome loss_identities() {
  std::mt19937_64 rng(4);
  DetectorConfig mc;
  mc.image_size = 16;
  mc.num_classes = 3;
  mc.channels = {4, 6, 8};
  mc.seed = 2;
  const Detector model = Detector::build(mc);
  const Tensor images = testing::random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0, false);
  const std::vector<BoxLabel> labels = {box(1, 0.4, 0.5, 0.3, 0.4)};
  NoGradGuard guard;
  std::vector<std::pair<std::string, double>> errs;

  const Tensor logits = testing::random_tensor({2, 8, 4, 4}, rng, -4.0, 4.0, false);
  errs.emplace_back("KL(p||p)", std::abs(kd_loss(logits, logits, 2.0).item()));
  const ForwardResult fr = model.forward(images, BnMode::kEval);
  errs.emplace_back("L_feat(f,f)", std::abs(feature_loss(fr.taps, fr.taps).item()));
  errs.emplace_back("L_TV(const)", std::abs(total_variation(Tensor({2, 3, 16, 16}, 0.37)).item()));

  SynthesisConfig sc;
  sc.alpha_detect = 0.0;
  sc.alpha_tv = 0.3;
  const ObjectiveTerms ot = synthesis_objective(model, images, labels, sc);
  const ForwardResult mf = model.forward(images, BnMode::kMeasure);
  const double agnostic = sc.alpha_prior * bns_loss_from_forward(model, mf).item() +
                          regularizer_loss(images, sc.alpha_tv, sc.alpha_l2).item();
  errs.emplace_back("task-specific(alpha_detect=0) - task-agnostic", std::abs(ot.total.item() - agnostic));

  QatConfig qc;
  Detector student = attach_quantizers(model, 4, 8);
  calibrate_activation_quantizers(student, images);
  const QatLoss ql = qat_total_loss(fr, student.forward(images, BnMode::kEval), labels, qc);
  errs.emplace_back("total - sum(beta*term)",
                    std::abs(ql.total.item() - (qc.beta_kl * ql.kd + qc.beta_feat * ql.feat + qc.beta_detect * ql.detect)));

  Outcome o;
  o.pass = true;
  for (const auto& [name, e] : errs) {
    o.pass = o.pass && e <= 1e-12;
    o.detail += name + " " + fmt("%.1e", e) + "; ";
  }
  return o;
}

// ---------------------------------------------------------------------------

struct Shared {
  Config config;
  Dataset real;
  std::optional<Detector> teacher;
  double teacher_map = 0, teacher_map50 = 0;
  std::map<std::uint64_t, Dataset> adaptive_sets;  // seed offset -> W6A6 grid calibration set
};

double teacher_eval(Shared& s) {
  const EvalResult r = evaluate(*s.teacher, s.real, s.real.val_indices(), s.config.eval);
  s.teacher_map = r.map_5095;
  s.teacher_map50 = r.map_50;
  return r.map_50;
}

Outcome teacher_gate(Shared& s) {
  const auto t0 = Clock::now();
  s.teacher = train_teacher(s.real, s.config.model, s.config.teacher, [](const TrainEpochLog& l) {
    progress("teacher epoch " + std::to_string(l.epoch) + " loss " + fmt("%.4f", l.loss) +
             (l.evaluated ? " mAP50 " + fmt("%.4f", l.map50) : ""));
  });
  const double sec = since(t0);
  teacher_eval(s);
  Outcome o;
  o.pass = s.teacher_map50 >= 0.90 && sec <= 20 * 60;
  o.detail = "mAP50 " + fmt("%.4f", s.teacher_map50) + " (mAP " + fmt("%.4f", s.teacher_map) + ") after " +
             std::to_string(s.config.teacher.epochs) + " epochs, " + fmt("%.0fs", sec);
  return o;
}

Outcome inversion_gate(Shared& s) {
  const auto t0 = Clock::now();
  const CalibrationSet set = synthesize_calibration(*s.teacher, s.config, parse_method("adaptive"), 256, s.real);
  const double sec = since(t0);
  double worst = 0.0;
  for (const BatchReport& b : set.batches) worst = std::max(worst, b.bns_final / b.bns_initial);
  std::size_t unlabeled = 0;
  for (const auto& l : set.data.labels) unlabeled += l.empty();
  Outcome o;
  o.pass = worst <= 0.10 && unlabeled == 0 && set.data.size() == 256 && sec <= 30 * 60;
  o.detail = std::to_string(set.batches.size()) + " batches, worst BNS final/initial " + fmt("%.4f", worst) + ", " +
             std::to_string(unlabeled) + " unlabeled images, " + fmt("%.0fs", sec);
  return o;
}

double qat_map50(const Shared& s, const Dataset& calib, const Config& c, double* map = nullptr) {
  const QatResult r = quantize_student(*s.teacher, calib, s.real, c);
  if (r.diverged) progress("qat diverged: " + r.divergence);
  const EvalResult e = evaluate(r.best, s.real, s.real.val_indices(), c.eval);
  if (map) *map = e.map_5095;
  return e.map_50;
}

Outcome table1_analog(Shared& s) {
  const auto t0 = Clock::now();
  const CalibrationSet set = synthesize_calibration(*s.teacher, s.config, parse_method("adaptive"), 2000, s.real);
  progress("2000 images synthesized in " + fmt("%.0fs", since(t0)));
  Config c8 = s.config, c4 = s.config;
  std::tie(c8.qat.weight_bits, c8.qat.act_bits) = parse_bits("w8a8");
  std::tie(c4.qat.weight_bits, c4.qat.act_bits) = parse_bits("w4a8");
  const double m8 = qat_map50(s, set.data, c8);
  progress("w8a8 mAP50 " + fmt("%.4f", m8));
  const double m4 = qat_map50(s, set.data, c4);
  progress("w4a8 mAP50 " + fmt("%.4f", m4));
  const double sec = since(t0);
  const double r8 = m8 / s.teacher_map50, r4 = m4 / s.teacher_map50;
  Outcome o;
  o.pass = r8 >= 0.95 && r4 >= 0.85 && sec <= 2 * 3600;
  o.detail = "FP mAP50 " + fmt("%.4f", s.teacher_map50) + "; W8A8 " + fmt("%.4f", m8) + " (" + fmt("%.1f%%", 100 * r8) +
             "), W4A8 " + fmt("%.4f", m4) + " (" + fmt("%.1f%%", 100 * r4) + "), " + fmt("%.0fs", sec);
  return o;
}

Config seeded(const Config& base, std::uint64_t offset) {
  Config c = base;
  c.seed = base.seed + offset;
  c.propagate();
  return c;
}

Outcome method_ordering(Shared& s) {
  const auto t0 = Clock::now();
  const std::vector<std::string> order = {"adaptive", "multisample-in", "multisample-out", "tile-out", "gaussian"};
  std::map<std::string, std::vector<double>> maps;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Config c = seeded(s.config, seed);
    std::tie(c.qat.weight_bits, c.qat.act_bits) = parse_bits("w6a6");
    for (const std::string& name : order) {
      const CalibrationSet set =
          synthesize_calibration(*s.teacher, c, parse_method(name), c.compare.num_images, s.real);
      if (name == "adaptive") s.adaptive_sets.emplace(seed, set.data);
      double map = 0;
      qat_map50(s, set.data, c, &map);
      maps[name].push_back(map);
      progress("w6a6 seed " + std::to_string(c.seed) + " " + name + " mAP " + fmt("%.4f", map));
    }
  }
  Outcome o;
  o.pass = true;
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    int votes = 0;
    for (std::size_t k = 0; k < 3; ++k) votes += maps[order[i]][k] >= maps[order[i + 1]][k];
    o.pass = o.pass && votes >= 2;
    o.detail += order[i] + ">=" + order[i + 1] + " " + std::to_string(votes) + "/3; ";
  }
  o.detail += "mAP by seed:";
  for (const std::string& name : order) {
    o.detail += " " + name + "=";
    for (double m : maps[name]) o.detail += fmt("%.4f", m) + (&m == &maps[name].back() ? "" : "/");
  }
  o.detail += "; " + fmt("%.0fs", since(t0));
  return o;
}

Outcome loss_ablation(Shared& s) {
  const auto t0 = Clock::now();
  double full = 0, no_detect = 0, no_distill = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Config c = seeded(s.config, seed);
    std::tie(c.qat.weight_bits, c.qat.act_bits) = parse_bits("w4a8");
    auto it = s.adaptive_sets.find(seed);
    if (it == s.adaptive_sets.end()) {
      it = s.adaptive_sets
               .emplace(seed, synthesize_calibration(*s.teacher, c, parse_method("adaptive"), c.compare.num_images,
                                                     s.real)
                                  .data)
               .first;
    }
    double m = 0;
    qat_map50(s, it->second, c, &m);
    full += m / 3;
    Config nd = c;
    nd.qat.beta_detect = 0;
    double m_nd = 0;
    qat_map50(s, it->second, nd, &m_nd);
    no_detect += m_nd / 3;
    Config nk = c;
    nk.qat.beta_kl = 0;
    nk.qat.beta_feat = 0;
    double m_nk = 0;
    qat_map50(s, it->second, nk, &m_nk);
    no_distill += m_nk / 3;
    progress("w4a8 seed " + std::to_string(c.seed) + " full " + fmt("%.4f", m) + " w/o detect " + fmt("%.4f", m_nd) +
             " w/o KD+feat " + fmt("%.4f", m_nk));
  }
  Outcome o;
  o.pass = no_detect < full && no_distill < full;
  o.detail = "mean mAP over 3 seeds: full " + fmt("%.4f", full) + ", w/o L_detect " + fmt("%.4f", no_detect) +
             ", w/o L_KD+L_feat " + fmt("%.4f", no_distill) + "; " + fmt("%.0fs", since(t0));
  return o;
}

// ---------------------------------------------------------------------------

int run(const std::string& cmd) {
  progress(cmd);
  return std::system((cmd + " >/dev/null 2>&1").c_str());
}

Outcome reproducibility(const fs::path& scratch) {
  const auto t0 = Clock::now();
  const fs::path cfg = scratch / "repro.json";
  write_file(cfg, R"({"seed": 7,
 "data": {"num_images": 96, "image_size": 32},
 "model": {"channels": [8, 12, 16]},
 "teacher": {"epochs": 3, "batch_size": 16, "eval_every": 1},
 "synthesis": {"iterations": 20, "low_res_iterations": 20, "batch_size": 8},
 "calibration": {"num_images": 24},
 "qat": {"epochs": 2, "batch_size": 8},
 "compare": {"num_images": 8}}
)");
  const std::string cli = ZSQ_CLI_PATH;
  std::vector<fs::path> roots = {scratch / "run_a", scratch / "run_b"};
  int failures = 0;
  for (const fs::path& root : roots) {
    fs::remove_all(root);
    const std::string base = cli + " --out " + root.string() + " --config " + cfg.string() + " ";
    for (const char* step : {"gen-data", "train-teacher", "synthesize", "qat --bits w4a8",
                             "compare-baselines --methods adaptive tile-out gaussian", "report"}) {
      failures += run(base + step) != 0;
    }
  }
  const std::vector<std::string> files = {"teacher/teacher.ckpt",
                                          "teacher/train_log.csv",
                                          "teacher/eval.csv",
                                          "calib/adaptive/synthesis.csv",
                                          "qat/adaptive-w4a8/student.ckpt",
                                          "qat/adaptive-w4a8/metrics.csv",
                                          "compare/baselines.csv",
                                          "compare/cells.csv",
                                          "report.txt"};
  std::size_t identical = 0;
  std::string differs;
  for (const std::string& f : files) {
    const fs::path a = roots[0] / f, b = roots[1] / f;
    if (fs::exists(a) && fs::exists(b) && read_file(a) == read_file(b)) {
      ++identical;
    } else {
      differs += " " + f;
    }
  }
  const bool images_same = fs::exists(roots[0] / "calib/adaptive") &&
                           content_hash(roots[0] / "calib/adaptive/images") ==
                               content_hash(roots[1] / "calib/adaptive/images");
  Outcome o;
  o.pass = failures == 0 && identical == files.size() && images_same;
  o.detail = std::to_string(identical) + "/" + std::to_string(files.size()) + " artifacts byte-identical" +
             (differs.empty() ? "" : " (differ:" + differs + ")") + ", synthetic images " +
             (images_same ? "identical" : "differ") + ", " + std::to_string(failures) + " failed commands, " +
             fmt("%.0fs", since(t0));
  return o;
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* env = std::getenv("ZSQ_ACCEPTANCE_ONLY")) {
    std::stringstream ss(env);
    for (std::string tok; std::getline(ss, tok, ',');)
      if (!tok.empty()) only.insert(std::stoi(tok));
  }
  auto selected = [&](int id) { return only.empty() || only.count(id) > 0; };
  const fs::path scratch = std::getenv("ZSQ_ACCEPTANCE_DIR") ? fs::path(std::getenv("ZSQ_ACCEPTANCE_DIR"))
                                                             : fs::current_path() / "acceptance_work";
  fs::create_directories(scratch);

  bool all = true;
  auto attempt = [&](int id, const std::function<Outcome()>& fn) {
    if (!selected(id)) {
      std::printf("criterion %d: SKIP\n", id);
      return;
    }
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    all = all && o.pass;
    report(id, o);
  };

  attempt(1, gradient_suite);
  attempt(2, quantizer_oracle);
  attempt(3, label_update_suite);
  attempt(4, loss_identities);

  Shared s;
  s.config = default_config();
  bool need_teacher = false;
  for (int id : {5, 6, 7, 8, 9}) need_teacher = need_teacher || selected(id);
  if (need_teacher) {
    progress("rendering " + std::to_string(s.config.data.num_images) + " images");
    s.real = generate_dataset(s.config.data);
    if (selected(5)) {
      attempt(5, [&] { return teacher_gate(s); });
    } else {
      std::printf("criterion 5: SKIP\n");
      s.teacher = train_teacher(s.real, s.config.model, s.config.teacher);
      teacher_eval(s);
    }
  } else {
    std::printf("criterion 5: SKIP\n");
  }
  if (!s.teacher) {
    for (int id : {6, 7, 8, 9}) {
      if (!selected(id)) {
        std::printf("criterion %d: SKIP\n", id);
      } else {
        std::printf("criterion %d: FAIL  no teacher\n", id);
        all = false;
      }
    }
  } else {
    attempt(6, [&] { return inversion_gate(s); });
    attempt(7, [&] { return table1_analog(s); });
    attempt(8, [&] { return method_ordering(s); });
    attempt(9, [&] { return loss_ablation(s); });
  }
  attempt(10, [&] { return reproducibility(scratch); });
  return all ? 0 : 1;
}
