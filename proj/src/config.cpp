#include "zsq/config.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <nlohmann/json.hpp>

#include "zsq/checkpoint.hpp"
#include "zsq/error.hpp"
#include "zsq/io.hpp"

namespace zsq {

using nlohmann::json;

namespace {

// Calls v(key, field) for every configurable field, in a fixed order.
template <class V>
void visit(Config& c, V&& v) {
  v("seed", c.seed);

  v("data.num_images", c.data.num_images);
  v("data.image_size", c.data.image_size);
  v("data.num_classes", c.data.num_classes);
  v("data.class_weights", c.data.class_weights);
  v("data.max_objects", c.data.max_objects);
  v("data.objects_p", c.data.objects_p);
  v("data.min_size", c.data.min_size);
  v("data.max_size", c.data.max_size);
  v("data.max_rotation_deg", c.data.max_rotation_deg);
  v("data.train_fraction", c.data.train_fraction);

  v("model.channels", c.model.channels);

  v("teacher.epochs", c.teacher.epochs);
  v("teacher.batch_size", c.teacher.batch_size);
  v("teacher.lr", c.teacher.lr);
  v("teacher.warmup_steps", c.teacher.warmup_steps);
  v("teacher.hflip", c.teacher.hflip);
  v("teacher.eval_every", c.teacher.eval_every);
  v("teacher.loss_weights.box", c.teacher.loss_weights.box);
  v("teacher.loss_weights.conf", c.teacher.loss_weights.conf);
  v("teacher.loss_weights.cls", c.teacher.loss_weights.cls);

  v("synthesis.alpha_prior", c.synthesis.alpha_prior);
  v("synthesis.alpha_detect", c.synthesis.alpha_detect);
  v("synthesis.alpha_tv", c.synthesis.alpha_tv);
  v("synthesis.alpha_l2", c.synthesis.alpha_l2);
  v("synthesis.iterations", c.synthesis.iterations);
  v("synthesis.low_res_iterations", c.synthesis.low_res_iterations);
  v("synthesis.relabel_interval", c.synthesis.relabel_interval);
  v("synthesis.lr", c.synthesis.lr);
  v("synthesis.resolution", c.synthesis.resolution);
  v("synthesis.low_resolution", c.synthesis.low_resolution);
  v("synthesis.conf_thresh", c.synthesis.conf_thresh);
  v("synthesis.iou_thresh", c.synthesis.iou_thresh);
  v("synthesis.nms_iou", c.synthesis.nms_iou);
  v("synthesis.cutout_enabled", c.synthesis.cutout_enabled);
  v("synthesis.batch_size", c.synthesis.batch_size);
  v("synthesis.detect_weights.box", c.synthesis.detect_weights.box);
  v("synthesis.detect_weights.conf", c.synthesis.detect_weights.conf);
  v("synthesis.detect_weights.cls", c.synthesis.detect_weights.cls);

  v("calibration.num_images", c.calibration.num_images);
  v("calibration.label_source", c.calibration.label_source);
  v("calibration.in_distribution", c.calibration.in_distribution);
  v("calibration.tile_grid", c.calibration.tile_grid);
  v("calibration.multisample_count", c.calibration.multisample_count);

  v("qat.weight_bits", c.qat.weight_bits);
  v("qat.act_bits", c.qat.act_bits);
  v("qat.asymmetric_activations", c.qat.asymmetric_activations);
  v("qat.epochs", c.qat.epochs);
  v("qat.batch_size", c.qat.batch_size);
  v("qat.lr", c.qat.lr);
  v("qat.quantizer_lr", c.qat.quantizer_lr);
  v("qat.tau", c.qat.tau);
  v("qat.kd_objectness", c.qat.kd_objectness);
  v("qat.beta_detect", c.qat.beta_detect);
  v("qat.beta_kl", c.qat.beta_kl);
  v("qat.beta_feat", c.qat.beta_feat);
  v("qat.hflip", c.qat.hflip);
  v("qat.freeze_bn", c.qat.freeze_bn);
  v("qat.eval_every", c.qat.eval_every);
  v("qat.loss_weights.box", c.qat.loss_weights.box);
  v("qat.loss_weights.conf", c.qat.loss_weights.conf);
  v("qat.loss_weights.cls", c.qat.loss_weights.cls);

  v("eval.conf_thresh", c.eval.conf_thresh);
  v("eval.nms_iou", c.eval.nms_iou);
  v("eval.batch_size", c.eval.batch_size);

  v("compare.bits", c.compare.bits);
  v("compare.num_images", c.compare.num_images);
  v("compare.seeds", c.compare.seeds);
  v("compare.without_detect", c.compare.without_detect);
}

[[noreturn]] void type_error(const std::string& origin, const std::string& key, const char* expected, const json& j) {
  throw ValidationError(origin + ": " + key + ": expected " + expected + ", got " + j.type_name());
}

bool is_count(const json& j) { return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0); }

struct Reader {
  const std::string& origin;
  const json& j;  // the value for this key

  void operator()(const std::string& key, std::uint64_t& f) const {
    if (!is_count(j)) type_error(origin, key, "a non-negative integer", j);
    f = j.get<std::uint64_t>();
  }
  void operator()(const std::string& key, int& f) const {
    if (!j.is_number_integer()) type_error(origin, key, "an integer", j);
    f = j.get<int>();
  }
  void operator()(const std::string& key, double& f) const {
    if (!j.is_number()) type_error(origin, key, "a number", j);
    f = j.get<double>();
  }
  void operator()(const std::string& key, bool& f) const {
    if (!j.is_boolean()) type_error(origin, key, "a boolean", j);
    f = j.get<bool>();
  }
  void operator()(const std::string& key, std::string& f) const {
    if (!j.is_string()) type_error(origin, key, "a string", j);
    f = j.get<std::string>();
  }
  void operator()(const std::string& key, std::vector<double>& f) const {
    if (!j.is_array()) type_error(origin, key, "an array of numbers", j);
    for (const auto& e : j)
      if (!e.is_number()) type_error(origin, key, "an array of numbers", e);
    f = j.get<std::vector<double>>();
  }
  void operator()(const std::string& key, std::vector<std::string>& f) const {
    if (!j.is_array()) type_error(origin, key, "an array of strings", j);
    for (const auto& e : j)
      if (!e.is_string()) type_error(origin, key, "an array of strings", e);
    f = j.get<std::vector<std::string>>();
  }
  void operator()(const std::string& key, std::array<std::size_t, 3>& f) const {
    if (!j.is_array() || j.size() != 3) type_error(origin, key, "an array of 3 non-negative integers", j);
    for (const auto& e : j)
      if (!is_count(e)) type_error(origin, key, "an array of 3 non-negative integers", e);
    f = j.get<std::array<std::size_t, 3>>();
  }
};

const json* find(const json& root, const std::string& key) {
  const json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object()) return nullptr;
    const auto it = node->find(part);
    if (it == node->end()) return nullptr;
    node = &*it;
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

std::set<std::string> known_keys() {
  std::set<std::string> keys;
  Config c;
  visit(c, [&](const std::string& key, auto&) { keys.insert(key); });
  return keys;
}

void check_keys(const json& node, const std::string& prefix, const std::set<std::string>& known,
                const std::string& origin) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (known.count(key)) continue;
    const bool is_section = std::any_of(known.begin(), known.end(),
                                        [&](const std::string& k) { return k.rfind(key + ".", 0) == 0; });
    if (!is_section) throw ValidationError(origin + ": unknown key '" + key + "'");
    if (!it->is_object()) type_error(origin, key, "an object", *it);
    check_keys(*it, key, known, origin);
  }
}

json to_json_tree(const Config& config) {
  json root = json::object();
  Config copy = config;
  visit(copy, [&](const std::string& key, auto& field) {
    json* node = &root;
    std::size_t start = 0;
    for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1)
      node = &(*node)[key.substr(start, dot - start)];
    (*node)[key.substr(start)] = field;
  });
  return root;
}

}  // namespace

void Config::propagate() {
  data.seed = seed;
  model.image_size = data.image_size;
  model.num_classes = data.num_classes;
  model.seed = seed;
  teacher.seed = seed;
  synthesis.seed = seed;
  qat.seed = seed;
}

void Config::validate() const {
  data.validate();
  if (model.channels[0] == 0 || model.channels[1] == 0 || model.channels[2] == 0)
    throw ValidationError("model.channels must be positive");
  if (teacher.epochs == 0 || teacher.batch_size == 0) throw ValidationError("teacher.epochs and teacher.batch_size must be > 0");
  if (!(teacher.lr > 0)) throw ValidationError("teacher.lr must be > 0");
  synthesis.validate();
  qat.validate();
  if (!(eval.conf_thresh >= 0 && eval.conf_thresh <= 1)) throw ValidationError("eval.conf_thresh must be in [0, 1]");
  if (!(eval.nms_iou > 0 && eval.nms_iou <= 1)) throw ValidationError("eval.nms_iou must be in (0, 1]");
  if (eval.batch_size == 0) throw ValidationError("eval.batch_size must be > 0");
  if (calibration.num_images == 0) throw ValidationError("calibration.num_images must be > 0");
  parse_label_source(calibration.label_source);
  if (calibration.tile_grid == 0) throw ValidationError("calibration.tile_grid must be > 0");
  for (const auto& b : compare.bits) parse_bits(b);
  if (compare.seeds == 0 || compare.num_images == 0) throw ValidationError("compare.seeds and compare.num_images must be > 0");
}

Config default_config() {
  Config c;
  c.propagate();
  return c;
}

Config parse_config(const std::string& json_text, const std::string& origin) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  if (!root.is_object()) throw ValidationError(origin + ": top level must be an object");
  check_keys(root, "", known_keys(), origin);
  Config c;
  visit(c, [&](const std::string& key, auto& field) {
    if (const json* j = find(root, key)) Reader{origin, *j}(key, field);
  });
  c.propagate();
  c.validate();
  return c;
}

Config load_config(const std::filesystem::path& path) { return parse_config(read_file(path), path.string()); }

std::string config_to_json(const Config& config) { return to_json_tree(config).dump(2) + "\n"; }

std::string config_hash(const Config& config) { return sha256_hex(to_json_tree(config).dump()); }

std::string task_config_hash(const Config& config) {
  const json tree = to_json_tree(config);
  const json task = {{"seed", tree.at("seed")}, {"data", tree.at("data")}, {"model", tree.at("model")}};
  return sha256_hex(task.dump());
}

void apply_override(Config& config, const std::string& key, const std::string& value) {
  const std::set<std::string> known = known_keys();
  if (!known.count(key)) throw UsageError("unknown config key '" + key + "'");
  json j;
  try {
    j = json::parse(value);
  } catch (const json::parse_error&) {
    j = value;
  }
  bool set = false;
  visit(config, [&](const std::string& k, auto& field) {
    if (k != key) return;
    // Strings given as bare words arrive as JSON strings; numbers typed for a
    // string field are kept as their text.
    if constexpr (std::is_same_v<std::decay_t<decltype(field)>, std::string>) {
      field = j.is_string() ? j.get<std::string>() : value;
    } else {
      Reader{"--set", j}(key, field);
    }
    set = true;
  });
  if (!set) throw UsageError("unknown config key '" + key + "'");
  config.propagate();
}

std::pair<int, int> parse_bits(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (t == "fp" || t == "w32a32") return {32, 32};
  int w = 0, a = 0;
  char tail = 0;
  if (std::sscanf(t.c_str(), "w%da%d%c", &w, &a, &tail) != 2)
    throw ValidationError("bad bit setting '" + text + "' (expected e.g. w4a8)");
  for (int b : {w, a}) {
    if (b < 2 || (b > 16 && b != 32)) throw ValidationError("bad bit setting '" + text + "': widths must be in [2, 16] or 32");
  }
  return {w, a};
}

}  // namespace zsq
