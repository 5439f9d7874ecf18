#include "zsq/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zsq/error.hpp"
#include "zsq/random.hpp"

namespace zsq {
namespace {

double sigmoid_of(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double logit(double p) { return std::log(p / (1.0 - p)); }

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.normal() * std_dev;
  t.set_requires_grad(true);
  return t;
}

Block make_block(std::string name, std::size_t cin, std::size_t cout, std::size_t stride, bool tap,
                 Rng& rng) {
  Block b;
  b.conv.name = std::move(name);
  b.conv.weight = kaiming({cout, cin, 3, 3}, cin * 9, rng);
  b.conv.stride = stride;
  b.conv.padding = 1;
  b.bn.gamma = Tensor({cout}, 1.0, true);
  b.bn.beta = Tensor({cout}, 0.0, true);
  b.bn.running_mean = Tensor({cout}, 0.0);
  b.bn.running_var = Tensor({cout}, 1.0);
  b.tap = tap;
  return b;
}

Tensor copy_of(const Tensor& t) {
  if (!t.defined()) return t;
  return Tensor(t.shape(), t.values(), t.requires_grad());
}

Tensor run_conv(const ConvLayer& layer, const Tensor& input) {
  const Tensor x = layer.act_quant ? fake_quantize(input, *layer.act_quant) : input;
  const Tensor w = layer.weight_quant ? fake_quantize(layer.weight, *layer.weight_quant) : layer.weight;
  return conv2d(x, w, layer.bias, {layer.stride, layer.padding});
}

}  // namespace

double iou(const BoxLabel& a, const BoxLabel& b) {
  // Areas from the same edge differences as the intersection, so iou(a, a) == 1 exactly.
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

void validate_label(const BoxLabel& l, int num_classes) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("label (class " + std::to_string(l.class_id) + ", cx " + std::to_string(l.cx) +
                          ", cy " + std::to_string(l.cy) + ", w " + std::to_string(l.w) + ", h " +
                          std::to_string(l.h) + "): " + what);
  };
  if (l.class_id < 0 || l.class_id >= num_classes) fail("class out of range");
  if (!(l.cx >= 0 && l.cx <= 1 && l.cy >= 0 && l.cy <= 1)) fail("center outside the image");
  if (!(l.w > 0 && l.w <= 1 && l.h > 0 && l.h <= 1)) fail("size outside (0, 1]");
}

Detector Detector::build(const DetectorConfig& config) {
  if (config.image_size == 0 || config.image_size % kTotalStride != 0) {
    throw ValidationError("build_model: image size " + std::to_string(config.image_size) +
                          " is not a positive multiple of the stride " + std::to_string(kTotalStride));
  }
  if (config.num_classes < 1) throw ValidationError("build_model: num_classes must be >= 1");
  for (std::size_t c : config.channels) {
    if (c == 0) throw ValidationError("build_model: zero channel width");
  }
  Detector m;
  m.config = config;
  Rng rng(config.seed, 0x5eed);
  const auto [c0, c1, c2] = config.channels;
  m.blocks.push_back(make_block("stem", 3, c0, 2, true, rng));
  m.blocks.push_back(make_block("down2", c0, c1, 2, false, rng));
  m.blocks.push_back(make_block("stage2", c1, c1, 1, true, rng));
  m.blocks.push_back(make_block("down3", c1, c2, 2, false, rng));
  m.blocks.push_back(make_block("stage3", c2, c2, 1, true, rng));

  const std::size_t d = m.outputs_per_cell();
  m.head.name = "head";
  m.head.weight = Tensor({d, c2, 1, 1});
  for (double& v : m.head.weight.values()) v = rng.normal() * 0.01;
  m.head.weight.set_requires_grad(true);
  m.head.bias = Tensor({d}, 0.0, true);
  // Objectness starts near the prior of a few objects on an 8x8 grid.
  m.head.bias.values()[kObjChannel] = logit(0.03);
  for (std::size_t c = kBoxChannels; c < d; ++c) m.head.bias.values()[c] = logit(0.1);
  return m;
}

ForwardResult Detector::forward(const Tensor& images, BnMode mode, bool keep_layer_inputs) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != images.size(3) ||
      images.size(2) % kTotalStride != 0 || images.size(2) == 0) {
    throw ShapeError("detector: expected [N, 3, S, S] with S a multiple of " + std::to_string(kTotalStride) +
                     ", got " + shape_str(images.shape()));
  }
  ForwardResult r;
  Tensor h = images;
  for (const Block& b : blocks) {
    if (keep_layer_inputs) r.layer_inputs.push_back(h);
    const Tensor y = run_conv(b.conv, h);
    BatchNormResult bn = batchnorm2d(y, b.bn.gamma, b.bn.beta, b.bn.running_mean, b.bn.running_var, mode);
    h = silu(bn.output);
    r.bn.push_back(std::move(bn));
    if (b.tap) r.taps.push_back(h);
  }
  if (keep_layer_inputs) r.layer_inputs.push_back(h);
  r.pred = run_conv(head, h);
  return r;
}

std::vector<NamedTensor> Detector::parameters() const {
  std::vector<NamedTensor> out;
  for (const Block& b : blocks) {
    out.push_back({b.conv.name + ".weight", b.conv.weight});
    out.push_back({b.conv.name + ".bn.gamma", b.bn.gamma});
    out.push_back({b.conv.name + ".bn.beta", b.bn.beta});
  }
  out.push_back({"head.weight", head.weight});
  out.push_back({"head.bias", head.bias});
  return out;
}

std::vector<NamedTensor> Detector::buffers() const {
  std::vector<NamedTensor> out;
  for (const Block& b : blocks) {
    out.push_back({b.conv.name + ".bn.running_mean", b.bn.running_mean});
    out.push_back({b.conv.name + ".bn.running_var", b.bn.running_var});
  }
  return out;
}

std::vector<const ConvLayer*> Detector::conv_layers() const {
  std::vector<const ConvLayer*> out;
  for (const Block& b : blocks) out.push_back(&b.conv);
  out.push_back(&head);
  return out;
}

std::vector<ConvLayer*> Detector::conv_layers() {
  std::vector<ConvLayer*> out;
  for (Block& b : blocks) out.push_back(&b.conv);
  out.push_back(&head);
  return out;
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

bool Detector::quantized() const {
  for (const ConvLayer* c : conv_layers()) {
    if (c->weight_quant || c->act_quant) return true;
  }
  return false;
}

Detector Detector::clone() const {
  Detector m = *this;
  for (ConvLayer* c : m.conv_layers()) {
    c->weight = copy_of(c->weight);
    c->bias = copy_of(c->bias);
    if (c->weight_quant) c->weight_quant = c->weight_quant->clone();
    if (c->act_quant) c->act_quant = c->act_quant->clone();
  }
  for (Block& b : m.blocks) {
    b.bn.gamma = copy_of(b.bn.gamma);
    b.bn.beta = copy_of(b.bn.beta);
    b.bn.running_mean = copy_of(b.bn.running_mean);
    b.bn.running_var = copy_of(b.bn.running_var);
  }
  return m;
}

Detector attach_quantizers(const Detector& model, int weight_bits, int act_bits, bool asymmetric_activations) {
  for (int b : {weight_bits, act_bits}) {
    if (b < 2) throw ValidationError("attach_quantizers: bit width " + std::to_string(b) + " < 2");
  }
  Detector m = model.clone();
  auto layers = m.conv_layers();
  for (std::size_t i = 1; i + 1 < layers.size(); ++i) {
    ConvLayer& c = *layers[i];
    c.weight_quant = init_step_from_calibration(c.weight.values(),
                                                QuantizerParams::make(weight_bits, QuantKind::kWeight));
    c.act_quant = QuantizerParams::make(act_bits, QuantKind::kActivation, asymmetric_activations);
  }
  return m;
}

void calibrate_activation_quantizers(Detector& model, const Tensor& images) {
  auto layers = model.conv_layers();
  std::vector<std::optional<QuantizerParams>> saved;
  for (ConvLayer* c : layers) saved.push_back(std::exchange(c->act_quant, std::nullopt));
  ForwardResult r;
  {
    NoGradGuard guard;
    r = model.forward(images, BnMode::kEval, true);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (saved[i]) saved[i] = init_step_from_calibration(r.layer_inputs[i].values(), *saved[i]);
    layers[i]->act_quant = std::move(saved[i]);
  }
}

std::vector<NamedTensor> quantizer_parameters(const Detector& model) {
  std::vector<NamedTensor> out;
  for (const ConvLayer* c : model.conv_layers()) {
    if (c->weight_quant && !c->weight_quant->passthrough()) {
      out.push_back({c->name + ".wq.step", c->weight_quant->step});
    }
    if (c->act_quant && !c->act_quant->passthrough()) {
      out.push_back({c->name + ".aq.step", c->act_quant->step});
      if (c->act_quant->asymmetric) out.push_back({c->name + ".aq.offset", c->act_quant->offset});
    }
  }
  return out;
}

void clamp_quantizer_steps(Detector& model) {
  for (ConvLayer* c : model.conv_layers()) {
    if (c->weight_quant) clamp_step(*c->weight_quant);
    if (c->act_quant) clamp_step(*c->act_quant);
  }
}

BoxEncoding encode_box(const BoxLabel& label, std::size_t grid) {
  const double g = static_cast<double>(grid);
  BoxEncoding e;
  e.gx = std::min(grid - 1, static_cast<std::size_t>(std::max(0.0, std::floor(label.cx * g))));
  e.gy = std::min(grid - 1, static_cast<std::size_t>(std::max(0.0, std::floor(label.cy * g))));
  e.tx = logit(label.cx * g - static_cast<double>(e.gx));
  e.ty = logit(label.cy * g - static_cast<double>(e.gy));
  e.tw = logit(std::sqrt(label.w));
  e.th = logit(std::sqrt(label.h));
  return e;
}

DetectLoss detect_loss(const Tensor& pred, const std::vector<BoxLabel>& labels, const DetectLossWeights& weights) {
  if (pred.dim() != 4 || pred.size(1) <= kBoxChannels || pred.size(2) != pred.size(3)) {
    throw ShapeError("detect_loss: expected [N, 5 + C, G, G], got " + shape_str(pred.shape()));
  }
  const std::size_t n = pred.size(0), d = pred.size(1), grid = pred.size(2);
  const std::size_t num_classes = d - kBoxChannels;
  const std::size_t cells = grid * grid;
  for (const BoxLabel& l : labels) {
    validate_label(l, static_cast<int>(num_classes));
    if (l.batch_index >= n) {
      throw ValidationError("detect_loss: label batch index " + std::to_string(l.batch_index) +
                            " out of range for batch of " + std::to_string(n));
    }
  }

  // Cell ownership: larger area, then lower class id, then earlier label.
  std::vector<long> owner(n * cells, -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const BoxLabel& l = labels[i];
    const BoxEncoding e = encode_box(l, grid);
    long& slot = owner[l.batch_index * cells + e.gy * grid + e.gx];
    if (slot < 0) {
      slot = static_cast<long>(i);
      continue;
    }
    const BoxLabel& cur = labels[static_cast<std::size_t>(slot)];
    const double a = l.w * l.h, b = cur.w * cur.h;
    if (a > b || (a == b && l.class_id < cur.class_id)) slot = static_cast<long>(i);
  }

  const auto p = pred.data();
  auto at = [&](std::size_t img, std::size_t ch, std::size_t cell) { return (img * d + ch) * cells + cell; };
  std::size_t assigned = 0;
  for (long o : owner) assigned += o >= 0;

  std::vector<double> g_box(pred.numel(), 0.0), g_conf(pred.numel(), 0.0), g_cls(pred.numel(), 0.0);
  double box = 0.0, conf = 0.0, cls = 0.0;
  const double inv_cells = 1.0 / static_cast<double>(n * cells);
  const double inv_assigned = assigned ? 1.0 / static_cast<double>(assigned) : 0.0;
  const double inv_cls = assigned ? 1.0 / static_cast<double>(assigned * num_classes) : 0.0;
  const double gd = static_cast<double>(grid);

  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const long o = owner[img * cells + cell];
      const std::size_t oi = at(img, kObjChannel, cell);
      const double t = o >= 0 ? 1.0 : 0.0;
      conf += softplus(p[oi]) - t * p[oi];
      g_conf[oi] = (sigmoid_of(p[oi]) - t) * inv_cells;
      if (o < 0) continue;

      const BoxLabel& l = labels[static_cast<std::size_t>(o)];
      for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t ci = at(img, kBoxChannels + c, cell);
        const double tc = static_cast<int>(c) == l.class_id ? 1.0 : 0.0;
        cls += softplus(p[ci]) - tc * p[ci];
        g_cls[ci] = (sigmoid_of(p[ci]) - tc) * inv_cls;
      }

      const double gx = static_cast<double>(cell % grid), gy = static_cast<double>(cell / grid);
      const double sx = sigmoid_of(p[at(img, 0, cell)]), sy = sigmoid_of(p[at(img, 1, cell)]);
      const double sw = sigmoid_of(p[at(img, 2, cell)]), sh = sigmoid_of(p[at(img, 3, cell)]);
      const double px = (sx + gx) / gd, py = (sy + gy) / gd, pw = sw * sw, ph = sh * sh;

      const double x2 = px + pw / 2, x1 = px - pw / 2, lx2 = l.cx + l.w / 2, lx1 = l.cx - l.w / 2;
      const double y2 = py + ph / 2, y1 = py - ph / 2, ly2 = l.cy + l.h / 2, ly1 = l.cy - l.h / 2;
      const double iw = std::min(x2, lx2) - std::max(x1, lx1);
      const double ih = std::min(y2, ly2) - std::max(y1, ly1);
      double overlap = 0.0;
      double d_px = 0, d_py = 0, d_pw = 0, d_ph = 0;  // d IoU / d box
      if (iw > 0 && ih > 0) {
        const double inter = iw * ih;
        const double uni = pw * ph + l.w * l.h - inter;
        overlap = inter / uni;
        const double d_inter = (uni + inter) / (uni * uni);
        const double d_area = -inter / (uni * uni);
        const double rx = x2 < lx2 ? 1.0 : 0.0, lx = x1 > lx1 ? 1.0 : 0.0;
        const double ry = y2 < ly2 ? 1.0 : 0.0, ly = y1 > ly1 ? 1.0 : 0.0;
        d_px = d_inter * ih * (rx - lx);
        d_py = d_inter * iw * (ry - ly);
        d_pw = d_inter * ih * 0.5 * (rx + lx) + d_area * ph;
        d_ph = d_inter * iw * 0.5 * (ry + ly) + d_area * pw;
      }
      box += 1.0 - overlap;
      const double k = -inv_assigned;  // d box_loss / d IoU
      g_box[at(img, 0, cell)] = k * d_px * sx * (1 - sx) / gd;
      g_box[at(img, 1, cell)] = k * d_py * sy * (1 - sy) / gd;
      g_box[at(img, 2, cell)] = k * d_pw * 2 * sw * sw * (1 - sw);
      g_box[at(img, 3, cell)] = k * d_ph * 2 * sh * sh * (1 - sh);
    }
  }

  DetectLoss out;
  out.box = box * inv_assigned;
  out.conf = conf * inv_cells;
  out.cls = cls * inv_cls;
  out.components = Tensor({3}, {out.box, out.conf, out.cls});
  if (needs_grad({&pred})) {
    out.components.set_requires_grad(true);
    Tape::current().record([pred, comp = out.components, g_box = std::move(g_box), g_conf = std::move(g_conf),
                            g_cls = std::move(g_cls)]() {
      if (!comp.has_grad()) return;
      const auto up = comp.grad();
      auto gp = pred.grad();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += up[0] * g_box[i] + up[1] * g_conf[i] + up[2] * g_cls[i];
    });
  }
  out.total = sum(mul(out.components, Tensor({3}, {weights.box, weights.conf, weights.cls})));
  return out;
}

std::vector<BoxLabel> non_max_suppression(std::vector<BoxLabel> boxes, double iou_thresh) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const BoxLabel& a, const BoxLabel& b) {
    if (a.batch_index != b.batch_index) return a.batch_index < b.batch_index;
    return a.confidence > b.confidence;
  });
  std::vector<BoxLabel> kept;
  std::size_t image_start = 0;
  for (const BoxLabel& b : boxes) {
    if (!kept.empty() && kept.back().batch_index != b.batch_index) image_start = kept.size();
    bool suppressed = false;
    for (std::size_t i = image_start; i < kept.size() && !suppressed; ++i) {
      suppressed = kept[i].batch_index == b.batch_index && iou(kept[i], b) > iou_thresh;
    }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

std::vector<BoxLabel> decode_predictions(const Tensor& pred, double conf_thresh, double iou_thresh) {
  if (pred.dim() != 4 || pred.size(1) <= kBoxChannels || pred.size(2) != pred.size(3)) {
    throw ShapeError("decode_predictions: expected [N, 5 + C, G, G], got " + shape_str(pred.shape()));
  }
  const std::size_t n = pred.size(0), d = pred.size(1), grid = pred.size(2), cells = grid * grid;
  const double gd = static_cast<double>(grid);
  const auto p = pred.data();
  std::vector<BoxLabel> boxes;
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t cell = 0; cell < cells; ++cell) {
      auto v = [&](std::size_t ch) { return p[(img * d + ch) * cells + cell]; };
      const double obj = sigmoid_of(v(kObjChannel));
      if (obj <= conf_thresh) continue;  // score <= obj, cheap early exit
      int best = 0;
      double best_logit = v(kBoxChannels);
      for (std::size_t c = 1; c < d - kBoxChannels; ++c) {
        if (v(kBoxChannels + c) > best_logit) {
          best_logit = v(kBoxChannels + c);
          best = static_cast<int>(c);
        }
      }
      const double score = obj * sigmoid_of(best_logit);
      if (!(score > conf_thresh)) continue;
      BoxLabel b;
      b.batch_index = img;
      b.class_id = best;
      b.cx = (sigmoid_of(v(0)) + static_cast<double>(cell % grid)) / gd;
      b.cy = (sigmoid_of(v(1)) + static_cast<double>(cell / grid)) / gd;
      const double sw = sigmoid_of(v(2)), sh = sigmoid_of(v(3));
      // Clip to the image so decoded boxes are valid labels.
      const double x1 = std::max(0.0, b.cx - sw * sw / 2), x2 = std::min(1.0, b.cx + sw * sw / 2);
      const double y1 = std::max(0.0, b.cy - sh * sh / 2), y2 = std::min(1.0, b.cy + sh * sh / 2);
      b.cx = (x1 + x2) / 2;
      b.cy = (y1 + y2) / 2;
      b.w = x2 - x1;
      b.h = y2 - y1;
      b.confidence = score;
      boxes.push_back(b);
    }
  }
  return non_max_suppression(std::move(boxes), iou_thresh);
}

}  // namespace zsq
