#pragma once
// Tiny single-scale anchor-free grid detector.
//
// Backbone: five conv3x3 + BN + SiLU blocks, three of them stride 2, so a
// 64x64 input yields an 8x8 grid. Head: a 1x1 conv with bias producing, per
// cell, (tx, ty, tw, th, obj, class logits...). Decoding:
//   cx = (sigmoid(tx) + gx) / G    w = sigmoid(tw)^2
//   cy = (sigmoid(ty) + gy) / G    h = sigmoid(th)^2
//   score = sigmoid(obj) * max_c sigmoid(cls_c)

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zsq/ops.hpp"
#include "zsq/quant.hpp"
#include "zsq/tensor.hpp"

namespace zsq {

struct BoxLabel {
  std::size_t batch_index = 0;
  int class_id = 0;
  double cx = 0.5, cy = 0.5, w = 0.0, h = 0.0;
  double confidence = 1.0;

  bool operator==(const BoxLabel&) const = default;
};

double iou(const BoxLabel& a, const BoxLabel& b);

// Throws ValidationError unless the class is in [0, num_classes), the center
// lies in [0,1]^2, and 0 < w, h <= 1.
void validate_label(const BoxLabel& label, int num_classes);

struct DetectorConfig {
  std::size_t image_size = 64;
  int num_classes = 6;
  std::array<std::size_t, 3> channels = {16, 32, 48};
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kTotalStride = 8;
inline constexpr std::size_t kBoxChannels = 5;  // tx, ty, tw, th, obj
inline constexpr std::size_t kObjChannel = 4;

struct ConvLayer {
  std::string name;
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout] or undefined
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::optional<QuantizerParams> weight_quant;
  std::optional<QuantizerParams> act_quant;  // applied to the layer input
};

struct BnLayer {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
};

struct Block {
  ConvLayer conv;
  BnLayer bn;
  bool tap = false;  // output exposed for feature distillation
};

struct ForwardResult {
  Tensor pred;                        // [N, 5 + C, G, G]
  std::vector<Tensor> taps;           // post-activation outputs of tapped blocks
  std::vector<BatchNormResult> bn;    // one per block
  std::vector<Tensor> layer_inputs;   // input of every conv, when requested
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Detector {
 public:
  DetectorConfig config;
  std::vector<Block> blocks;
  ConvLayer head;

  // Throws ValidationError on bad geometry (size not divisible by the stride,
  // no classes, zero channels).
  static Detector build(const DetectorConfig& config);

  std::size_t grid() const { return config.image_size / kTotalStride; }
  std::size_t outputs_per_cell() const { return kBoxChannels + static_cast<std::size_t>(config.num_classes); }

  // kTrain updates the running statistics in place; kEval and kMeasure never
  // mutate the model, so a const teacher can be shared across threads.
  ForwardResult forward(const Tensor& images, BnMode mode, bool keep_layer_inputs = false) const;

  // Learnable tensors: conv weights and biases, BN gamma and beta.
  std::vector<NamedTensor> parameters() const;
  // BN running statistics.
  std::vector<NamedTensor> buffers() const;
  // Every conv, head last.
  std::vector<const ConvLayer*> conv_layers() const;
  std::vector<ConvLayer*> conv_layers();

  std::size_t parameter_count() const;
  bool quantized() const;

  // Deep copy: no storage shared with this model.
  Detector clone() const;
};

// Wraps every conv except the first and the head with a weight quantizer and
// an input-activation quantizer. Weight steps are initialized from the
// weights; activation steps start at 1 until calibrate_activation_quantizers.
// Bit width 32 leaves the respective tensors unquantized.
Detector attach_quantizers(const Detector& model, int weight_bits, int act_bits,
                           bool asymmetric_activations = false);

// Initializes activation steps from the layer inputs seen on one batch.
void calibrate_activation_quantizers(Detector& model, const Tensor& images);

// Trainable quantizer tensors (steps, and offsets of asymmetric quantizers).
std::vector<NamedTensor> quantizer_parameters(const Detector& model);
void clamp_quantizer_steps(Detector& model);

struct DetectLossWeights {
  double box = 0.05;
  double conf = 1.0;
  double cls = 0.5;
};

struct DetectLoss {
  Tensor total;       // scalar, weighted sum
  Tensor components;  // [3]: box, conf, cls (unweighted)
  double box = 0, conf = 0, cls = 0;
};

// Each label is assigned to the cell containing its center; when several
// labels share a cell the larger area wins, then the lower class id.
//   box  = mean over assigned cells of 1 - IoU(decoded, label)
//   conf = mean over all cells of BCE(obj, assigned)
//   cls  = mean over assigned cells and classes of BCE(cls_c, one-hot)
DetectLoss detect_loss(const Tensor& pred, const std::vector<BoxLabel>& labels,
                       const DetectLossWeights& weights = {});

std::vector<BoxLabel> decode_predictions(const Tensor& pred, double conf_thresh, double iou_thresh);

// Greedy suppression by descending confidence, class-agnostic, per image.
// Ties in confidence keep the earlier box.
std::vector<BoxLabel> non_max_suppression(std::vector<BoxLabel> boxes, double iou_thresh);

// Inverse of the decoding for a label: the owning cell and the logits that
// decode exactly onto the box.
struct BoxEncoding {
  std::size_t gx = 0, gy = 0;
  double tx = 0, ty = 0, tw = 0, th = 0;
};
BoxEncoding encode_box(const BoxLabel& label, std::size_t grid);

}  // namespace zsq
