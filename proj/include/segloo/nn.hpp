#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "segloo/tensor.hpp"

namespace segloo::nn {

enum class LayerKind { kConv2d, kRelu, kMaxPool2x2, kDense, kFlatten, kBatchNorm, kSoftmax };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  // conv2d
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  // dense
  int in_features = 0;
  int out_features = 0;
  // batchnorm (inference form: gamma * (x - mean) / sqrt(var + eps) + beta)
  int channels = 0;
  float epsilon = 1e-5f;

  std::string describe() const;
};

/// Architecture description: layers in order plus the per-image input shape (C, H, W).
struct ArchConfig {
  std::string name;
  Shape input_shape;
  int class_count = 10;
  std::vector<LayerSpec> layers;
  // Parameter count stated in the config file, if any; checked against the built network.
  std::optional<std::size_t> declared_parameter_count;

  static ArchConfig parse(const std::string& json_text);
  static ArchConfig load(const std::filesystem::path& path);
  std::string to_json() const;
};

/// Output values of requested layers, one tensor per layer with a leading batch axis.
struct ForwardTrace {
  std::vector<int> layers;
  std::vector<Tensor> values;

  const Tensor& at(int layer) const;
};

struct ForwardResult {
  Tensor logits;  // N x class_count
  Tensor probs;   // softmax(logits)
  ForwardTrace trace;
};

struct TrainHyper {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  int epochs = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;      // mean cross-entropy over each epoch
  std::vector<double> epoch_accuracy;  // running train accuracy per epoch
  double initial_loss = 0.0;           // loss of the first mini-batch before any update
};

/// A feed-forward convolutional network. Immutable through its const interface, so
/// forward and gradient calls may run concurrently.
///
/// Tap layer ids index the layer list. A trailing softmax is treated as the activation
/// of the layer before it: that layer's trace holds probabilities and the softmax
/// itself has no separate id.
class Network {
 public:
  static Network build(const ArchConfig& arch, std::uint64_t seed);

  const ArchConfig& arch() const noexcept { return arch_; }
  std::size_t parameter_count() const noexcept;
  int class_count() const noexcept { return arch_.class_count; }
  const Shape& input_shape() const noexcept { return arch_.input_shape; }

  std::size_t layer_count() const noexcept { return arch_.layers.size(); }
  // Number of layers addressable by taps (excludes a trailing softmax).
  std::size_t tap_layer_count() const noexcept;
  // Per-image output shape of each layer.
  const Shape& layer_output_shape(std::size_t layer) const { return out_shapes_.at(layer); }
  std::size_t layer_node_count(std::size_t layer) const { return shape_size(layer_output_shape(layer)); }

  // Parameter tensors of one layer (weight, bias / gamma, beta, mean, var).
  std::span<Tensor> layer_params(std::size_t layer) { return params_.at(layer); }
  std::span<const Tensor> layer_params(std::size_t layer) const { return params_.at(layer); }
  // Stable tensor names used by the weight container.
  std::vector<std::string> param_names() const;
  std::vector<const Tensor*> all_params() const;
  std::vector<Tensor*> all_params();

  ForwardResult forward(const Tensor& batch, std::span<const int> taps = {}) const;

  // Gradient of the per-image cross-entropy loss with respect to each input image.
  Tensor input_gradient(const Tensor& batch, std::span<const int> labels) const;
  // Gradient of the mean cross-entropy, aligned with all_params(); batch-norm tensors are
  // frozen and get zeros.
  std::vector<Tensor> parameter_gradients(const Tensor& batch, std::span<const int> labels) const;
  // Gradient of one logit with respect to each input image.
  Tensor logit_gradient(const Tensor& batch, int class_index) const;
  // Logits of one image (1 x C x H x W) and the gradient of every logit, class_count x C x H x W.
  std::pair<Tensor, Tensor> logit_jacobian(const Tensor& image) const;
  // Gradient of one softmax probability with respect to each input image.
  Tensor prob_gradient(const Tensor& batch, int class_index) const;

  // Mean cross-entropy of a labelled batch.
  double loss(const Tensor& batch, std::span<const int> labels) const;

 private:
  friend TrainReport train(Network& net, const Tensor& images, std::span<const int> labels,
                           const TrainHyper& hyper,
                           const std::function<void(int, double, double)>& on_epoch);
  Network() = default;

  struct Activations;
  void check_batch(const Tensor& batch) const;
  void forward_image(const float* input, Activations& acts) const;
  // Backpropagates d(loss)/d(logits) for one image; param grads are accumulated when given.
  void backward_image(const Activations& acts, std::span<const float> grad_logits, float* grad_input,
                      std::vector<std::vector<Tensor>>* param_grads) const;

  ArchConfig arch_;
  std::vector<std::vector<Tensor>> params_;
  std::vector<Shape> out_shapes_;
  bool trailing_softmax_ = false;
};

/// Mini-batch SGD with momentum on mean cross-entropy. Mutates `net` in place.
/// `on_epoch(epoch, loss, accuracy)` is invoked after each epoch when set.
TrainReport train(Network& net, const Tensor& images, std::span<const int> labels, const TrainHyper& hyper,
                  const std::function<void(int, double, double)>& on_epoch = {});

void softmax_inplace(std::span<float> row);
int argmax(std::span<const float> row);

// Weight container ("SFW1").
void save_weights(const Network& net, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_weights(const Network& net);
Network load_weights(const std::filesystem::path& path, const ArchConfig& arch);
Network decode_weights(std::span<const std::uint8_t> bytes, const ArchConfig& arch);

}  // namespace segloo::nn
