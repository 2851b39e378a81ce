#pragma once

// Small sequential CNN with explicit forward and backward passes.
//
// Activations are laid out NCHW for feature maps and NF after flatten. Every
// model ends with an implicit dense(2) head followed by softmax; class index 0
// is the negative label and 1 the positive label.

#include "deepterra/image.hpp"
#include "deepterra/nn/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace deepterra::nn {

enum class Activation { Relu, Sigmoid, Tanh };

const char* to_string(Activation a);
Activation parse_activation(const std::string& s);

struct Conv2D {
  std::size_t kernel = 3;
  std::size_t channels = 16;
  std::size_t stride = 1;
};
struct MaxPool {
  std::size_t k = 2;
};
struct Flatten {};
struct Dense {
  std::size_t units = 64;
};
struct Dropout {
  double p = 0.5;
};
struct ActivationLayer {
  Activation kind = Activation::Relu;
};

using LayerSpec = std::variant<Conv2D, MaxPool, Flatten, Dense, Dropout, ActivationLayer>;

inline constexpr std::size_t kClasses = 2;

struct ModelSpec {
  std::string architecture = "convnet";
  std::size_t input_px = 32;
  std::size_t input_channels = 3;
  std::vector<LayerSpec> layers;

  // Per-sample output shape of every layer followed by the head's input
  // features. Throws Domain when the layers do not chain.
  std::vector<Shape> layer_shapes() const;
  std::size_t head_inputs() const;
};

nlohmann::ordered_json to_json(const ModelSpec& spec);
ModelSpec model_from_json(const nlohmann::json& j);

// conv(3x3,16)-act-pool(2)-conv(3x3,32)-act-pool(2)-flatten-dense(64)-act-dropout.
ModelSpec default_convnet(std::size_t input_px, Activation act = Activation::Relu, double dropout = 0.5);

// Named parameters. Mutable access bumps a version counter so forward caches
// built against older values are detected as stale.
class WeightMap {
 public:
  const Tensor& at(const std::string& name) const;
  Tensor& mutable_at(const std::string& name);
  void set(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::uint64_t version() const { return version_; }
  std::size_t parameter_count() const;

  friend bool operator==(const WeightMap& a, const WeightMap& b) { return a.tensors_ == b.tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
  std::uint64_t version_ = 0;
};

using Gradients = std::map<std::string, Tensor>;

std::string weight_name(std::size_t layer, const char* part);  // "layer<i>.weight" / "layer<i>.bias"
inline const std::string kHeadWeight = "head.weight";
inline const std::string kHeadBias = "head.bias";

// Expected parameter shapes, in deterministic order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelSpec& spec);

// He-uniform kernels, zero biases.
WeightMap init_weights(const ModelSpec& spec, std::uint64_t seed);
WeightMap zero_weights(const ModelSpec& spec);
void check_weights(const ModelSpec& spec, const WeightMap& w);

enum class Mode { Train, Eval };

struct ForwardOptions {
  bool check_finite = false;  // throw Training on the first non-finite activation
};

struct LayerCache {
  Tensor input;
  Tensor output;
  std::vector<std::uint32_t> argmax;  // maxpool routing
  std::vector<double> mask;           // dropout scaling
};

class ForwardCache {
 public:
  const Tensor& logits() const { return logits_; }

 private:
  friend struct ForwardPass;
  friend Gradients backward(ForwardCache& cache, const Tensor& grad_logits);

  const ModelSpec* spec_ = nullptr;
  const WeightMap* weights_ = nullptr;
  std::uint64_t weights_version_ = 0;
  bool consumed_ = false;
  Mode mode_ = Mode::Eval;
  std::vector<LayerCache> layers_;
  Tensor head_input_;
  Tensor logits_;
};

struct ForwardResult {
  Tensor probabilities;  // [N, 2], rows sum to 1
  ForwardCache cache;
};

// batch is [N, C, H, W] with values already scaled to [0, 1]. The model spec and
// weights must outlive the returned cache.
ForwardResult forward(const ModelSpec& spec, const WeightMap& weights, const Tensor& batch, Mode mode,
                      std::uint64_t dropout_seed, const ForwardOptions& opts = {});

// grad_logits is dL/dlogits, [N, 2]. A cache can be consumed once and only
// while its weights are unchanged; otherwise throws Domain.
Gradients backward(ForwardCache& cache, const Tensor& grad_logits);

Tensor softmax(const Tensor& logits);

struct LossResult {
  double loss;          // mean cross-entropy
  Tensor grad_logits;   // d(mean loss)/dlogits
  std::size_t correct;  // argmax hits
};

LossResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Packs images into [N, 3, H, W] with samples scaled to [0, 1].
Tensor images_to_batch(std::span<const RasterImage* const> images);
Tensor image_to_batch(const RasterImage& img);

}  // namespace deepterra::nn
