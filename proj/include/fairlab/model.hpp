#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fairlab/fair_dropout.hpp"
#include "fairlab/tensor.hpp"

namespace fairlab {

/// Identifies one hidden neuron: the output coordinate `neuron_index` of the
/// dense layer at stack position `layer_index`. The head's output logits are
/// not maskable.
struct NeuronRef {
  int layer_index = 0;
  std::uint32_t neuron_index = 0;
  auto operator<=>(const NeuronRef&) const = default;
};

/// Set of neurons forced to zero at their dense layer's output. Masking is
/// idempotent; the empty set is the identity. Parameters are never touched.
class NeuronMaskSet {
 public:
  void add(NeuronRef ref);
  bool contains(NeuronRef ref) const;
  bool empty() const { return count_ == 0; }
  std::size_t size() const { return count_; }

  /// Sorted dropped indices for one layer, or nullptr when none.
  const std::vector<std::uint32_t>* layer_mask(int layer_index) const;

  /// All members, ordered by (layer_index, neuron_index).
  std::vector<NeuronRef> refs() const;

 private:
  std::map<int, std::vector<std::uint32_t>> by_layer_;
  std::size_t count_ = 0;
};

/// Fully-connected layer, y = W x + b with W shaped (out, in).
struct DenseLayer {
  Tensor weights;  // (out_width, in_width)
  Tensor bias;     // (out_width)
  int layer_index = 0;

  std::size_t in_width() const { return weights.dim(1); }
  std::size_t out_width() const { return weights.dim(0); }
};

struct ReluLayer {
  int layer_index = 0;
};

struct FairDropoutLayer {
  FairDropoutConfig config;
  int layer_index = 0;
};

using Layer = std::variant<DenseLayer, ReluLayer, FairDropoutLayer>;

/// Gradients for one dense layer; shapes match the layer's parameters.
struct LayerGradient {
  int layer_index = 0;
  Tensor weights;
  Tensor bias;
};

/// Per-layer parameter gradients of the loss, in stack order.
struct GradientRecord {
  std::vector<LayerGradient> dense;
};

/// Ordered layer stack with an explicit train/test mode. Forward and backward
/// are deterministic: identical inputs and parameters give bitwise-identical
/// results.
class Model {
 public:
  std::vector<Layer> layers;
  Mode mode = Mode::kTrain;
  std::uint64_t seed = 0;

  std::size_t input_width() const;
  std::size_t output_width() const;
  bool has_fair_dropout() const;
  /// Stack index of the final dense layer (the classifier head), or -1.
  int head_layer_index() const;
  /// Hidden (maskable) neurons: every dense output except the head's.
  std::vector<NeuronRef> hidden_neurons() const;
  std::size_t parameter_count() const;

  /// Single-example forward under the given mode. `example_id` keys
  /// fair-dropout allocations in train mode; `mask` applies hard zeros at
  /// dense outputs.
  Tensor forward(const Tensor& x, Mode mode, std::int64_t example_id = -1,
                 const NeuronMaskSet* mask = nullptr) const;

  /// Forward under the model's own mode.
  Tensor forward(const Tensor& x, std::int64_t example_id = -1,
                 const NeuronMaskSet* mask = nullptr) const;

  /// Argmax class of the logits; ties break to the lowest index.
  int predict(const Tensor& x, Mode mode, std::int64_t example_id = -1,
              const NeuronMaskSet* mask = nullptr) const;
};

/// y_j = b_j + sum_i W[j,i] x_i. Accepts a (batch, in) matrix as well, one
/// row per example.
Tensor dense_forward(const Tensor& x, const DenseLayer& layer);

/// Elementwise max(0, x).
Tensor relu(const Tensor& x);

struct XentResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Numerically stable softmax cross-entropy and its logit gradient:
/// loss = logsumexp(logits) - logits[label], grad = softmax - onehot.
XentResult softmax_cross_entropy(const Tensor& logits, std::size_t label);

/// Cross-entropy loss of the model on one example.
double model_loss(const Model& model, const Tensor& x, std::size_t label,
                  std::int64_t example_id = -1, const NeuronMaskSet* mask = nullptr);

/// Exact reverse-mode gradients of the cross-entropy loss with respect to
/// every dense layer's parameters. Masked neurons contribute zero gradient.
GradientRecord model_backward(const Model& model, const Tensor& x, std::size_t label,
                              std::int64_t example_id = -1,
                              const NeuronMaskSet* mask = nullptr);

struct BackwardResult {
  double loss = 0.0;
  GradientRecord grads;
};

/// Loss and gradients in one reverse pass (what the trainer consumes).
BackwardResult model_loss_and_backward(const Model& model, const Tensor& x,
                                       std::size_t label, std::int64_t example_id = -1,
                                       const NeuronMaskSet* mask = nullptr);

/// Central-difference check of model_backward. Returns
/// max over parameters of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double finite_difference_check(const Model& model, const Tensor& x, std::size_t label,
                               double epsilon, std::int64_t example_id = -1,
                               const NeuronMaskSet* mask = nullptr);

/// Uniform(-s, s) init with s = sqrt(6 / (in + out)), one subseed per dense
/// layer so inserting a parameter-free layer cannot shift later draws.
void initialize_parameters(Model& model, std::uint64_t init_seed);

/// Checkpoint JSON with canonical 17-significant-digit float formatting;
/// write -> read -> write is byte-identical.
std::string checkpoint_to_string(const Model& model);
Model checkpoint_from_string(const std::string& text);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace fairlab
