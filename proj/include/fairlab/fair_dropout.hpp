#pragma once

#include <cstdint>
#include <vector>

#include "fairlab/tensor.hpp"

namespace fairlab {

/// Forward semantics selector for layers that behave differently during
/// training and inference.
enum class Mode { kTrain, kTest };

/// Rounds to the nearest integer, half-to-even, independent of the
/// floating-point environment.
long long round_half_even(double x);

/// Partition of a width-H layer into a fixed generalizing prefix and a
/// memorizing pool, from which every example draws the same fixed number of
/// neurons.
///
/// gen_count = round(p_gen * H); the pool is [gen_count, H); each example is
/// allocated k = round(p_mem * pool_size) pool neurons.
struct FairDropoutConfig {
  std::size_t width = 0;  // H, size of the preceding layer
  double p_gen = 1.0;     // fraction of neurons designated generalizing
  double p_mem = 0.0;     // per-example sampling fraction over the pool
  std::uint64_t allocation_seed = 0;

  void validate() const;

  std::size_t gen_count() const {
    return static_cast<std::size_t>(round_half_even(p_gen * static_cast<double>(width)));
  }
  std::size_t mem_pool_size() const { return width - gen_count(); }
  std::size_t mem_count() const {
    return static_cast<std::size_t>(
        round_half_even(p_mem * static_cast<double>(mem_pool_size())));
  }
};

/// The memorizing-neuron set of one example. Pure function of
/// (example_id, allocation_seed, config); never serialized, always re-derived.
struct MaskAllocation {
  std::int64_t example_id = 0;
  std::vector<std::uint32_t> mem_indices;  // sorted, each in [gen_count, width)
};

/// Draws k pool indices uniformly without replacement via a Fisher-Yates
/// prefix over the pool, keyed by (allocation_seed, example_id). Repeated
/// calls are identical, across process restarts included.
MaskAllocation allocate_mask(const FairDropoutConfig& config, std::int64_t example_id);

/// Training forward: keeps the generalizing prefix plus the example's own
/// memorizing neurons, zeroes the rest of the pool. No rescaling.
Tensor fair_dropout_forward_train(const FairDropoutConfig& config,
                                  const MaskAllocation& allocation, const Tensor& x);

/// Testing forward: keeps only the generalizing prefix; the memorizing pool
/// is dropped regardless of example identity. No rescaling.
Tensor fair_dropout_forward_test(const FairDropoutConfig& config, const Tensor& x);

/// Gradient of the mask: zero exactly where the forward output was zeroed.
/// `allocation` may be null in test mode.
Tensor fair_dropout_backward(const FairDropoutConfig& config,
                             const MaskAllocation* allocation, Mode mode,
                             const Tensor& upstream_grad);

}  // namespace fairlab
