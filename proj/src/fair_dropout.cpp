#include "fairlab/fair_dropout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fairlab/errors.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

long long round_half_even(double x) {
  double f = std::floor(x);
  double frac = x - f;
  long long lo = static_cast<long long>(f);
  if (frac > 0.5) return lo + 1;
  if (frac < 0.5) return lo;
  return (lo % 2 == 0) ? lo : lo + 1;
}

void FairDropoutConfig::validate() const {
  if (width < 1) {
    throw ConfigError("fair dropout width must be >= 1, got " + std::to_string(width));
  }
  if (!(p_gen > 0.0 && p_gen <= 1.0)) {
    throw ConfigError("p_gen must be in (0, 1], got " + std::to_string(p_gen));
  }
  if (!(p_mem >= 0.0 && p_mem <= 1.0)) {
    throw ConfigError("p_mem must be in [0, 1], got " + std::to_string(p_mem));
  }
}

MaskAllocation allocate_mask(const FairDropoutConfig& config, std::int64_t example_id) {
  config.validate();
  const std::size_t gen = config.gen_count();
  const std::size_t pool = config.mem_pool_size();
  const std::size_t k = config.mem_count();

  MaskAllocation alloc;
  alloc.example_id = example_id;
  if (k == 0) return alloc;

  // Counter-based key: one mixing round over (seed, id) seeds the stream.
  std::uint64_t key = config.allocation_seed;
  key = splitmix64(key);
  key ^= static_cast<std::uint64_t>(example_id) * 0x9e3779b97f4a7c15ULL;
  Rng rng(key);

  // Fisher-Yates prefix of length k over the pool: exact-k, uniform without
  // replacement.
  std::vector<std::uint32_t> pool_indices(pool);
  std::iota(pool_indices.begin(), pool_indices.end(), static_cast<std::uint32_t>(gen));
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(pool - i));
    std::swap(pool_indices[i], pool_indices[j]);
  }
  alloc.mem_indices.assign(pool_indices.begin(), pool_indices.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(alloc.mem_indices.begin(), alloc.mem_indices.end());
  return alloc;
}

namespace {

void check_width(const FairDropoutConfig& config, const Tensor& x) {
  if (x.rank() != 1 || x.dim(0) != config.width) {
    throw DimensionError("fair dropout expects a vector of width " +
                         std::to_string(config.width) + ", got shape " + x.shape_string());
  }
}

}  // namespace

Tensor fair_dropout_forward_train(const FairDropoutConfig& config,
                                  const MaskAllocation& allocation, const Tensor& x) {
  check_width(config, x);
  const std::size_t gen = config.gen_count();
  Tensor out({config.width});
  for (std::size_t i = 0; i < gen; ++i) out[i] = x[i];
  for (std::uint32_t idx : allocation.mem_indices) out[idx] = x[idx];
  return out;
}

Tensor fair_dropout_forward_test(const FairDropoutConfig& config, const Tensor& x) {
  check_width(config, x);
  const std::size_t gen = config.gen_count();
  Tensor out({config.width});
  for (std::size_t i = 0; i < gen; ++i) out[i] = x[i];
  return out;
}

Tensor fair_dropout_backward(const FairDropoutConfig& config,
                             const MaskAllocation* allocation, Mode mode,
                             const Tensor& upstream_grad) {
  check_width(config, upstream_grad);
  if (mode == Mode::kTest) {
    return fair_dropout_forward_test(config, upstream_grad);
  }
  if (allocation == nullptr) {
    throw ConfigError("train-mode fair dropout backward requires an allocation");
  }
  return fair_dropout_forward_train(config, *allocation, upstream_grad);
}

}  // namespace fairlab
