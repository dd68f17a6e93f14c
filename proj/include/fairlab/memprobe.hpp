#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fairlab/dataset.hpp"
#include "fairlab/model.hpp"

namespace fairlab {

struct ScoredNeuron {
  NeuronRef ref;
  double score = 0.0;
};

/// Criticality of each unmasked hidden neuron for one example: the L2 norm,
/// over the neuron's incoming weight row and bias, of the difference between
/// the example's loss gradient and the mean loss gradient of the reference
/// batch. All gradients are taken under the current mask. Returned in
/// (layer, neuron) order.
std::vector<ScoredNeuron> criticality_scores(const Model& model, const GroupedDataset& ds,
                                             std::int64_t target_id,
                                             const std::vector<std::int64_t>& reference_ids,
                                             const NeuronMaskSet& mask,
                                             Mode mode = Mode::kTrain);

struct LocalizationResult {
  std::int64_t example_id = 0;
  std::vector<NeuronRef> removed;  // in removal order
  bool flipped = false;
  int iterations = 0;
  std::vector<std::int64_t> reference_batch_ids;
  std::vector<double> loss_trace;  // target loss before any removal, then after each
};

/// Greedy search for the neurons a prediction depends on: repeatedly masks
/// the highest-criticality neuron (ties to the lowest layer then neuron
/// index) until the prediction leaves the true class or max_iters is hit.
/// An example that is already misclassified flips at zero removals. The
/// model's parameters are never modified.
LocalizationResult critical_neurons(const Model& model, const GroupedDataset& ds,
                                    std::int64_t target_id,
                                    const std::vector<std::int64_t>& reference_ids,
                                    int max_iters, Mode mode = Mode::kTrain);

/// Exhaustive minimal flipping set over all hidden-neuron subsets of size
/// <= size_limit (<= 4, and only for models with <= 16 hidden neurons).
/// Subsets are tried smallest first, lexicographically within a size, so the
/// result is deterministic. nullopt if no subset within the limit flips.
std::optional<std::vector<NeuronRef>> brute_force_min_flip(const Model& model,
                                                           const GroupedDataset& ds,
                                                           std::int64_t target_id,
                                                           int size_limit,
                                                           Mode mode = Mode::kTrain);

struct ProbeRow {
  std::int64_t example_id = 0;
  int group_y = 0;
  int group_a = 0;
  int n_removed = 0;
  bool flipped = false;
  double train_wga_after_drop = 0.0;
  double test_wga_after_drop = 0.0;
};

struct GroupProbeStat {
  GroupId group;
  std::int64_t count = 0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double mean = 0.0;
  double flipped_fraction = 0.0;
};

struct ProbeConfig {
  int max_iters = 20;
  int reference_batch_size = 64;
  std::uint64_t seed = 0;  // root for per-target reference batch sampling
  Mode mode = Mode::kTrain;

  void validate() const;
};

struct ProbeReport {
  std::vector<ProbeRow> rows;
  std::vector<GroupProbeStat> per_group;
  double baseline_train_wga = 0.0;  // eval split, no mask
  double baseline_test_wga = 0.0;
  // Fraction of probed examples whose removal left test-mode worst-group
  // accuracy at or above the unmasked baseline.
  double improved_test_fraction = 0.0;
};

/// Runs critical_neurons for every target (reference batches drawn from
/// probe_ds by a per-target subseed) and measures eval-split worst-group
/// accuracy with each target's removed set masked, in both forward modes.
ProbeReport probe_report(const Model& model, const GroupedDataset& probe_ds,
                         const GroupedDataset& eval_ds,
                         const std::vector<std::int64_t>& target_ids,
                         const ProbeConfig& config);

/// Linear-interpolation quantile of a sample (the spreadsheet convention:
/// h = (n - 1) p). `sorted` must be ascending and non-empty.
double quantile_sorted(const std::vector<double>& sorted, double p);

}  // namespace fairlab
