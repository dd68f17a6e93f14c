#include "fairlab/memprobe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairlab/errors.hpp"
#include "fairlab/metrics.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

namespace {

// Flattened per-parameter gradients in stack order, one slot per dense layer.
struct FlatGrads {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;
  std::vector<int> layer_index;
  std::vector<std::size_t> in_width;

  explicit FlatGrads(const Model& model) {
    for (const Layer& layer : model.layers) {
      if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        weights.emplace_back(d->weights.values().size(), 0.0);
        bias.emplace_back(d->bias.values().size(), 0.0);
        layer_index.push_back(d->layer_index);
        in_width.push_back(d->in_width());
      }
    }
  }

  void accumulate(const GradientRecord& grads, double scale) {
    for (std::size_t i = 0; i < grads.dense.size(); ++i) {
      const auto& gw = grads.dense[i].weights.values();
      const auto& gb = grads.dense[i].bias.values();
      for (std::size_t j = 0; j < gw.size(); ++j) weights[i][j] += scale * gw[j];
      for (std::size_t j = 0; j < gb.size(); ++j) bias[i][j] += scale * gb[j];
    }
  }
};

Tensor example_input(const GroupedDataset& ds, std::int64_t id) {
  return Tensor::vector(ds.example(id).features);
}

}  // namespace

std::vector<ScoredNeuron> criticality_scores(const Model& model, const GroupedDataset& ds,
                                             std::int64_t target_id,
                                             const std::vector<std::int64_t>& reference_ids,
                                             const NeuronMaskSet& mask, Mode mode) {
  if (reference_ids.empty()) {
    throw EvalError("criticality_scores needs a non-empty reference batch");
  }
  Model probe = model;
  probe.mode = mode;

  const GroupedExample& target = ds.example(target_id);
  FlatGrads diff(probe);
  diff.accumulate(model_backward(probe, example_input(ds, target_id),
                                 static_cast<std::size_t>(target.y), target_id, &mask),
                  1.0);
  const double inv_b = -1.0 / static_cast<double>(reference_ids.size());
  for (std::int64_t rid : reference_ids) {
    const GroupedExample& ref = ds.example(rid);
    diff.accumulate(model_backward(probe, example_input(ds, rid),
                                   static_cast<std::size_t>(ref.y), rid, &mask),
                    inv_b);
  }

  const int head = model.head_layer_index();
  std::vector<ScoredNeuron> scores;
  for (std::size_t li = 0; li < diff.layer_index.size(); ++li) {
    if (diff.layer_index[li] == head) continue;
    const std::size_t in = diff.in_width[li];
    const std::size_t out = diff.bias[li].size();
    for (std::size_t j = 0; j < out; ++j) {
      NeuronRef ref{diff.layer_index[li], static_cast<std::uint32_t>(j)};
      if (mask.contains(ref)) continue;
      double sq = diff.bias[li][j] * diff.bias[li][j];
      const double* row = diff.weights[li].data() + j * in;
      for (std::size_t i = 0; i < in; ++i) sq += row[i] * row[i];
      scores.push_back({ref, std::sqrt(sq)});
    }
  }
  return scores;
}

LocalizationResult critical_neurons(const Model& model, const GroupedDataset& ds,
                                    std::int64_t target_id,
                                    const std::vector<std::int64_t>& reference_ids,
                                    int max_iters, Mode mode) {
  if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
  if (reference_ids.empty()) {
    throw EvalError("critical_neurons needs a non-empty reference batch");
  }

  const GroupedExample& target = ds.example(target_id);
  Tensor x = example_input(ds, target_id);
  const auto label = static_cast<std::size_t>(target.y);
  Model probe = model;
  probe.mode = mode;

  LocalizationResult result;
  result.example_id = target_id;
  result.reference_batch_ids = reference_ids;

  NeuronMaskSet mask;
  result.loss_trace.push_back(model_loss(probe, x, label, target_id, &mask));
  if (probe.predict(x, mode, target_id, &mask) != target.y) {
    result.flipped = true;
    return result;
  }

  for (int iter = 0; iter < max_iters; ++iter) {
    auto scores = criticality_scores(probe, ds, target_id, reference_ids, mask, mode);
    if (scores.empty()) break;
    const ScoredNeuron* best = &scores.front();
    for (const ScoredNeuron& s : scores) {
      if (s.score > best->score) best = &s;  // order already breaks ties low-first
    }
    mask.add(best->ref);
    result.removed.push_back(best->ref);
    result.iterations = iter + 1;
    result.loss_trace.push_back(model_loss(probe, x, label, target_id, &mask));
    if (probe.predict(x, mode, target_id, &mask) != target.y) {
      result.flipped = true;
      break;
    }
  }
  return result;
}

std::optional<std::vector<NeuronRef>> brute_force_min_flip(const Model& model,
                                                           const GroupedDataset& ds,
                                                           std::int64_t target_id,
                                                           int size_limit, Mode mode) {
  if (size_limit < 0 || size_limit > 4) {
    throw ConfigError("brute_force_min_flip supports size_limit in [0, 4]");
  }
  std::vector<NeuronRef> hidden = model.hidden_neurons();
  if (hidden.size() > 16) {
    throw ConfigError("brute_force_min_flip supports at most 16 hidden neurons, model has " +
                      std::to_string(hidden.size()));
  }

  const GroupedExample& target = ds.example(target_id);
  Tensor x = example_input(ds, target_id);

  auto flips = [&](const std::vector<NeuronRef>& subset) {
    NeuronMaskSet mask;
    for (NeuronRef r : subset) mask.add(r);
    return model.predict(x, mode, target_id, &mask) != target.y;
  };

  if (flips({})) return std::vector<NeuronRef>{};

  const int n = static_cast<int>(hidden.size());
  std::vector<NeuronRef> subset;
  // Combinations in lexicographic index order, sizes ascending.
  auto search = [&](auto&& self, int size, int start) -> bool {
    if (static_cast<int>(subset.size()) == size) return flips(subset);
    for (int i = start; i <= n - (size - static_cast<int>(subset.size())); ++i) {
      subset.push_back(hidden[static_cast<std::size_t>(i)]);
      if (self(self, size, i + 1)) return true;
      subset.pop_back();
    }
    return false;
  };
  for (int size = 1; size <= std::min(size_limit, n); ++size) {
    subset.clear();
    if (search(search, size, 0)) return subset;
  }
  return std::nullopt;
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw EvalError("quantile of an empty sample");
  if (p < 0.0 || p > 1.0) throw ConfigError("quantile p must be in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

void ProbeConfig::validate() const {
  if (max_iters < 0) throw ConfigError("probe max_iters must be >= 0");
  if (reference_batch_size < 1) throw ConfigError("probe reference_batch_size must be >= 1");
}

ProbeReport probe_report(const Model& model, const GroupedDataset& probe_ds,
                         const GroupedDataset& eval_ds,
                         const std::vector<std::int64_t>& target_ids,
                         const ProbeConfig& config) {
  config.validate();
  if (target_ids.empty()) throw ConfigError("probe_report needs at least one target id");

  ProbeReport report;
  report.baseline_train_wga =
      evaluate(model, eval_ds, Mode::kTrain).worst_group_accuracy;
  report.baseline_test_wga = evaluate(model, eval_ds, Mode::kTest).worst_group_accuracy;

  std::vector<std::int64_t> all_ids(probe_ds.size());
  std::iota(all_ids.begin(), all_ids.end(), std::int64_t{0});
  const auto batch_size =
      std::min<std::size_t>(static_cast<std::size_t>(config.reference_batch_size),
                            all_ids.size());

  std::int64_t improved = 0;
  for (std::int64_t tid : target_ids) {
    const GroupedExample& target = probe_ds.example(tid);

    Rng rng(derive_seed(config.seed, "probe-batch-" + std::to_string(tid)));
    std::vector<std::int64_t> pool = all_ids;
    rng.shuffle(pool);
    std::vector<std::int64_t> batch(pool.begin(),
                                    pool.begin() + static_cast<std::ptrdiff_t>(batch_size));

    LocalizationResult loc =
        critical_neurons(model, probe_ds, tid, batch, config.max_iters, config.mode);

    NeuronMaskSet mask;
    for (NeuronRef r : loc.removed) mask.add(r);

    ProbeRow row;
    row.example_id = tid;
    row.group_y = target.y;
    row.group_a = target.a;
    row.n_removed = static_cast<int>(loc.removed.size());
    row.flipped = loc.flipped;
    row.train_wga_after_drop =
        evaluate(model, eval_ds, Mode::kTrain, &mask).worst_group_accuracy;
    row.test_wga_after_drop =
        evaluate(model, eval_ds, Mode::kTest, &mask).worst_group_accuracy;
    if (row.test_wga_after_drop >= report.baseline_test_wga) improved += 1;
    report.rows.push_back(row);
  }
  report.improved_test_fraction =
      static_cast<double>(improved) / static_cast<double>(report.rows.size());

  std::map<GroupId, std::vector<double>> removed_by_group;
  std::map<GroupId, std::int64_t> flipped_by_group;
  for (const ProbeRow& row : report.rows) {
    GroupId g{row.group_y, row.group_a};
    removed_by_group[g].push_back(static_cast<double>(row.n_removed));
    flipped_by_group[g] += row.flipped ? 1 : 0;
  }
  for (auto& [g, values] : removed_by_group) {
    std::sort(values.begin(), values.end());
    GroupProbeStat stat;
    stat.group = g;
    stat.count = static_cast<std::int64_t>(values.size());
    stat.q1 = quantile_sorted(values, 0.25);
    stat.median = quantile_sorted(values, 0.5);
    stat.q3 = quantile_sorted(values, 0.75);
    stat.mean = std::accumulate(values.begin(), values.end(), 0.0) /
                static_cast<double>(values.size());
    stat.flipped_fraction =
        static_cast<double>(flipped_by_group[g]) / static_cast<double>(values.size());
    report.per_group.push_back(stat);
  }
  return report;
}

}  // namespace fairlab
