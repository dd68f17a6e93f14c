#include "fairlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairlab/errors.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

void TrainConfig::validate() const {
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be >= 0 and finite");
  }
  if (weight_decay < 0.0 || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be >= 0 and finite");
  }
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

namespace {

struct GradBuffer {
  // One (weights, bias) pair per dense layer, in stack order.
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;

  explicit GradBuffer(const Model& model) {
    for (const Layer& layer : model.layers) {
      if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        weights.emplace_back(d->weights.values().size(), 0.0);
        bias.emplace_back(d->bias.values().size(), 0.0);
      }
    }
  }

  void reset() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
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

void apply_update(Model& model, const GradBuffer& grads, double lr, double wd,
                  double inv_batch) {
  std::size_t di = 0;
  for (Layer& layer : model.layers) {
    auto* d = std::get_if<DenseLayer>(&layer);
    if (d == nullptr) continue;
    auto& w = d->weights.values();
    auto& b = d->bias.values();
    const auto& gw = grads.weights[di];
    const auto& gb = grads.bias[di];
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] -= lr * (gw[j] * inv_batch + wd * w[j]);
    }
    for (std::size_t j = 0; j < b.size(); ++j) {
      b[j] -= lr * gb[j] * inv_batch;
    }
    ++di;
  }
}

std::map<GroupId, double> group_gap(const Metrics& train_m, const Metrics& test_m) {
  std::map<GroupId, double> gap;
  for (const auto& [g, acc] : train_m.per_group_accuracy) {
    auto it = test_m.per_group_accuracy.find(g);
    if (it != test_m.per_group_accuracy.end()) gap[g] = acc - it->second;
  }
  return gap;
}

EpochRecord record_epoch(const Model& model, const GroupedDataset& train_ds,
                         const GroupedDataset* test_ds, int epoch, double train_loss) {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.train_loss = train_loss;
  rec.train_split_train_mode = evaluate(model, train_ds, Mode::kTrain);
  rec.train_split_test_mode = model.has_fair_dropout()
                                  ? evaluate(model, train_ds, Mode::kTest)
                                  : rec.train_split_train_mode;
  if (test_ds != nullptr) {
    rec.has_test = true;
    rec.test_split_train_mode = evaluate(model, *test_ds, Mode::kTrain);
    rec.test_split_test_mode = model.has_fair_dropout()
                                   ? evaluate(model, *test_ds, Mode::kTest)
                                   : rec.test_split_train_mode;
    rec.per_group_gap = group_gap(rec.train_split_test_mode, rec.test_split_test_mode);
  }
  return rec;
}

}  // namespace

History train(Model& model, const GroupedDataset& train_ds, const GroupedDataset* test_ds,
              const TrainConfig& config, bool class_reweight) {
  config.validate();
  if (train_ds.size() == 0) throw ConfigError("training split is empty");
  if (model.input_width() != train_ds.feature_dim()) {
    throw DimensionError("model expects input width " + std::to_string(model.input_width()) +
                         " but the training split has " +
                         std::to_string(train_ds.feature_dim()) + " features");
  }

  const auto n = static_cast<std::int64_t>(train_ds.size());
  std::vector<double> class_weight(static_cast<std::size_t>(train_ds.num_classes()), 1.0);
  if (class_reweight) {
    std::vector<std::int64_t> counts(class_weight.size(), 0);
    for (const GroupedExample& ex : train_ds.examples()) {
      counts[static_cast<std::size_t>(ex.y)] += 1;
    }
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] > 0) {
        class_weight[c] = static_cast<double>(n) /
                          (static_cast<double>(counts.size()) * static_cast<double>(counts[c]));
      }
    }
  }

  model.mode = Mode::kTrain;
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});

  GradBuffer grads(model);
  History history;
  history.epochs.reserve(static_cast<std::size_t>(config.epochs));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < order.size()) {
      const std::size_t batch_end =
          std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(batch_end - cursor);
      grads.reset();
      for (std::size_t i = cursor; i < batch_end; ++i) {
        const GroupedExample& ex = train_ds.example(order[i]);
        Tensor x = Tensor::vector(ex.features);
        BackwardResult out =
            model_loss_and_backward(model, x, static_cast<std::size_t>(ex.y), ex.id);
        if (!std::isfinite(out.loss)) {
          throw TrainingDivergedWithHistory(
              "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                  std::to_string(batch_index) + " (example " + std::to_string(ex.id) + ")",
              std::move(history));
        }
        const double w = class_weight[static_cast<std::size_t>(ex.y)];
        grads.accumulate(out.grads, w);
        epoch_loss += w * out.loss;
      }
      apply_update(model, grads, config.learning_rate, config.weight_decay, inv_batch);
      cursor = batch_end;
      ++batch_index;
    }
    history.epochs.push_back(
        record_epoch(model, train_ds, test_ds, epoch, epoch_loss / static_cast<double>(n)));
  }
  return history;
}

SweepResult sweep(const ModelConfig& base_model, const DatasetBundle& data,
                  const TrainConfig& base_train, const std::vector<SweepPoint>& points,
                  int budget, bool class_reweight, std::uint64_t seed_root) {
  if (points.empty()) return SweepResult{};
  if (budget < 1) throw ConfigError("sweep budget must be >= 1");

  std::vector<SweepPoint> unique;
  for (const SweepPoint& p : points) {
    if (std::find(unique.begin(), unique.end(), p) == unique.end()) unique.push_back(p);
  }
  if (static_cast<int>(unique.size()) > budget) {
    unique.resize(static_cast<std::size_t>(budget));
  }

  const std::uint64_t init_seed = derive_seed(seed_root, "init");
  const std::uint64_t shuffle_seed = derive_seed(seed_root, "shuffle-root");
  const std::uint64_t alloc_seed = derive_seed(seed_root, "allocation");

  std::vector<SweepRow> ok_rows;
  std::vector<SweepRow> failed_rows;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    SweepRow row;
    row.point = unique[i];
    row.order = static_cast<int>(i);
    try {
      ModelConfig mc = base_model;
      mc.fd_position = row.point.position;
      mc.p_gen = row.point.p_gen;
      mc.p_mem = row.point.p_mem;
      mc.allocation_seed = alloc_seed;
      TrainConfig tc = base_train;
      tc.learning_rate = row.point.learning_rate;
      tc.weight_decay = row.point.weight_decay;
      tc.seed = shuffle_seed;

      Model model = build_model(mc, init_seed);
      train(model, data.train, nullptr, tc, class_reweight);

      Metrics val = evaluate(model, data.val, Mode::kTest);
      Metrics test = evaluate(model, data.test, Mode::kTest);
      row.val_worst_class = val.worst_class_accuracy;
      row.val_avg = val.average_accuracy;
      row.val_wga = val.worst_group_accuracy;
      row.test_wga = test.worst_group_accuracy;
      row.test_avg = test.average_accuracy;
      ok_rows.push_back(row);
    } catch (const Error& e) {
      row.status = e.what();
      failed_rows.push_back(row);
    }
  }

  std::stable_sort(ok_rows.begin(), ok_rows.end(), [](const SweepRow& l, const SweepRow& r) {
    if (l.val_worst_class != r.val_worst_class) return l.val_worst_class > r.val_worst_class;
    if (l.val_avg != r.val_avg) return l.val_avg > r.val_avg;
    return l.order < r.order;
  });

  SweepResult result;
  result.rows = std::move(ok_rows);
  result.rows.insert(result.rows.end(), failed_rows.begin(), failed_rows.end());
  result.best = result.rows.empty() || result.rows.front().status != "ok" ? -1 : 0;
  return result;
}

}  // namespace fairlab
