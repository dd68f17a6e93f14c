#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fairlab/dataset.hpp"
#include "fairlab/errors.hpp"
#include "fairlab/metrics.hpp"
#include "fairlab/model.hpp"
#include "fairlab/model_config.hpp"

namespace fairlab {

struct TrainConfig {
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  int epochs = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;  // root for the shuffle stream

  void validate() const;
};

/// Metrics recorded at the end of one epoch. Both forward modes are
/// evaluated on both splits; for a model without the dropout layer the two
/// modes coincide and are computed once. per_group_gap is train-split minus
/// test-split accuracy per group, test mode.
struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean weighted loss over the epoch's update passes
  Metrics train_split_train_mode;
  Metrics train_split_test_mode;
  bool has_test = false;
  Metrics test_split_train_mode;
  Metrics test_split_test_mode;
  std::map<GroupId, double> per_group_gap;
};

struct History {
  std::vector<EpochRecord> epochs;
};

/// What train() throws on a non-finite loss. Carries the epochs that
/// completed before the blow-up so callers can still save the partial run.
class TrainingDivergedWithHistory : public TrainingDiverged {
 public:
  TrainingDivergedWithHistory(const std::string& message, History completed)
      : TrainingDiverged(message), partial(std::move(completed)) {}

  History partial;
};

/// Minibatch SGD with decoupled-from-bias weight decay:
///   W <- W - lr * (grad_W / |B| + wd * W),  b <- b - lr * grad_b / |B|.
/// Examples are shuffled each epoch by one stream seeded from config.seed, so
/// the whole run is a pure function of (model, data, config). class_reweight
/// scales each example's loss by N / (C * n_class). A non-finite loss aborts
/// with TrainingDiverged naming the epoch and batch. test_ds may be null.
History train(Model& model, const GroupedDataset& train_ds, const GroupedDataset* test_ds,
              const TrainConfig& config, bool class_reweight = false);

/// One hyperparameter combination to try.
struct SweepPoint {
  double p_gen = 1.0;
  double p_mem = 0.0;
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  std::string position = "none";

  bool operator==(const SweepPoint&) const = default;
};

struct SweepRow {
  SweepPoint point;
  int order = 0;  // position in the deduplicated input list
  std::string status = "ok";  // "ok" or the failure message
  double val_worst_class = 0.0;
  double val_avg = 0.0;
  double val_wga = 0.0;
  double test_wga = 0.0;
  double test_avg = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ok rows ranked first, failures after in input order
  int best = -1;               // index into rows, -1 if nothing trained
};

/// Trains one model per point (duplicates removed, first occurrence kept;
/// at most `budget` configs) and ranks by validation worst-class accuracy in
/// test mode, ties by validation average accuracy, then input order. Group
/// labels are deliberately not consulted for ranking. Every model trains from
/// the same init/shuffle subseeds of seed_root so only the point differs.
SweepResult sweep(const ModelConfig& base_model, const DatasetBundle& data,
                  const TrainConfig& base_train, const std::vector<SweepPoint>& points,
                  int budget, bool class_reweight, std::uint64_t seed_root);

}  // namespace fairlab
