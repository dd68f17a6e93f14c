#pragma once

#include <map>
#include <vector>

#include "fairlab/dataset.hpp"
#include "fairlab/model.hpp"

namespace fairlab {

// Accuracy and loss broken down by group (y, a) and by class. Worst-group
// accuracy is the minimum over all class/attribute combinations present in
// the evaluation grid; worst-class accuracy needs only class labels and is
// the tuning metric when group annotations are assumed unavailable.
struct Metrics {
  std::map<GroupId, double> per_group_accuracy;
  std::map<int, double> per_class_accuracy;
  double average_accuracy = 0.0;
  double worst_group_accuracy = 0.0;
  double worst_class_accuracy = 0.0;
  double average_loss = 0.0;
};

// Evaluates over the full num_classes x num_attributes grid. Any empty cell
// is an error: a silent skip would let worst-group accuracy ignore exactly
// the groups it exists to surface.
Metrics evaluate(const Model& model, const GroupedDataset& dataset, Mode mode,
                 const NeuronMaskSet* mask = nullptr);

}  // namespace fairlab
