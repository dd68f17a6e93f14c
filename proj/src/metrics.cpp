#include "fairlab/metrics.hpp"

#include <algorithm>
#include <limits>

#include "fairlab/errors.hpp"

namespace fairlab {

Metrics evaluate(const Model& model, const GroupedDataset& dataset, Mode mode,
                 const NeuronMaskSet* mask) {
  if (dataset.size() == 0) throw EvalError("evaluate on an empty dataset");

  struct Cell {
    std::int64_t total = 0;
    std::int64_t correct = 0;
  };
  std::map<GroupId, Cell> groups;
  std::map<int, Cell> classes;
  for (int y = 0; y < dataset.num_classes(); ++y) {
    classes[y] = Cell{};
    for (int a = 0; a < dataset.num_attributes(); ++a) groups[GroupId{y, a}] = Cell{};
  }

  Metrics m;
  std::int64_t correct_total = 0;
  double loss_sum = 0.0;
  for (const GroupedExample& ex : dataset.examples()) {
    Tensor x = Tensor::vector(ex.features);
    Tensor logits = model.forward(x, mode, ex.id, mask);
    int pred = 0;
    {
      const auto& v = logits.values();
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<std::size_t>(pred)]) pred = static_cast<int>(i);
      }
    }
    loss_sum += softmax_cross_entropy(logits, ex.y).loss;
    bool correct = (pred == ex.y);
    Cell& g = groups[ex.group()];
    Cell& c = classes[ex.y];
    g.total += 1;
    c.total += 1;
    if (correct) {
      g.correct += 1;
      c.correct += 1;
      correct_total += 1;
    }
  }

  m.worst_group_accuracy = std::numeric_limits<double>::infinity();
  for (const auto& [g, cell] : groups) {
    if (cell.total == 0) {
      throw EvalError("group " + g.to_string() + " has no examples in the " +
                      split_name(dataset.split()) + " split");
    }
    double acc = static_cast<double>(cell.correct) / static_cast<double>(cell.total);
    m.per_group_accuracy[g] = acc;
    m.worst_group_accuracy = std::min(m.worst_group_accuracy, acc);
  }
  m.worst_class_accuracy = std::numeric_limits<double>::infinity();
  for (const auto& [y, cell] : classes) {
    if (cell.total == 0) {
      throw EvalError("class " + std::to_string(y) + " has no examples in the " +
                      split_name(dataset.split()) + " split");
    }
    double acc = static_cast<double>(cell.correct) / static_cast<double>(cell.total);
    m.per_class_accuracy[y] = acc;
    m.worst_class_accuracy = std::min(m.worst_class_accuracy, acc);
  }
  m.average_accuracy =
      static_cast<double>(correct_total) / static_cast<double>(dataset.size());
  m.average_loss = loss_sum / static_cast<double>(dataset.size());
  return m;
}

}  // namespace fairlab
