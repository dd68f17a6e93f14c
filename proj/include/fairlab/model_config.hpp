#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairlab/model.hpp"

namespace fairlab {

/// MLP architecture plus where (if anywhere) the example-tied dropout layer
/// sits. Positions:
///   "none"      plain ERM stack
///   "dp<k>"     after hidden block k's ReLU (1-based), width = that block's
///   "dpfc"      extra linear projection before the head, dropout on it
///   "dplogits"  on the classifier logits themselves
struct ModelConfig {
  int input_dim = 0;
  int num_classes = 2;
  std::vector<int> hidden_widths;
  std::string fd_position = "none";
  int projection_width = 0;  // dpfc only; 0 means the last hidden width
  double p_gen = 1.0;
  double p_mem = 0.0;
  std::uint64_t allocation_seed = 0;

  void validate() const;
  bool has_dropout() const { return fd_position != "none"; }
};

/// Builds the layer stack and initializes parameters from init_seed.
Model build_model(const ModelConfig& config, std::uint64_t init_seed);

}  // namespace fairlab
