#include "fairlab/model_config.hpp"

#include <charconv>

#include "fairlab/errors.hpp"

namespace fairlab {

namespace {

// Returns the 1-based block index for "dp<k>", 0 for the named positions.
int parse_position(const std::string& pos, int num_blocks) {
  if (pos == "none" || pos == "dpfc" || pos == "dplogits") return 0;
  if (pos.size() > 2 && pos.compare(0, 2, "dp") == 0) {
    int k = 0;
    const char* first = pos.data() + 2;
    const char* last = pos.data() + pos.size();
    auto [ptr, ec] = std::from_chars(first, last, k);
    if (ec == std::errc{} && ptr == last && k >= 1) {
      if (k > num_blocks) {
        throw ConfigError("fd_position \"" + pos + "\" but the model has only " +
                          std::to_string(num_blocks) + " hidden blocks");
      }
      return k;
    }
  }
  throw ConfigError("unknown fd_position \"" + pos +
                    "\"; expected none, dp<k>, dpfc, or dplogits");
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model input_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("model num_classes must be >= 2");
  if (hidden_widths.empty()) throw ConfigError("model needs at least one hidden block");
  for (std::size_t i = 0; i < hidden_widths.size(); ++i) {
    if (hidden_widths[i] < 1) {
      throw ConfigError("hidden block " + std::to_string(i + 1) + " has width " +
                        std::to_string(hidden_widths[i]));
    }
  }
  parse_position(fd_position, static_cast<int>(hidden_widths.size()));
  if (fd_position == "dpfc" && projection_width < 0) {
    throw ConfigError("projection_width must be >= 0");
  }
  if (has_dropout()) {
    FairDropoutConfig probe;
    probe.width = 1;  // placeholder; the real width is set at build time
    probe.p_gen = p_gen;
    probe.p_mem = p_mem;
    probe.validate();
  }
}

Model build_model(const ModelConfig& config, std::uint64_t init_seed) {
  config.validate();
  const int num_blocks = static_cast<int>(config.hidden_widths.size());
  const int dp_block = parse_position(config.fd_position, num_blocks);

  auto make_fd = [&](std::size_t width, int layer_index) {
    FairDropoutLayer fd;
    fd.config.width = width;
    fd.config.p_gen = config.p_gen;
    fd.config.p_mem = config.p_mem;
    fd.config.allocation_seed = config.allocation_seed;
    fd.config.validate();
    fd.layer_index = layer_index;
    return fd;
  };
  auto make_dense = [](std::size_t in, std::size_t out, int layer_index) {
    DenseLayer d;
    d.weights = Tensor({out, in}, std::vector<double>(out * in, 0.0));
    d.bias = Tensor({out}, std::vector<double>(out, 0.0));
    d.layer_index = layer_index;
    return d;
  };

  Model model;
  int idx = 0;
  std::size_t in = static_cast<std::size_t>(config.input_dim);
  for (int b = 1; b <= num_blocks; ++b) {
    std::size_t out = static_cast<std::size_t>(config.hidden_widths[static_cast<std::size_t>(b - 1)]);
    model.layers.emplace_back(make_dense(in, out, idx++));
    model.layers.emplace_back(ReluLayer{idx++});
    if (dp_block == b) model.layers.emplace_back(make_fd(out, idx++));
    in = out;
  }
  if (config.fd_position == "dpfc") {
    std::size_t proj = config.projection_width > 0
                           ? static_cast<std::size_t>(config.projection_width)
                           : in;
    model.layers.emplace_back(make_dense(in, proj, idx++));
    model.layers.emplace_back(make_fd(proj, idx++));
    in = proj;
  }
  model.layers.emplace_back(
      make_dense(in, static_cast<std::size_t>(config.num_classes), idx++));
  if (config.fd_position == "dplogits") {
    model.layers.emplace_back(
        make_fd(static_cast<std::size_t>(config.num_classes), idx++));
  }

  model.seed = init_seed;
  initialize_parameters(model, init_seed);
  return model;
}

}  // namespace fairlab
