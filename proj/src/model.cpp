#include "fairlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fairlab/errors.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

// ---------------------------------------------------------------------------
// NeuronMaskSet

void NeuronMaskSet::add(NeuronRef ref) {
  auto& v = by_layer_[ref.layer_index];
  auto it = std::lower_bound(v.begin(), v.end(), ref.neuron_index);
  if (it != v.end() && *it == ref.neuron_index) return;  // idempotent
  v.insert(it, ref.neuron_index);
  ++count_;
}

bool NeuronMaskSet::contains(NeuronRef ref) const {
  auto it = by_layer_.find(ref.layer_index);
  if (it == by_layer_.end()) return false;
  return std::binary_search(it->second.begin(), it->second.end(), ref.neuron_index);
}

const std::vector<std::uint32_t>* NeuronMaskSet::layer_mask(int layer_index) const {
  auto it = by_layer_.find(layer_index);
  return it == by_layer_.end() ? nullptr : &it->second;
}

std::vector<NeuronRef> NeuronMaskSet::refs() const {
  std::vector<NeuronRef> out;
  out.reserve(count_);
  for (const auto& [layer, indices] : by_layer_) {
    for (std::uint32_t idx : indices) out.push_back({layer, idx});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Core ops

Tensor dense_forward(const Tensor& x, const DenseLayer& layer) {
  const std::size_t in = layer.in_width();
  const std::size_t out = layer.out_width();
  if (layer.bias.rank() != 1 || layer.bias.dim(0) != out) {
    throw DimensionError("dense bias expected shape (" + std::to_string(out) +
                         "), got " + layer.bias.shape_string());
  }
  if (x.rank() == 1) {
    if (x.dim(0) != in) {
      throw DimensionError("dense input expected width " + std::to_string(in) +
                           ", got " + std::to_string(x.dim(0)));
    }
    Tensor y({out});
    const double* w = layer.weights.data();
    const double* xv = x.data();
    for (std::size_t j = 0; j < out; ++j) {
      const double* row = w + j * in;
      double acc = layer.bias[j];
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * xv[i];
      y[j] = acc;
    }
    return y;
  }
  if (x.rank() == 2) {
    if (x.dim(1) != in) {
      throw DimensionError("dense batch input expected width " + std::to_string(in) +
                           ", got " + std::to_string(x.dim(1)));
    }
    const std::size_t batch = x.dim(0);
    Tensor y({batch, out});
    for (std::size_t b = 0; b < batch; ++b) {
      const double* xv = x.data() + b * in;
      double* yv = y.data() + b * out;
      for (std::size_t j = 0; j < out; ++j) {
        const double* row = layer.weights.data() + j * in;
        double acc = layer.bias[j];
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * xv[i];
        yv[j] = acc;
      }
    }
    return y;
  }
  throw DimensionError("dense input must be rank 1 or 2, got " + x.shape_string());
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

XentResult softmax_cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) {
    throw DimensionError("softmax_cross_entropy expects a logit vector, got " +
                         logits.shape_string());
  }
  const std::size_t classes = logits.dim(0);
  if (label >= classes) {
    throw DimensionError("label " + std::to_string(label) + " out of range for " +
                         std::to_string(classes) + " classes");
  }
  double max_logit = logits[0];
  for (std::size_t c = 1; c < classes; ++c) max_logit = std::max(max_logit, logits[c]);
  double sum = 0.0;
  XentResult result;
  result.grad_logits = Tensor({classes});
  for (std::size_t c = 0; c < classes; ++c) {
    double e = std::exp(logits[c] - max_logit);
    result.grad_logits[c] = e;
    sum += e;
  }
  // Grouped so that constant logits give exactly log(classes).
  result.loss = std::log(sum) + (max_logit - logits[label]);
  const double inv = 1.0 / sum;
  for (std::size_t c = 0; c < classes; ++c) result.grad_logits[c] *= inv;
  result.grad_logits[label] -= 1.0;
  return result;
}

// ---------------------------------------------------------------------------
// Model

std::size_t Model::input_width() const {
  for (const Layer& layer : layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) return d->in_width();
    if (const auto* f = std::get_if<FairDropoutLayer>(&layer)) return f->config.width;
  }
  return 0;
}

std::size_t Model::output_width() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (const auto* d = std::get_if<DenseLayer>(&*it)) return d->out_width();
    if (const auto* f = std::get_if<FairDropoutLayer>(&*it)) return f->config.width;
  }
  return 0;
}

bool Model::has_fair_dropout() const {
  for (const Layer& layer : layers) {
    if (std::holds_alternative<FairDropoutLayer>(layer)) return true;
  }
  return false;
}

int Model::head_layer_index() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (const auto* d = std::get_if<DenseLayer>(&*it)) return d->layer_index;
  }
  return -1;
}

std::vector<NeuronRef> Model::hidden_neurons() const {
  std::vector<NeuronRef> refs;
  const int head = head_layer_index();
  for (const Layer& layer : layers) {
    const auto* d = std::get_if<DenseLayer>(&layer);
    if (d == nullptr || d->layer_index == head) continue;
    for (std::uint32_t j = 0; j < d->out_width(); ++j) refs.push_back({d->layer_index, j});
  }
  return refs;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& layer : layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      n += d->weights.size() + d->bias.size();
    }
  }
  return n;
}

namespace {

struct ForwardTrace {
  // inputs[i] is the input to layers[i]; inputs.back() is the logits.
  std::vector<Tensor> inputs;
  // Allocation per layer position; engaged only for fair-dropout layers that
  // ran in train mode.
  std::vector<std::optional<MaskAllocation>> allocs;
};

void validate_mask(const Model& model, const NeuronMaskSet& mask) {
  const int head = model.head_layer_index();
  std::set<int> dense_indices;
  std::map<int, std::size_t> widths;
  for (const Layer& layer : model.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      dense_indices.insert(d->layer_index);
      widths[d->layer_index] = d->out_width();
    }
  }
  for (const NeuronRef& ref : mask.refs()) {
    if (!dense_indices.count(ref.layer_index)) {
      throw DimensionError("mask names layer " + std::to_string(ref.layer_index) +
                           " which is not a dense layer of this model");
    }
    if (ref.layer_index == head) {
      throw DimensionError("output logits are not maskable (layer " +
                           std::to_string(ref.layer_index) + ")");
    }
    if (ref.neuron_index >= widths[ref.layer_index]) {
      throw DimensionError("mask neuron " + std::to_string(ref.neuron_index) +
                           " out of range for layer " + std::to_string(ref.layer_index));
    }
  }
}

ForwardTrace forward_traced(const Model& model, const Tensor& x, Mode mode,
                            std::int64_t example_id, const NeuronMaskSet* mask) {
  if (mask != nullptr && !mask->empty()) validate_mask(model, *mask);
  ForwardTrace trace;
  trace.inputs.reserve(model.layers.size() + 1);
  trace.allocs.resize(model.layers.size());
  trace.inputs.push_back(x);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Tensor& in = trace.inputs.back();
    if (const auto* d = std::get_if<DenseLayer>(&model.layers[i])) {
      Tensor out = dense_forward(in, *d);
      if (mask != nullptr) {
        if (const auto* dropped = mask->layer_mask(d->layer_index)) {
          for (std::uint32_t idx : *dropped) out[idx] = 0.0;
        }
      }
      trace.inputs.push_back(std::move(out));
    } else if (std::holds_alternative<ReluLayer>(model.layers[i])) {
      trace.inputs.push_back(relu(in));
    } else {
      const auto& f = std::get<FairDropoutLayer>(model.layers[i]);
      if (mode == Mode::kTest) {
        trace.inputs.push_back(fair_dropout_forward_test(f.config, in));
      } else {
        if (example_id < 0 && f.config.mem_count() > 0) {
          throw ConfigError(
              "train-mode forward through fair dropout needs a nonnegative example id");
        }
        trace.allocs[i] = allocate_mask(f.config, example_id);
        trace.inputs.push_back(fair_dropout_forward_train(f.config, *trace.allocs[i], in));
      }
    }
  }
  return trace;
}

}  // namespace

Tensor Model::forward(const Tensor& x, Mode run_mode, std::int64_t example_id,
                      const NeuronMaskSet* mask) const {
  ForwardTrace trace = forward_traced(*this, x, run_mode, example_id, mask);
  return std::move(trace.inputs.back());
}

Tensor Model::forward(const Tensor& x, std::int64_t example_id,
                      const NeuronMaskSet* mask) const {
  return forward(x, mode, example_id, mask);
}

int Model::predict(const Tensor& x, Mode run_mode, std::int64_t example_id,
                   const NeuronMaskSet* mask) const {
  Tensor logits = forward(x, run_mode, example_id, mask);
  int best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = static_cast<int>(c);
  }
  return best;
}

double model_loss(const Model& model, const Tensor& x, std::size_t label,
                  std::int64_t example_id, const NeuronMaskSet* mask) {
  Tensor logits = model.forward(x, example_id, mask);
  return softmax_cross_entropy(logits, label).loss;
}

BackwardResult model_loss_and_backward(const Model& model, const Tensor& x,
                                       std::size_t label, std::int64_t example_id,
                                       const NeuronMaskSet* mask) {
  ForwardTrace trace = forward_traced(model, x, model.mode, example_id, mask);
  XentResult xent = softmax_cross_entropy(trace.inputs.back(), label);

  BackwardResult result;
  result.loss = xent.loss;
  Tensor grad = std::move(xent.grad_logits);

  std::vector<LayerGradient> reversed;
  for (std::size_t pos = model.layers.size(); pos-- > 0;) {
    const Tensor& in = trace.inputs[pos];
    if (const auto* d = std::get_if<DenseLayer>(&model.layers[pos])) {
      // The mask sits at the dense output: zero those gradient entries first.
      if (mask != nullptr) {
        if (const auto* dropped = mask->layer_mask(d->layer_index)) {
          for (std::uint32_t idx : *dropped) grad[idx] = 0.0;
        }
      }
      const std::size_t out = d->out_width();
      const std::size_t in_w = d->in_width();
      LayerGradient lg;
      lg.layer_index = d->layer_index;
      lg.weights = Tensor({out, in_w});
      lg.bias = Tensor({out});
      Tensor grad_in({in_w});
      for (std::size_t j = 0; j < out; ++j) {
        const double g = grad[j];
        lg.bias[j] = g;
        double* wrow = lg.weights.data() + j * in_w;
        const double* mrow = d->weights.data() + j * in_w;
        const double* xv = in.data();
        double* gi = grad_in.data();
        for (std::size_t i = 0; i < in_w; ++i) {
          wrow[i] = g * xv[i];
          gi[i] += g * mrow[i];
        }
      }
      reversed.push_back(std::move(lg));
      grad = std::move(grad_in);
    } else if (std::holds_alternative<ReluLayer>(model.layers[pos])) {
      // Subgradient at 0 is 0.
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(in[i] > 0.0)) grad[i] = 0.0;
      }
    } else {
      const auto& f = std::get<FairDropoutLayer>(model.layers[pos]);
      const MaskAllocation* alloc =
          trace.allocs[pos].has_value() ? &*trace.allocs[pos] : nullptr;
      grad = fair_dropout_backward(f.config, alloc, model.mode, grad);
    }
  }
  result.grads.dense.assign(reversed.rbegin(), reversed.rend());
  return result;
}

GradientRecord model_backward(const Model& model, const Tensor& x, std::size_t label,
                              std::int64_t example_id, const NeuronMaskSet* mask) {
  return model_loss_and_backward(model, x, label, example_id, mask).grads;
}

double finite_difference_check(const Model& model, const Tensor& x, std::size_t label,
                               double epsilon, std::int64_t example_id,
                               const NeuronMaskSet* mask) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) {
    throw ConfigError("epsilon must be in (0, 1e-2], got " + std::to_string(epsilon));
  }
  GradientRecord analytic = model_backward(model, x, label, example_id, mask);

  Model probe = model;
  double max_rel = 0.0;
  std::size_t grad_slot = 0;
  for (std::size_t pos = 0; pos < probe.layers.size(); ++pos) {
    auto* d = std::get_if<DenseLayer>(&probe.layers[pos]);
    if (d == nullptr) continue;
    const LayerGradient& lg = analytic.dense[grad_slot++];
    auto check_param = [&](double& param, double analytic_g) {
      const double original = param;
      param = original + epsilon;
      double loss_plus = model_loss(probe, x, label, example_id, mask);
      param = original - epsilon;
      double loss_minus = model_loss(probe, x, label, example_id, mask);
      param = original;
      double numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
      double rel = std::abs(analytic_g - numeric) /
                   std::max(1e-8, std::abs(analytic_g) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    };
    for (std::size_t i = 0; i < d->weights.size(); ++i) {
      check_param(d->weights[i], lg.weights[i]);
    }
    for (std::size_t i = 0; i < d->bias.size(); ++i) {
      check_param(d->bias[i], lg.bias[i]);
    }
  }
  return max_rel;
}

void initialize_parameters(Model& model, std::uint64_t init_seed) {
  int ordinal = 0;
  for (Layer& layer : model.layers) {
    auto* d = std::get_if<DenseLayer>(&layer);
    if (d == nullptr) continue;
    Rng rng(derive_seed(init_seed, "dense-" + std::to_string(ordinal++)));
    const double s =
        std::sqrt(6.0 / static_cast<double>(d->in_width() + d->out_width()));
    for (double& w : d->weights.values()) w = rng.uniform(-s, s);
    d->bias.fill(0.0);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O. The writer is hand-rolled so floats always carry 17
// significant digits; write -> read -> write is byte-identical.

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string s = buf;
  // Integer-looking output ("3", "-0") would reparse as a JSON integer and
  // lose the sign of -0.0; a ".0" suffix keeps every value a double and the
  // canonical form stable under write -> read -> write.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";  // 'n' covers nan/inf
  return s;
}

void append_double_array(std::string& out, const Tensor& t) {
  out += '[';
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) out += ',';
    out += format_double(t[i]);
  }
  out += ']';
}

}  // namespace

std::string checkpoint_to_string(const Model& model) {
  std::string out = "{\n  \"layers\": [\n";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    out += "    ";
    if (const auto* d = std::get_if<DenseLayer>(&model.layers[i])) {
      out += "{\"kind\":\"dense\",\"layer_index\":" + std::to_string(d->layer_index);
      out += ",\"in\":" + std::to_string(d->in_width());
      out += ",\"out\":" + std::to_string(d->out_width());
      out += ",\"weights\":";
      append_double_array(out, d->weights);
      out += ",\"bias\":";
      append_double_array(out, d->bias);
      out += '}';
    } else if (const auto* r = std::get_if<ReluLayer>(&model.layers[i])) {
      out += "{\"kind\":\"relu\",\"layer_index\":" + std::to_string(r->layer_index) + "}";
    } else {
      const auto& f = std::get<FairDropoutLayer>(model.layers[i]);
      out += "{\"kind\":\"fair_dropout\",\"layer_index\":" + std::to_string(f.layer_index);
      out += ",\"H\":" + std::to_string(f.config.width);
      out += ",\"p_gen\":" + format_double(f.config.p_gen);
      out += ",\"p_mem\":" + format_double(f.config.p_mem);
      out += ",\"allocation_seed\":" + std::to_string(f.config.allocation_seed);
      out += '}';
    }
    if (i + 1 < model.layers.size()) out += ',';
    out += '\n';
  }
  out += "  ],\n";
  out += "  \"mode\": \"";
  out += (model.mode == Mode::kTrain ? "train" : "test");
  out += "\",\n";
  out += "  \"seed\": " + std::to_string(model.seed) + "\n";
  out += "}\n";
  return out;
}

Model checkpoint_from_string(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }

  Model model;
  try {
    const std::string mode = doc.at("mode").get<std::string>();
    if (mode == "train") {
      model.mode = Mode::kTrain;
    } else if (mode == "test") {
      model.mode = Mode::kTest;
    } else {
      throw ParseError("checkpoint mode must be \"train\" or \"test\", got \"" + mode + "\"");
    }
    model.seed = doc.at("seed").get<std::uint64_t>();

    std::set<int> seen_indices;
    std::optional<std::size_t> width;
    for (const auto& entry : doc.at("layers")) {
      const std::string kind = entry.at("kind").get<std::string>();
      const int layer_index = entry.at("layer_index").get<int>();
      if (!seen_indices.insert(layer_index).second) {
        throw ParseError("duplicate layer_index " + std::to_string(layer_index));
      }
      if (kind == "dense") {
        const auto in = entry.at("in").get<std::size_t>();
        const auto out = entry.at("out").get<std::size_t>();
        if (in < 1 || out < 1) {
          throw ParseError("dense layer " + std::to_string(layer_index) +
                           " must have in >= 1 and out >= 1");
        }
        auto weights = entry.at("weights").get<std::vector<double>>();
        auto bias = entry.at("bias").get<std::vector<double>>();
        if (weights.size() != in * out) {
          throw ParseError("dense layer " + std::to_string(layer_index) + " expects " +
                           std::to_string(in * out) + " weights, got " +
                           std::to_string(weights.size()));
        }
        if (bias.size() != out) {
          throw ParseError("dense layer " + std::to_string(layer_index) + " expects " +
                           std::to_string(out) + " bias entries, got " +
                           std::to_string(bias.size()));
        }
        if (width.has_value() && *width != in) {
          throw ParseError("dense layer " + std::to_string(layer_index) + " input width " +
                           std::to_string(in) + " does not match preceding width " +
                           std::to_string(*width));
        }
        DenseLayer d;
        d.weights = Tensor::matrix(out, in, std::move(weights));
        d.bias = Tensor::vector(std::move(bias));
        d.layer_index = layer_index;
        if (!d.weights.finite() || !d.bias.finite()) {
          throw ParseError("dense layer " + std::to_string(layer_index) +
                           " contains non-finite parameters");
        }
        model.layers.emplace_back(std::move(d));
        width = out;
      } else if (kind == "relu") {
        model.layers.emplace_back(ReluLayer{layer_index});
      } else if (kind == "fair_dropout") {
        FairDropoutLayer f;
        f.layer_index = layer_index;
        f.config.width = entry.at("H").get<std::size_t>();
        f.config.p_gen = entry.at("p_gen").get<double>();
        f.config.p_mem = entry.at("p_mem").get<double>();
        f.config.allocation_seed = entry.at("allocation_seed").get<std::uint64_t>();
        f.config.validate();
        if (width.has_value() && *width != f.config.width) {
          throw ParseError("fair_dropout layer " + std::to_string(layer_index) +
                           " width " + std::to_string(f.config.width) +
                           " does not match preceding width " + std::to_string(*width));
        }
        width = f.config.width;
        model.layers.emplace_back(std::move(f));
      } else {
        throw ParseError("unknown layer kind \"" + kind + "\"");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint schema mismatch: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint schema mismatch: ") + e.what());
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << checkpoint_to_string(model);
  if (!out) throw Error("failed writing checkpoint to " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_string(buf.str());
}

}  // namespace fairlab
