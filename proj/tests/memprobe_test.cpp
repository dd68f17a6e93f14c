#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fairlab/errors.hpp"
#include "fairlab/memprobe.hpp"
#include "fairlab/metrics.hpp"
#include "fairlab/model_config.hpp"
#include "fairlab/rng.hpp"

using namespace fairlab;

namespace {

DenseLayer make_dense(std::size_t out, std::size_t in, std::vector<double> w,
                      std::vector<double> b, int layer_index) {
  DenseLayer d;
  d.weights = Tensor::matrix(out, in, std::move(w));
  d.bias = Tensor::vector(std::move(b));
  d.layer_index = layer_index;
  return d;
}

GroupedExample ex(std::int64_t id, int y, int a, std::vector<double> f) {
  GroupedExample e;
  e.id = id;
  e.y = y;
  e.a = a;
  e.features = std::move(f);
  return e;
}

// Two linearly separated scalar examples. The relu kills the hidden
// activations of id 1 in the carrier models below, so its gradients there
// are exactly zero.
GroupedDataset pair_ds() {
  return GroupedDataset(Split::kTrain, {ex(0, 1, 0, {1.0}), ex(1, 0, 0, {-1.0})});
}

// One hidden neuron (0,1) carries the whole class-1 logit; its siblings are
// disconnected from the head.
Model carrier_model() {
  Model m;
  m.layers.push_back(make_dense(3, 1, {0.0, 5.0, 0.0}, {0.0, 0.0, 0.0}, 0));
  m.layers.push_back(ReluLayer{1});
  m.layers.push_back(make_dense(2, 3, {0.0, 0.0, 0.0, 0.0, 1.0, 0.0}, {0.1, 0.0}, 2));
  return m;
}

// Two bitwise-identical hidden neurons carry the class-1 logit together;
// either alone keeps the prediction, so a flip needs both.
Model twin_model() {
  Model m;
  m.layers.push_back(make_dense(2, 1, {2.0, 2.0}, {0.0, 0.0}, 0));
  m.layers.push_back(ReluLayer{1});
  m.layers.push_back(make_dense(2, 2, {0.0, 0.0, 1.0, 1.0}, {0.3, 0.0}, 2));
  return m;
}

// Head is all zeros: logits are [0, 0] whatever the mask, prediction is
// always class 0.
Model zero_head_model() {
  Model m;
  m.layers.push_back(make_dense(2, 1, {1.0, -1.0}, {0.0, 0.0}, 0));
  m.layers.push_back(ReluLayer{1});
  m.layers.push_back(make_dense(2, 2, {0.0, 0.0, 0.0, 0.0}, {0.0, 0.0}, 2));
  return m;
}

std::vector<double> flat_params(const Model& m) {
  std::vector<double> out;
  for (const Layer& layer : m.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      out.insert(out.end(), d->weights.values().begin(), d->weights.values().end());
      out.insert(out.end(), d->bias.values().begin(), d->bias.values().end());
    }
  }
  return out;
}

GroupedDataset random_ds(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GroupedExample> rows;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> f(dim);
    for (double& v : f) v = rng.normal(0.0, 1.0);
    rows.push_back(ex(static_cast<std::int64_t>(i), static_cast<int>(i % 2),
                      static_cast<int>((i / 2) % 2), std::move(f)));
  }
  return GroupedDataset(Split::kTrain, std::move(rows));
}

}  // namespace

TEST_CASE("quantiles follow the linear-interpolation convention") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  CHECK(quantile_sorted(v, 0.25) == 1.75);
  CHECK(quantile_sorted(v, 0.5) == 2.5);
  CHECK(quantile_sorted(v, 0.75) == 3.25);
  CHECK(quantile_sorted(v, 0.0) == 1.0);
  CHECK(quantile_sorted(v, 1.0) == 4.0);

  CHECK(quantile_sorted({7.0}, 0.25) == 7.0);
  CHECK(quantile_sorted({7.0}, 0.75) == 7.0);

  const std::vector<double> odd{0.0, 10.0, 20.0};
  CHECK(quantile_sorted(odd, 0.5) == 10.0);
  CHECK(quantile_sorted(odd, 0.25) == 5.0);

  CHECK_THROWS_AS(quantile_sorted({}, 0.5), EvalError);
  CHECK_THROWS_AS(quantile_sorted(v, -0.01), ConfigError);
  CHECK_THROWS_AS(quantile_sorted(v, 1.01), ConfigError);
}

TEST_CASE("scores vanish when the reference batch is the example itself") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 3; c.hidden_widths = {4, 3}; return c; }(), 11);
  GroupedDataset ds = random_ds(6, 3, 21);
  NeuronMaskSet no_mask;

  // grad - (1/1) grad cancels coordinate by coordinate.
  for (const ScoredNeuron& s : criticality_scores(m, ds, 2, {2}, no_mask, Mode::kTest)) {
    CHECK(s.score == 0.0);
  }
  // Two copies: g - 0.5 g - 0.5 g is still exact in binary floating point.
  for (const ScoredNeuron& s : criticality_scores(m, ds, 2, {2, 2}, no_mask, Mode::kTest)) {
    CHECK(s.score == 0.0);
  }
}

TEST_CASE("every unmasked hidden neuron is scored once, in order") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 2; c.hidden_widths = {3, 2}; return c; }(), 5);
  GroupedDataset ds = random_ds(4, 2, 33);
  NeuronMaskSet no_mask;

  auto scores = criticality_scores(m, ds, 0, {1, 2, 3}, no_mask);
  REQUIRE(scores.size() == 5);
  auto hidden = m.hidden_neurons();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    CHECK(scores[i].ref == hidden[i]);
    CHECK(scores[i].score >= 0.0);
  }

  SUBCASE("masked neurons never appear") {
    NeuronMaskSet mask;
    mask.add(hidden[1]);
    mask.add(hidden[4]);
    auto rest = criticality_scores(m, ds, 0, {1, 2, 3}, mask);
    REQUIRE(rest.size() == 3);
    for (const ScoredNeuron& s : rest) {
      CHECK(s.ref != hidden[1]);
      CHECK(s.ref != hidden[4]);
    }
  }

  SUBCASE("a single hidden neuron gives a single entry") {
    Model tiny = build_model(
        []{ ModelConfig c; c.input_dim = 2; c.hidden_widths = {1}; return c; }(), 5);
    auto one = criticality_scores(tiny, ds, 0, {1}, no_mask);
    REQUIRE(one.size() == 1);
    CHECK(one[0].ref == NeuronRef{0, 0});
  }

  SUBCASE("an empty reference batch is an error") {
    CHECK_THROWS_AS(criticality_scores(m, ds, 0, {}, no_mask), EvalError);
  }
}

TEST_CASE("scores equal a hand-accumulated gradient difference") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 2; c.hidden_widths = {3}; return c; }(), 17);
  GroupedDataset ds = random_ds(5, 2, 44);
  NeuronMaskSet no_mask;
  const std::vector<std::int64_t> refs{1, 3};

  // Accumulate grad(target) - mean grad(refs) in the same order the library
  // does, then take the L2 norm over each hidden neuron's row and bias.
  auto grads_for = [&](std::int64_t id) {
    const GroupedExample& e = ds.example(id);
    return model_backward(m, Tensor::vector(e.features),
                          static_cast<std::size_t>(e.y), id, &no_mask);
  };
  GradientRecord g0 = grads_for(0);
  std::vector<double> w_diff(g0.dense[0].weights.values().size(), 0.0);
  std::vector<double> b_diff(g0.dense[0].bias.values().size(), 0.0);
  auto add = [&](const GradientRecord& g, double scale) {
    const auto& gw = g.dense[0].weights.values();
    const auto& gb = g.dense[0].bias.values();
    for (std::size_t j = 0; j < gw.size(); ++j) w_diff[j] += scale * gw[j];
    for (std::size_t j = 0; j < gb.size(); ++j) b_diff[j] += scale * gb[j];
  };
  add(g0, 1.0);
  for (std::int64_t rid : refs) add(grads_for(rid), -1.0 / 2.0);

  auto scores = criticality_scores(m, ds, 0, refs, no_mask);
  REQUIRE(scores.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    double sq = b_diff[j] * b_diff[j];
    for (std::size_t i = 0; i < 2; ++i) sq += w_diff[j * 2 + i] * w_diff[j * 2 + i];
    CHECK(scores[j].score == std::sqrt(sq));
  }
}

TEST_CASE("a single carrying neuron is found and flips in one step") {
  Model m = carrier_model();
  GroupedDataset ds = pair_ds();

  LocalizationResult r = critical_neurons(m, ds, 0, {1}, 3);
  CHECK(r.flipped);
  CHECK(r.iterations == 1);
  REQUIRE(r.removed.size() == 1);
  CHECK(r.removed[0] == NeuronRef{0, 1});
  CHECK(r.example_id == 0);
  CHECK(r.reference_batch_ids == std::vector<std::int64_t>{1});

  // Trace starts at the unmasked loss and records one entry per removal.
  REQUIRE(r.loss_trace.size() == 2);
  NeuronMaskSet empty;
  CHECK(r.loss_trace[0] == model_loss(m, Tensor::vector({1.0}), 1, 0, &empty));
  CHECK(r.loss_trace[1] > r.loss_trace[0]);

  SUBCASE("the exhaustive search confirms the one-neuron set") {
    auto minimal = brute_force_min_flip(m, ds, 0, 2);
    REQUIRE(minimal.has_value());
    REQUIRE(minimal->size() == 1);
    CHECK((*minimal)[0] == NeuronRef{0, 1});
  }
}

TEST_CASE("equal scores break ties to the lowest neuron") {
  Model m = twin_model();
  GroupedDataset ds = pair_ds();

  LocalizationResult r = critical_neurons(m, ds, 0, {1}, 5);
  CHECK(r.flipped);
  REQUIRE(r.removed.size() == 2);
  CHECK(r.removed[0] == NeuronRef{0, 0});
  CHECK(r.removed[1] == NeuronRef{0, 1});
  CHECK(r.iterations == 2);
  CHECK(r.loss_trace.size() == 3);

  // Only the final removal changes the predicted class.
  NeuronMaskSet all_but_last;
  all_but_last.add(r.removed[0]);
  CHECK(m.predict(Tensor::vector({1.0}), Mode::kTrain, 0, &all_but_last) == 1);
  NeuronMaskSet full;
  full.add(r.removed[0]);
  full.add(r.removed[1]);
  CHECK(m.predict(Tensor::vector({1.0}), Mode::kTrain, 0, &full) != 1);

  SUBCASE("no single neuron flips, so the oracle needs size two") {
    CHECK_FALSE(brute_force_min_flip(m, ds, 0, 1).has_value());
    auto minimal = brute_force_min_flip(m, ds, 0, 2);
    REQUIRE(minimal.has_value());
    REQUIRE(minimal->size() == 2);
    CHECK((*minimal)[0] == NeuronRef{0, 0});
    CHECK((*minimal)[1] == NeuronRef{0, 1});
  }
}

TEST_CASE("an already-misclassified example flips at zero removals") {
  Model m = zero_head_model();  // always predicts class 0
  GroupedDataset ds(Split::kTrain, {ex(0, 1, 0, {1.0}), ex(1, 0, 0, {-1.0})});

  LocalizationResult r = critical_neurons(m, ds, 0, {1}, 5);
  CHECK(r.flipped);
  CHECK(r.removed.empty());
  CHECK(r.iterations == 0);
  CHECK(r.loss_trace.size() == 1);

  // The exhaustive search agrees: the empty set already flips.
  auto minimal = brute_force_min_flip(m, ds, 0, 3);
  REQUIRE(minimal.has_value());
  CHECK(minimal->empty());
}

TEST_CASE("zero search budget returns an empty, unflipped result") {
  LocalizationResult r = critical_neurons(carrier_model(), pair_ds(), 0, {1}, 0);
  CHECK_FALSE(r.flipped);
  CHECK(r.removed.empty());
  CHECK(r.iterations == 0);
  CHECK(r.loss_trace.size() == 1);

  CHECK_THROWS_AS(critical_neurons(carrier_model(), pair_ds(), 0, {1}, -1), ConfigError);
  CHECK_THROWS_AS(critical_neurons(carrier_model(), pair_ds(), 0, {}, 3), EvalError);
}

TEST_CASE("a constant model exhausts the budget without flipping") {
  Model m = zero_head_model();
  GroupedDataset ds(Split::kTrain, {ex(0, 0, 0, {1.0}), ex(1, 1, 0, {-1.0})});

  // Target 0 is predicted correctly and masking cannot change the logits.
  LocalizationResult r = critical_neurons(m, ds, 0, {1}, 2);
  CHECK_FALSE(r.flipped);
  CHECK(r.iterations == 2);
  REQUIRE(r.removed.size() == 2);
  // All scores are zero, so removals walk the neurons in order.
  CHECK(r.removed[0] == NeuronRef{0, 0});
  CHECK(r.removed[1] == NeuronRef{0, 1});

  // With budget beyond the hidden width the search runs out of neurons.
  LocalizationResult r2 = critical_neurons(m, ds, 0, {1}, 10);
  CHECK_FALSE(r2.flipped);
  CHECK(r2.removed.size() == 2);

  CHECK_FALSE(brute_force_min_flip(m, ds, 0, 2).has_value());
}

TEST_CASE("localization never modifies the model") {
  Model m = carrier_model();
  m.mode = Mode::kTest;
  GroupedDataset ds = pair_ds();
  const std::vector<double> before = flat_params(m);

  critical_neurons(m, ds, 0, {1}, 3, Mode::kTrain);
  brute_force_min_flip(m, ds, 0, 2);
  ProbeConfig pc;
  pc.max_iters = 2;
  pc.reference_batch_size = 2;
  probe_report(m, ds, ds, {0, 1}, pc);

  CHECK(flat_params(m) == before);
  CHECK(m.mode == Mode::kTest);
}

TEST_CASE("localization is deterministic") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 3; c.hidden_widths = {6}; return c; }(), 29);
  GroupedDataset ds = random_ds(10, 3, 55);
  const std::vector<std::int64_t> refs{4, 5, 6, 7};

  LocalizationResult a = critical_neurons(m, ds, 1, refs, 6);
  LocalizationResult b = critical_neurons(m, ds, 1, refs, 6);
  CHECK(a.flipped == b.flipped);
  CHECK(a.iterations == b.iterations);
  CHECK(a.removed == b.removed);
  CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("greedy removal never beats the exhaustive minimum") {
  // Whenever the greedy search flips within the oracle's size limit, the
  // greedy set is a witness, so the oracle must find one at most as large.
  int compared = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m = build_model(
        []{ ModelConfig c; c.input_dim = 3; c.hidden_widths = {4}; return c; }(),
        seed * 13 + 1);
    GroupedDataset ds = random_ds(12, 3, seed * 7 + 3);
    std::vector<std::int64_t> refs{6, 7, 8, 9, 10, 11};
    for (std::int64_t target = 0; target < 4; ++target) {
      LocalizationResult greedy = critical_neurons(m, ds, target, refs, 4);
      if (!greedy.flipped || greedy.removed.empty()) continue;
      auto minimal = brute_force_min_flip(m, ds, target, 4);
      REQUIRE(minimal.has_value());
      CHECK(minimal->size() >= 1);
      CHECK(minimal->size() <= greedy.removed.size());
      ++compared;
    }
  }
  CHECK(compared > 0);
}

TEST_CASE("the exhaustive search enforces its limits") {
  GroupedDataset ds = pair_ds();
  CHECK_THROWS_AS(brute_force_min_flip(carrier_model(), ds, 0, 5), ConfigError);
  CHECK_THROWS_AS(brute_force_min_flip(carrier_model(), ds, 0, -1), ConfigError);

  Model wide = build_model(
      []{ ModelConfig c; c.input_dim = 1; c.hidden_widths = {18}; return c; }(), 3);
  try {
    brute_force_min_flip(wide, ds, 0, 2);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("16") != std::string::npos);
    CHECK(std::string(e.what()).find("18") != std::string::npos);
  }

  SUBCASE("size limit zero only reports trivial flips") {
    CHECK_FALSE(brute_force_min_flip(carrier_model(), ds, 0, 0).has_value());
  }
}

TEST_CASE("the probe report aggregates per group") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 3; c.hidden_widths = {5}; return c; }(), 71);
  GroupedDataset ds = random_ds(12, 3, 91);  // 3 examples in each of 4 groups

  std::vector<std::int64_t> targets(12);
  std::iota(targets.begin(), targets.end(), std::int64_t{0});
  ProbeConfig pc;
  pc.max_iters = 3;
  pc.reference_batch_size = 4;
  pc.seed = 99;

  ProbeReport rep = probe_report(m, ds, ds, targets, pc);
  REQUIRE(rep.rows.size() == 12);
  CHECK(rep.baseline_train_wga ==
        evaluate(m, ds, Mode::kTrain).worst_group_accuracy);
  CHECK(rep.baseline_test_wga ==
        evaluate(m, ds, Mode::kTest).worst_group_accuracy);

  int improved = 0;
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    const ProbeRow& row = rep.rows[i];
    CHECK(row.example_id == targets[i]);
    CHECK(row.group_y == ds.example(row.example_id).y);
    CHECK(row.group_a == ds.example(row.example_id).a);
    CHECK(row.n_removed >= 0);
    CHECK(row.n_removed <= pc.max_iters);
    if (row.test_wga_after_drop >= rep.baseline_test_wga) ++improved;
  }
  CHECK(rep.improved_test_fraction == improved / 12.0);

  REQUIRE(rep.per_group.size() == 4);
  for (const GroupProbeStat& stat : rep.per_group) {
    CHECK(stat.count == 3);
    std::vector<double> removed;
    double flipped = 0.0;
    for (const ProbeRow& row : rep.rows) {
      if (row.group_y != stat.group.y || row.group_a != stat.group.a) continue;
      removed.push_back(row.n_removed);
      flipped += row.flipped ? 1.0 : 0.0;
    }
    std::sort(removed.begin(), removed.end());
    REQUIRE(removed.size() == 3);
    // Hand-rolled three-point quartiles.
    CHECK(stat.q1 == removed[0] + 0.5 * (removed[1] - removed[0]));
    CHECK(stat.median == removed[1]);
    CHECK(stat.q3 == removed[1] + 0.5 * (removed[2] - removed[1]));
    CHECK(stat.mean ==
          doctest::Approx((removed[0] + removed[1] + removed[2]) / 3.0).epsilon(1e-15));
    CHECK(stat.flipped_fraction == flipped / 3.0);
  }

  SUBCASE("the report is deterministic") {
    ProbeReport again = probe_report(m, ds, ds, targets, pc);
    REQUIRE(again.rows.size() == rep.rows.size());
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      CHECK(again.rows[i].n_removed == rep.rows[i].n_removed);
      CHECK(again.rows[i].flipped == rep.rows[i].flipped);
      CHECK(again.rows[i].train_wga_after_drop == rep.rows[i].train_wga_after_drop);
      CHECK(again.rows[i].test_wga_after_drop == rep.rows[i].test_wga_after_drop);
    }
  }

  SUBCASE("a reference batch larger than the dataset is clamped") {
    ProbeConfig big = pc;
    big.reference_batch_size = 64;
    ProbeReport rep2 = probe_report(m, ds, ds, {0, 1}, big);
    CHECK(rep2.rows.size() == 2);
  }
}

TEST_CASE("a zero-iteration probe leaves accuracy untouched") {
  Model m = build_model(
      []{ ModelConfig c; c.input_dim = 3; c.hidden_widths = {4}; return c; }(), 7);
  GroupedDataset ds = random_ds(8, 3, 19);
  ProbeConfig pc;
  pc.max_iters = 0;
  pc.reference_batch_size = 3;

  ProbeReport rep = probe_report(m, ds, ds, {0, 1, 2, 3}, pc);
  for (const ProbeRow& row : rep.rows) {
    CHECK(row.n_removed == 0);
    // Empty masks evaluate bit-for-bit like the baseline.
    CHECK(row.train_wga_after_drop == rep.baseline_train_wga);
    CHECK(row.test_wga_after_drop == rep.baseline_test_wga);
  }
  CHECK(rep.improved_test_fraction == 1.0);
}

TEST_CASE("probe configuration is validated") {
  Model m = carrier_model();
  GroupedDataset ds = pair_ds();
  ProbeConfig pc;

  pc.max_iters = -1;
  CHECK_THROWS_AS(probe_report(m, ds, ds, {0}, pc), ConfigError);
  pc.max_iters = 1;
  pc.reference_batch_size = 0;
  CHECK_THROWS_AS(probe_report(m, ds, ds, {0}, pc), ConfigError);
  pc.reference_batch_size = 1;
  CHECK_THROWS_AS(probe_report(m, ds, ds, {}, pc), ConfigError);
}
