#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>

#include "fairlab/errors.hpp"
#include "fairlab/model.hpp"
#include "fairlab/model_config.hpp"
#include "fairlab/rng.hpp"

using namespace fairlab;

namespace {

Model awkward_model() {
  ModelConfig cfg;
  cfg.input_dim = 3;
  cfg.num_classes = 2;
  cfg.hidden_widths = {4};
  cfg.fd_position = "dpfc";
  cfg.projection_width = 5;
  cfg.p_gen = 0.4;
  cfg.p_mem = 0.75;
  cfg.allocation_seed = 12345;
  Model m = build_model(cfg, 99);
  m.mode = Mode::kTest;
  m.seed = 99;

  // Values whose decimal round trip is only safe at 17 significant digits.
  auto& w = std::get<DenseLayer>(m.layers[0]).weights.values();
  w[0] = 0.1;
  w[1] = 1.0 / 3.0;
  w[2] = std::numeric_limits<double>::min();
  w[3] = -1e300;
  w[4] = 1e-300;
  w[5] = -0.0;
  std::get<DenseLayer>(m.layers[0]).bias[1] = 1e22;
  return m;
}

std::string tmp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("write read write is byte identical") {
  Model m = awkward_model();
  std::string first = checkpoint_to_string(m);
  Model back = checkpoint_from_string(first);
  CHECK(checkpoint_to_string(back) == first);
}

TEST_CASE("round trip preserves every field bitwise") {
  Model m = awkward_model();
  Model back = checkpoint_from_string(checkpoint_to_string(m));

  REQUIRE(back.layers.size() == m.layers.size());
  CHECK(back.mode == Mode::kTest);
  CHECK(back.seed == 99);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    CHECK(back.layers[i].index() == m.layers[i].index());
    if (const auto* d = std::get_if<DenseLayer>(&m.layers[i])) {
      const auto& bd = std::get<DenseLayer>(back.layers[i]);
      CHECK(bd.layer_index == d->layer_index);
      CHECK(bd.weights.shape() == d->weights.shape());
      CHECK(bd.weights.values() == d->weights.values());
      CHECK(bd.bias.values() == d->bias.values());
    } else if (const auto* f = std::get_if<FairDropoutLayer>(&m.layers[i])) {
      const auto& bf = std::get<FairDropoutLayer>(back.layers[i]);
      CHECK(bf.config.width == f->config.width);
      CHECK(bf.config.p_gen == f->config.p_gen);
      CHECK(bf.config.p_mem == f->config.p_mem);
      CHECK(bf.config.allocation_seed == f->config.allocation_seed);
    }
  }

  // The restored model computes the same function, bit for bit.
  Rng rng(5);
  std::vector<double> x(3);
  for (double& v : x) v = rng.normal(0, 1);
  CHECK(back.forward(Tensor::vector(x), Mode::kTest).values() ==
        m.forward(Tensor::vector(x), Mode::kTest).values());
  CHECK(back.forward(Tensor::vector(x), Mode::kTrain, 7).values() ==
        m.forward(Tensor::vector(x), Mode::kTrain, 7).values());
}

TEST_CASE("train mode survives the trip") {
  Model m = awkward_model();
  m.mode = Mode::kTrain;
  std::string text = checkpoint_to_string(m);
  CHECK(text.find("\"mode\": \"train\"") != std::string::npos);
  CHECK(checkpoint_from_string(text).mode == Mode::kTrain);
}

TEST_CASE("file save and load round trip") {
  Model m = awkward_model();
  std::string path = tmp_file("fairlab_ckpt_test.json");
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  CHECK(checkpoint_to_string(back) == checkpoint_to_string(m));

  // Overwriting an existing file is allowed.
  back.seed = 100;
  save_checkpoint(back, path);
  CHECK(load_checkpoint(path).seed == 100);
  std::remove(path.c_str());
}

TEST_CASE("loading a missing file fails cleanly") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/ckpt.json"), ParseError);
}

TEST_CASE("malformed checkpoints raise ParseError") {
  CHECK_THROWS_AS(checkpoint_from_string("{nope"), ParseError);
  CHECK_THROWS_AS(checkpoint_from_string("[]"), ParseError);

  auto layer = [](const std::string& body) {
    return std::string("{\"layers\":[") + body + "],\"mode\":\"test\",\"seed\":1}";
  };

  // Unknown kind.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"conv\",\"layer_index\":0}")),
                  ParseError);
  // Missing required field.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"dense\",\"layer_index\":0,\"in\":2,\"out\":2,"
                      "\"weights\":[1,2,3,4]}")),
                  ParseError);
  // Weight count disagrees with in*out.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"dense\",\"layer_index\":0,\"in\":2,\"out\":2,"
                      "\"weights\":[1,2,3],\"bias\":[0,0]}")),
                  ParseError);
  // Bias count disagrees with out.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"dense\",\"layer_index\":0,\"in\":2,\"out\":2,"
                      "\"weights\":[1,2,3,4],\"bias\":[0]}")),
                  ParseError);
  // Out-of-range float literal becomes non-finite.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"dense\",\"layer_index\":0,\"in\":1,\"out\":1,"
                      "\"weights\":[1e999],\"bias\":[0]}")),
                  ParseError);
  // Invalid dropout probability.
  CHECK_THROWS_AS(checkpoint_from_string(layer(
                      "{\"kind\":\"fair_dropout\",\"layer_index\":0,\"H\":4,"
                      "\"p_gen\":1.5,\"p_mem\":0.5,\"allocation_seed\":1}")),
                  ParseError);
  // Bad mode string.
  CHECK_THROWS_AS(checkpoint_from_string(
                      "{\"layers\":[],\"mode\":\"eval\",\"seed\":1}"),
                  ParseError);
}

TEST_CASE("layer chain validation catches width breaks and duplicates") {
  std::string two = R"({"layers":[
    {"kind":"dense","layer_index":0,"in":2,"out":3,"weights":[1,2,3,4,5,6],"bias":[0,0,0]},
    {"kind":"dense","layer_index":1,"in":4,"out":2,"weights":[1,2,3,4,5,6,7,8],"bias":[0,0]}
  ],"mode":"test","seed":1})";
  CHECK_THROWS_AS(checkpoint_from_string(two), ParseError);

  std::string dup = R"({"layers":[
    {"kind":"relu","layer_index":3},
    {"kind":"relu","layer_index":3}
  ],"mode":"test","seed":1})";
  CHECK_THROWS_AS(checkpoint_from_string(dup), ParseError);

  std::string fd_break = R"({"layers":[
    {"kind":"dense","layer_index":0,"in":2,"out":3,"weights":[1,2,3,4,5,6],"bias":[0,0,0]},
    {"kind":"fair_dropout","layer_index":1,"H":5,"p_gen":0.5,"p_mem":0.5,"allocation_seed":1}
  ],"mode":"test","seed":1})";
  CHECK_THROWS_AS(checkpoint_from_string(fd_break), ParseError);
}

TEST_CASE("hand-written noncanonical JSON parses, then serializes canonically") {
  std::string loose = R"({
    "seed": 7,
    "mode": "train",
    "layers": [
      {"out": 2, "in": 2, "kind": "dense", "bias": [0, 1], "layer_index": 0,
       "weights": [1, 0.5, 0, 1]}
    ]
  })";
  Model m = checkpoint_from_string(loose);
  CHECK(m.seed == 7);
  CHECK(m.mode == Mode::kTrain);
  std::string canonical = checkpoint_to_string(m);
  CHECK(checkpoint_to_string(checkpoint_from_string(canonical)) == canonical);
  CHECK(canonical.find("0.5") != std::string::npos);
}
