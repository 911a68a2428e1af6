#include <doctest.h>

#include "cdm/config.hpp"

using namespace cdm;
using namespace cdm::config;

TEST_CASE("defaults") {
  auto c = from_json(json::object());
  CHECK(c.replicates == 50);
  CHECK(c.conformal.alpha == 0.05);
  CHECK(c.conformal.M == 40);
  CHECK(c.diffusion.steps == 400);
  CHECK(c.conformal.c_grid.back() == conformal::kInf);
  const auto& dgp = std::get<datagen::DgpConfig>(c.data);
  CHECK(dgp.n_train == 7500);
  CHECK(dgp.n_cal == 2500);
  CHECK(dgp.n_test == 1000);
}

TEST_CASE("hash ignores formatting, key order and runtime settings") {
  auto a = json::parse(R"({"seed": 4, "data": {"d": 6, "variance": "hetero"}, "conformal": {"c_grid": [0.1, "inf"]}})");
  auto b = json::parse(R"({
    "conformal": {"c_grid": [0.1, "inf"]},
    "data": {"variance": "hetero", "d": 6},
    "seed": 4, "workers": 3, "output": "elsewhere.jsonl", "verbose": true
  })");
  CHECK(config_hash(from_json(a)) == config_hash(from_json(b)));
  CHECK(config_hash(from_json(a)).size() == 16);
  auto c = a;
  c["seed"] = 5;
  CHECK(config_hash(from_json(a)) != config_hash(from_json(c)));
  auto d = from_json(a);
  CHECK(config_hash(from_json(to_json(d))) == config_hash(d));
}

TEST_CASE("invalid documents") {
  CHECK_THROWS_AS(from_json(json::parse(R"({"sed": 1})")), ConfigError);
  CHECK_THROWS_AS(from_json(json::parse(R"({"data": {"noise": "cauchy"}})")), ConfigError);
  CHECK_THROWS_AS(from_json(json::parse(R"({"conformal": {"alpha": 1.5}})")), ConfigError);
  CHECK_THROWS_AS(from_json(json::parse(R"({"methods": ["cqr"]})")), ConfigError);
  CHECK_THROWS_AS(from_json(json::parse(R"({"data": {"source": "csv", "path": "/nonexistent.csv"}})")), ConfigError);
  CHECK_THROWS_AS(from_json(json::parse(R"({"replicates": "ten"})")), ConfigError);
}

TEST_CASE("overrides") {
  json doc = json::object();
  apply_override(doc, "conformal.alpha=0.1");
  apply_override(doc, "data.noise=gamma");
  apply_override(doc, "diffusion.hidden=[8,8]");
  auto c = from_json(doc);
  CHECK(c.conformal.alpha == 0.1);
  CHECK(std::get<datagen::DgpConfig>(c.data).noise == datagen::Noise::gamma);
  CHECK(c.diffusion.hidden == std::vector<std::size_t>{8, 8});
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
}
