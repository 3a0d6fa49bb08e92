// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "endec/decoder.hpp"
#include "endec/errors.hpp"
#include "endec/synthtrace.hpp"
#include "endec/traceio.hpp"
#include "gen.hpp"

using namespace endec;
using namespace endec::synth;

namespace {

float logit_at(const trace::LayerTrace& t, std::size_t step, std::size_t pos, std::uint32_t tok) {
  return t.steps[step].dense[pos * t.header.vocab_size + tok];
}

TokenProfile factual(std::uint32_t id, double base, double onset, double mag, std::uint64_t seed = 0) {
  return {id, TokenKind::factual_sharp, base, onset, mag, seed};
}

TokenProfile easy(std::uint32_t id, double base, double mag, std::uint64_t seed = 0) {
  return {id, TokenKind::easy_flat, base, 0.5, mag, seed};
}

}  // namespace

TEST_SUITE("synthtrace") {
  TEST_CASE("zero profiles give all-zero logits") {
    ScenarioSpec spec;
    spec.vocab_size = 5;
    spec.num_layers = 4;
    const auto t = generate(spec);
    CHECK(t.header.step_count == 1);
    CHECK(t.header.layer_indices == std::vector<std::uint16_t>{0, 1, 2, 3});
    for (const float x : t.steps[0].dense) CHECK(x == 0.0f);
  }

  TEST_CASE("factual_sharp is flat then ramps over the last quarter") {
    ScenarioSpec spec;
    spec.vocab_size = 4;
    spec.num_layers = 33;
    spec.noise_sigma = 0.0;
    spec.profiles = {factual(1, 0.0, 0.75, 6.0)};
    const auto t = generate(spec);
    for (std::size_t pos = 0; pos <= 24; ++pos) CHECK(logit_at(t, 0, pos, 1) == 0.0f);
    for (std::size_t pos = 25; pos < 33; ++pos) CHECK(logit_at(t, 0, pos, 1) > logit_at(t, 0, pos - 1, 1));
    CHECK(logit_at(t, 0, 32, 1) == doctest::Approx(6.0));
  }

  TEST_CASE("trajectory shapes") {
    const auto f = factual(0, 1.0, 0.5, 4.0);
    CHECK(trajectory_logit(f, 0, 11) == 1.0);
    CHECK(trajectory_logit(f, 5, 11) == 1.0);
    CHECK(trajectory_logit(f, 10, 11) == doctest::Approx(5.0));
    const auto e = easy(0, 3.0, 2.0);
    CHECK(trajectory_logit(e, 0, 11) == doctest::Approx(1.0));
    for (std::size_t pos = 5; pos < 11; ++pos) CHECK(trajectory_logit(e, pos, 11) == doctest::Approx(3.0));
    const TokenProfile d{0, TokenKind::distractor, -2.0, 0.5, 9.0, 0};
    for (std::size_t pos = 0; pos < 11; ++pos) CHECK(trajectory_logit(d, pos, 11) == -2.0);
    CHECK(trajectory_logit(f, 0, 1) == doctest::Approx(5.0));
  }

  TEST_CASE("generation contract over random scenarios") {
    testgen::Rng rng(0x5e7e'0001);
    for (int iter = 0; iter < 100; ++iter) {
      ScenarioSpec spec;
      spec.vocab_size = static_cast<std::uint32_t>(testgen::pick(rng, 8, 40));
      spec.num_layers = static_cast<std::uint16_t>(testgen::pick(rng, 4, 40));
      spec.seed = rng();
      const std::uint32_t f = 0, e = 1;
      spec.profiles = {factual(f, testgen::uniform(rng, -2, 2), testgen::uniform(rng, 0.5, 0.9),
                               testgen::uniform(rng, 0.5, 8), rng()),
                       easy(e, testgen::uniform(rng, -2, 6), testgen::uniform(rng, 0, 6), rng())};
      const auto t = generate(spec);
      CHECK_NOTHROW(t.validate());
      const std::size_t n = spec.num_layers;
      const std::size_t mid = (n - 1) / 2;
      REQUIRE(logit_at(t, 0, n - 1, f) - logit_at(t, 0, mid, f) >= spec.profiles[0].growth_magnitude - 1e-5);
      for (std::size_t pos = (n + 1) / 2; pos < n; ++pos) {
        REQUIRE(std::abs(logit_at(t, 0, pos, e) - logit_at(t, 0, n - 1, e)) < 0.1);
      }
      REQUIRE(trace::to_bytes(t) == trace::to_bytes(generate(spec)));
    }
  }

  TEST_CASE("seed changes noise but not shape") {
    ScenarioSpec spec;
    spec.vocab_size = 6;
    spec.num_layers = 8;
    spec.profiles = {factual(2, 0.0, 0.5, 3.0, 4)};
    spec.seed = 1;
    const auto a = generate(spec);
    spec.seed = 2;
    const auto b = generate(spec);
    CHECK(a.steps[0].dense != b.steps[0].dense);
    CHECK(logit_at(a, 0, 0, 0) == 0.0f);
  }

  TEST_CASE("step overrides replace and add profiles") {
    ScenarioSpec spec;
    spec.vocab_size = 6;
    spec.num_layers = 4;
    spec.profiles = {{1, TokenKind::distractor, 1.0, 0.5, 0.0, 0}, {2, TokenKind::distractor, 2.0, 0.5, 0.0, 0}};
    spec.steps = {{"a", {}}, {"b", {{2, TokenKind::distractor, 5.0, 0.5, 0.0, 0}, {3, TokenKind::distractor, 4.0, 0.5, 0.0, 0}}}};
    const auto p = spec.profiles_for_step(1);
    REQUIRE(p.size() == 3);
    spec.noise_sigma = 0.0;
    const auto t = generate(spec);
    CHECK(t.header.step_count == 2);
    CHECK(logit_at(t, 0, 3, 2) == 2.0f);
    CHECK(logit_at(t, 1, 3, 2) == 5.0f);
    CHECK(logit_at(t, 1, 3, 3) == 4.0f);
    CHECK(logit_at(t, 1, 3, 1) == 1.0f);
  }

  TEST_CASE("spec validation") {
    ScenarioSpec spec;
    spec.vocab_size = 4;
    spec.num_layers = 4;
    CHECK_NOTHROW(spec.validate());
    spec.profiles = {factual(4, 0, 0.6, 1)};
    CHECK_THROWS_AS(spec.validate(), InvalidSpec);
    spec.profiles = {factual(1, 0, 0.4, 1)};
    CHECK_THROWS_AS(spec.validate(), InvalidSpec);
    spec.profiles = {factual(1, 0, 0.6, 0)};
    CHECK_THROWS_AS(spec.validate(), InvalidSpec);
    spec.profiles = {easy(1, 0, 1), easy(1, 0, 2)};
    CHECK_THROWS_AS(spec.validate(), InvalidSpec);
    spec.profiles = {};
    spec.vocab_size = 0;
    CHECK_THROWS_AS(generate(spec), InvalidSpec);
  }

  TEST_CASE("factual entropy is below easy entropy at matched final probability") {
    testgen::Rng rng(0x5e7e'0002);
    for (int iter = 0; iter < 100; ++iter) {
      ScenarioSpec spec;
      spec.vocab_size = 32;
      spec.num_layers = static_cast<std::uint16_t>(testgen::pick(rng, 9, 48));
      spec.noise_sigma = 0.0;
      const double final_logit = testgen::uniform(rng, 1.0, 6.0);
      const double mag = testgen::uniform(rng, 1.0, 6.0);
      // The ramp must start before the last non-final layer, otherwise the
      // token is flat across the whole layer set.
      const double n = spec.num_layers;
      const double onset = testgen::uniform(rng, 0.5, std::min(0.95, (n - 2.5) / (n - 1)));
      spec.profiles = {factual(3, final_logit - mag, onset, mag),
                       easy(9, final_logit, testgen::uniform(rng, 0.0, 6.0))};
      const auto t = generate(spec);
      decode::DecodeConfig cfg;
      cfg.alpha = 1.0;
      const auto d = decode::end_adjust(t.steps[0], t.header, cfg);
      REQUIRE(d.final_probs[3] == doctest::Approx(d.final_probs[9]).epsilon(1e-6));
      REQUIRE(d.vhead.size() == 2);
      REQUIRE(*d.entropy_of(3) < *d.entropy_of(9));
    }
  }

  TEST_CASE("overtake fixture") {
    const auto f = overtake_fixture();
    CHECK_NOTHROW(f.trace.validate());
    decode::DecodeConfig g;
    g.strategy = decode::Strategy::greedy;
    CHECK(decode::decide(f.trace.steps[0], f.trace.header, g).chosen_token == f.expected_greedy);
    decode::DecodeConfig e;
    const auto d = decode::decide(f.trace.steps[0], f.trace.header, e);
    CHECK(d.chosen_token == f.expected_end);
    CHECK(d.vhead == f.expected_vhead);
    CHECK(d.layer_set == f.expected_layer_set);
    CHECK(std::abs(*d.entropy_of(f.flat_token) - f.expected_flat_entropy) < 1e-9);
    CHECK(std::abs(*d.entropy_of(f.sharp_token) - f.expected_sharp_entropy) < 1e-9);
    CHECK(std::abs(d.final_scores[f.flat_token] - f.expected_flat_adjusted) < 1e-9);
    CHECK(std::abs(d.final_scores[f.sharp_token] - f.expected_sharp_adjusted) < 1e-9);
    e.lambda = 0.0;
    CHECK(decode::decide(f.trace.steps[0], f.trace.header, e).chosen_token == f.expected_end_lambda0);
    CHECK(f.flat_token == f.expected_greedy);
    CHECK(f.sharp_token == f.expected_end);
  }

  TEST_CASE("scenario JSON") {
    const std::string text = R"({
      "vocab_size": 10, "num_layers": 6, "seed": 9, "noise_sigma": 0.01, "tokenizer_id": "t",
      "profiles": [{"token_id": 1, "kind": "factual_sharp", "base_logit": 0.5,
                    "growth_onset_layer": 0.7, "growth_magnitude": 3, "noise_seed": 4}],
      "steps": [{"label": "x", "profiles": [{"token_id": 2, "kind": "easy_flat", "base_logit": 1}]}]
    })";
    const auto spec = parse_scenario(text);
    CHECK(spec.vocab_size == 10);
    CHECK(spec.num_layers == 6);
    CHECK(spec.seed == 9);
    CHECK(spec.noise_sigma == 0.01);
    CHECK(spec.tokenizer_id == "t");
    REQUIRE(spec.profiles.size() == 1);
    CHECK(spec.profiles[0].kind == TokenKind::factual_sharp);
    CHECK(spec.profiles[0].growth_onset_layer == 0.7);
    CHECK(spec.profiles[0].noise_seed == 4);
    REQUIRE(spec.steps.size() == 1);
    CHECK(spec.steps[0].label == "x");
    CHECK(spec.steps[0].profiles[0].kind == TokenKind::easy_flat);

    const auto again = parse_scenario(scenario_to_json(spec));
    CHECK(trace::to_bytes(generate(again)) == trace::to_bytes(generate(spec)));

    CHECK_THROWS_AS(parse_scenario("{"), InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": 4})"), InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": 4, "num_layers": 2, "extra": 1})"), InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": 4, "num_layers": 2, "profiles": [{"token_id": 1, "kind": "weird"}]})"),
                    InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": "4", "num_layers": 2})"), InvalidSpec);
    // Integers are range-checked rather than narrowed.
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": -4, "num_layers": 2})"), InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": 4, "num_layers": 70000})"), InvalidSpec);
    CHECK_THROWS_AS(parse_scenario(R"({"vocab_size": 4, "num_layers": 2, "seed": -1})"), InvalidSpec);
    CHECK(parse_scenario(R"({"vocab_size": 4, "num_layers": 65535, "seed": 18446744073709551615})").num_layers == 65535);
  }

  TEST_CASE("checked-in diagnostics scenario loads") {
    const auto spec = load_scenario(std::string(ENDEC_TEST_DATA) + "/diagnostics_scenario.json");
    CHECK(spec.step_count() == 6);
    CHECK_NOTHROW(generate(spec).validate());
  }
}
