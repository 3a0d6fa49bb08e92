// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "endec/decoder.hpp"
#include "endec/errors.hpp"
#include "gen.hpp"
#include "oracle.hpp"

using namespace endec;
using namespace endec::decode;
using trace::Encoding;
using trace::LayerTrace;
using trace::StepRecord;
using trace::TraceHeader;

namespace {

// mpmath softmax of the float32-rounded logits [ln 6, ln 3, ln 1, -30].
constexpr double kPropSix[4] = {0.6000000016471566618882, 0.3000000002521820399323, 0.09999999810065194055674,
                                9.357622791106344336233e-15};

TraceHeader dense_header(std::uint32_t vocab, std::vector<std::uint16_t> layers) {
  TraceHeader h;
  h.vocab_size = vocab;
  h.layer_indices = std::move(layers);
  h.step_count = 1;
  return h;
}

/// Dense record whose layer rows are log of the given probabilities.
StepRecord from_probs(const std::vector<std::vector<double>>& rows) {
  StepRecord r;
  for (const auto& row : rows) {
    for (const double p : row) r.dense.push_back(static_cast<float>(std::log(p)));
  }
  return r;
}

std::vector<std::uint16_t> iota_layers(std::size_t n) {
  std::vector<std::uint16_t> v(n);
  std::iota(v.begin(), v.end(), std::uint16_t{0});
  return v;
}

DecodeConfig end_cfg(LayerSetPolicy policy, double lambda = kDefaultLambda) {
  DecodeConfig c;
  c.layer_policy = std::move(policy);
  c.lambda = lambda;
  return c;
}

std::vector<std::size_t> positions(const TraceHeader& h, const LayerSet& set) {
  std::vector<std::size_t> out;
  for (const auto l : set) out.push_back(*h.position_of(l));
  return out;
}

}  // namespace

TEST_SUITE("decoder") {
  TEST_CASE("config validation") {
    DecodeConfig c;
    CHECK_NOTHROW(c.validate());
    c.alpha = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c.alpha = 1.5;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c.alpha = 1.0;
    CHECK_NOTHROW(c.validate());
    c.lambda = -0.1;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c.lambda = 0.0;
    c.epsilon_denom = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
  }

  TEST_CASE("layer policy parsing") {
    CHECK(std::get<ExplicitLayers>(parse_layer_policy("16,20,24")).layers == LayerSet{16, 20, 24});
    const auto b = std::get<BucketLayers>(parse_layer_policy("bucket:3/4"));
    CHECK(b.index == 3);
    CHECK(b.count == 4);
    CHECK(std::get<DynamicBucket>(parse_layer_policy("dynamic")).count == 4);
    CHECK(std::get<DynamicBucket>(parse_layer_policy("dynamic:3")).count == 3);
    CHECK_THROWS_AS(parse_layer_policy(""), InvalidConfig);
    CHECK_THROWS_AS(parse_layer_policy("bucket:4/4"), InvalidConfig);
    CHECK_THROWS_AS(parse_layer_policy("bucket:x"), InvalidConfig);
    CHECK_THROWS_AS(parse_layer_policy("1,,2"), InvalidConfig);
    CHECK_THROWS_AS(parse_layer_policy("70000"), InvalidConfig);
    CHECK(describe(parse_layer_policy("bucket:3/4")) == "bucket:3/4");
    CHECK(parse_strategy("dola") == Strategy::dola);
    CHECK_FALSE(parse_strategy("beam").has_value());
    CHECK(parse_entropy_sign("literal") == EntropySign::literal);
  }

  TEST_CASE("layer_distributions") {
    const auto h = dense_header(4, {0});
    StepRecord r;
    r.dense = {0.f, 0.f, 0.f, 0.f};
    const LayerSet l0{0};
    const auto d = layer_distributions(r, h, l0);
    REQUIRE(d.size() == 1);
    for (const double p : d[0]) CHECK(p == 0.25);

    StepRecord g;
    g.dense = {static_cast<float>(std::log(6.0)), static_cast<float>(std::log(3.0)), 0.f, -30.f};
    const auto e = layer_distributions(g, h, l0);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(e[0][i] - kPropSix[i]) <= 1e-15 + 1e-12 * kPropSix[i]);

    const auto h32 = dense_header(4, iota_layers(32));
    StepRecord big;
    big.dense.assign(32 * 4, 0.f);
    const LayerSet l99{99};
    try {
      layer_distributions(big, h32, l99);
      FAIL("expected LayerNotCaptured");
    } catch (const LayerNotCaptured&) {
    }
  }

  TEST_CASE("layer_distributions expands sparse rows") {
    TraceHeader h = dense_header(4, {3});
    h.encoding = Encoding::topk_sparse;
    h.topk = 2;
    StepRecord r;
    r.sparse = {{0, std::log(3.0f)}, {2, 0.f}};
    const LayerSet l3{3};
    const auto d = layer_distributions(r, h, l3, -30.f);
    const double tail = std::exp(-30.0);
    const double z = 3.0 + 1.0 + 2 * tail;
    CHECK(d[0][0] == doctest::Approx(3.0 / z).epsilon(1e-7));
    CHECK(d[0][1] == doctest::Approx(tail / z).epsilon(1e-7));
    CHECK(d[0][2] == doctest::Approx(1.0 / z).epsilon(1e-7));
  }

  TEST_CASE("build_cross_layer") {
    const std::vector<double> a{0.1, 0.1, 0.2};
    const auto d = build_cross_layer_from(7, a);
    CHECK(d.token_id == 7);
    CHECK(d.q[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(d.q[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(d.q[2] == doctest::Approx(0.5).epsilon(1e-15));

    const std::vector<double> c{0.3, 0.3, 0.3, 0.3};
    for (const double q : build_cross_layer_from(0, c).q) CHECK(q == doctest::Approx(0.25).epsilon(1e-15));

    const std::vector<double> tiny{1e-20, 1e-20};
    CHECK_THROWS_AS(build_cross_layer_from(0, tiny, 1e-12), DegenerateToken);

    // Same result from full layer distributions.
    std::vector<num::ProbVector> layers{num::ProbVector({0.1, 0.9}), num::ProbVector({0.1, 0.9}),
                                        num::ProbVector({0.2, 0.8})};
    CHECK(build_cross_layer(0, layers).q == d.q);
  }

  TEST_CASE("cross_layer_entropy") {
    const CrossLayerDistribution one_hot{0, num::ProbVector({0.0, 1.0, 0.0})};
    CHECK(cross_layer_entropy(one_hot, EntropySign::standard) == 0.0);
    CHECK(cross_layer_entropy(one_hot, EntropySign::literal) == 0.0);

    const CrossLayerDistribution uni{0, num::ProbVector(std::vector<double>(8, 0.125))};
    CHECK(cross_layer_entropy(uni, EntropySign::standard) == doctest::Approx(std::log(8.0)).epsilon(1e-15));
    CHECK(cross_layer_entropy(uni, EntropySign::literal) == doctest::Approx(-std::log(8.0)).epsilon(1e-15));

    const CrossLayerDistribution q{0, num::ProbVector({0.25, 0.25, 0.5})};
    CHECK(std::abs(cross_layer_entropy(q, EntropySign::standard) - 1.039720770839917964) < 1e-15);
    CHECK(degenerate_entropy(7, EntropySign::standard) == doctest::Approx(std::log(7.0)));
    CHECK(degenerate_entropy(7, EntropySign::literal) == doctest::Approx(-std::log(7.0)));
  }

  TEST_CASE("vhead_filter") {
    const num::ProbVector p({0.5, 0.04, 0.0004, 0.4596});
    CHECK(vhead_filter(p, 0.1) == std::vector<std::uint32_t>{0, 3});
    CHECK(vhead_filter(p, 1.0) == std::vector<std::uint32_t>{0});
    CHECK(vhead_filter(num::ProbVector({0.4, 0.2, 0.4}), 1.0) == std::vector<std::uint32_t>{0, 2});

    testgen::Rng rng(0xf117'0001);
    for (int iter = 0; iter < 500; ++iter) {
      const num::ProbVector r(testgen::prob_vector(rng, testgen::pick(rng, 1, 200), 0.1));
      const double mx = *std::max_element(r.begin(), r.end());
      std::vector<std::uint32_t> brute;
      for (std::uint32_t i = 0; i < r.size(); ++i) {
        if (r[i] >= 0.001 * mx) brute.push_back(i);
      }
      REQUIRE(vhead_filter(r, 0.001) == brute);
    }
  }

  TEST_CASE("bucket partition") {
    CHECK(bucket_bounds(31, 3, 4) == std::pair<std::size_t, std::size_t>{24, 31});
    CHECK(bucket_bounds(31, 0, 4) == std::pair<std::size_t, std::size_t>{0, 8});
    // Buckets tile the range for every size.
    for (std::size_t n = 1; n < 70; ++n) {
      for (std::uint32_t k = 1; k <= std::min<std::size_t>(n, 6); ++k) {
        std::size_t next = 0;
        for (std::uint32_t i = 0; i < k; ++i) {
          const auto [lo, hi] = bucket_bounds(n, i, k);
          REQUIRE(lo == next);
          REQUIRE(hi > lo);
          next = hi;
        }
        REQUIRE(next == n);
      }
    }
  }

  TEST_CASE("resolve_layer_set") {
    const auto h = dense_header(4, iota_layers(32));
    const LayerSet upper = resolve_layer_set(h, BucketLayers{3, 4});
    LayerSet expect(7);
    std::iota(expect.begin(), expect.end(), std::uint16_t{24});
    CHECK(upper == expect);
    CHECK(resolve_layer_set(h, ExplicitLayers{{16, 20, 24, 28}}) == LayerSet{16, 20, 24, 28});
    CHECK(resolve_layer_set(h, ExplicitLayers{{28, 16, 16}}) == LayerSet{16, 28});
    CHECK(resolve_layer_set(h, BucketLayers{3, 4}, nullptr, true).back() == 31);
    CHECK_THROWS_AS(resolve_layer_set(h, BucketLayers{4, 4}), InvalidConfig);
    CHECK_THROWS_AS(resolve_layer_set(h, DynamicBucket{4}), InvalidConfig);
    CHECK_THROWS_AS(resolve_layer_set(h, ExplicitLayers{{40}}), LayerNotCaptured);
    CHECK_THROWS_AS(resolve_layer_set(dense_header(4, {31}), BucketLayers{0, 1}), InvalidConfig);
  }

  TEST_CASE("dynamic bucket picks the only divergent bucket") {
    // 9 captured layers: 8 non-final in 4 buckets of 2. Bucket 1 differs from final.
    const auto h = dense_header(3, iota_layers(9));
    std::vector<std::vector<double>> rows(9, {0.7, 0.2, 0.1});
    rows[2] = rows[3] = {0.1, 0.1, 0.8};
    const auto r = from_probs(rows);
    CHECK(resolve_layer_set(h, DynamicBucket{4}, &r) == LayerSet{2, 3});
  }

  TEST_CASE("END: lambda zero equals greedy") {
    testgen::Rng rng(0xe4d0'0001);
    for (int iter = 0; iter < 200; ++iter) {
      testgen::TraceShape shape;
      shape.min_layers = 2;
      const auto t = testgen::random_trace(rng, shape);
      auto cfg = end_cfg(BucketLayers{0, 1}, 0.0);
      cfg.renormalize = iter % 2 == 1;
      DecodeConfig g;
      g.strategy = Strategy::greedy;
      const auto e = decode_sequence(t, cfg);
      const auto gr = decode_sequence(t, g);
      for (std::size_t s = 0; s < e.size(); ++s) REQUIRE(e[s].chosen_token == gr[s].chosen_token);
    }
  }

  TEST_CASE("END: adjusted score with ln 2 entropy") {
    // Token 0: P_N 0.4, equal probability at both set layers, so H = ln 2.
    const auto h = dense_header(2, {0, 1, 2});
    const auto r = from_probs({{0.3, 0.7}, {0.3, 0.7}, {0.4, 0.6}});
    auto cfg = end_cfg(ExplicitLayers{{0, 1}}, 1.0);
    cfg.alpha = 0.5;
    const auto d = end_adjust(r, h, cfg);
    CHECK(d.vhead == std::vector<std::uint32_t>{0, 1});
    CHECK(*d.entropy_of(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(d.final_scores[0] == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(d.final_scores[1] == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(d.chosen_token == 1);
  }

  TEST_CASE("END: sharp token overtakes a flat one") {
    // A = 0 flat over 8 set layers, B = 1 near one-hot in the last set layer.
    const auto h = dense_header(3, iota_layers(9));
    std::vector<std::vector<double>> rows;
    for (int l = 0; l < 7; ++l) rows.push_back({0.3, 1e-9, 0.7 - 1e-9});
    rows.push_back({0.3, 0.6, 0.1});
    rows.push_back({0.45, 0.35, 0.20});
    const auto r = from_probs(rows);
    const auto cfg = end_cfg(BucketLayers{0, 1}, 1.0);
    const auto d = end_adjust(r, h, cfg);
    const auto o = oracle::end_decision(r, h, positions(h, d.layer_set), 1.0L, 0.01L);
    CHECK(d.layer_set == LayerSet{0, 1, 2, 3, 4, 5, 6, 7});
    CHECK(*d.entropy_of(0) == doctest::Approx(std::log(8.0)).epsilon(1e-9));
    CHECK(d.final_scores[0] == doctest::Approx(0.45 / 8).epsilon(1e-6));
    CHECK(*d.entropy_of(1) < 1e-6);
    for (std::size_t v = 0; v < 3; ++v) CHECK(std::abs(d.final_scores[v] - static_cast<double>(o.scores[v])) < 1e-12);
    CHECK(d.chosen_token == 1);
    CHECK(o.chosen == 1);
  }

  TEST_CASE("END: degenerate token gets maximal entropy") {
    // Token 1 is invisible at both set layers but sits in the head at the final layer.
    const auto h = dense_header(2, {0, 1, 2});
    StepRecord r;
    r.dense = {0.f, -200.f, 0.f, -200.f, 0.f, 0.f};
    const auto d = end_adjust(r, h, end_cfg(ExplicitLayers{{0, 1}}, 1.0));
    CHECK(*d.entropy_of(1) == doctest::Approx(std::log(2.0)));
    CHECK(d.final_scores[1] == doctest::Approx(0.25));
  }

  TEST_CASE("END: literal sign flips the multiplier") {
    const auto h = dense_header(2, {0, 1, 2});
    const auto r = from_probs({{0.3, 0.7}, {0.3, 0.7}, {0.4, 0.6}});
    auto cfg = end_cfg(ExplicitLayers{{0, 1}}, 1.0);
    cfg.entropy_sign = EntropySign::literal;
    const auto d = end_adjust(r, h, cfg);
    CHECK(*d.entropy_of(0) == doctest::Approx(-std::log(2.0)));
    CHECK(d.final_scores[0] == doctest::Approx(0.8).epsilon(1e-6));
  }

  TEST_CASE("END: renormalize keeps head mass and argmax") {
    testgen::Rng rng(0xe4d0'0002);
    for (int iter = 0; iter < 200; ++iter) {
      testgen::TraceShape shape;
      shape.min_layers = 3;
      shape.max_steps = 3;
      const auto t = testgen::random_trace(rng, shape);
      auto cfg = end_cfg(BucketLayers{0, 1}, testgen::uniform(rng, 0.0, 3.0));
      const auto raw = decode_sequence(t, cfg);
      cfg.renormalize = true;
      const auto ren = decode_sequence(t, cfg);
      for (std::size_t s = 0; s < raw.size(); ++s) {
        double head_mass = 0.0, adj_mass = 0.0;
        for (const auto v : ren[s].vhead) {
          head_mass += ren[s].final_probs[v];
          adj_mass += ren[s].final_scores[v];
        }
        REQUIRE(adj_mass == doctest::Approx(head_mass).epsilon(1e-12));
        const auto& r = raw[s];
        const auto best_raw_head =
            *std::max_element(r.vhead.begin(), r.vhead.end(),
                              [&](auto a, auto b) { return r.final_scores[a] < r.final_scores[b]; });
        const auto& n = ren[s];
        const auto best_ren_head =
            *std::max_element(n.vhead.begin(), n.vhead.end(),
                              [&](auto a, auto b) { return n.final_scores[a] < n.final_scores[b]; });
        REQUIRE(best_raw_head == best_ren_head);
      }
    }
  }

  TEST_CASE("END: scores within bounds and monotone suppression") {
    testgen::Rng rng(0xe4d0'0003);
    for (int iter = 0; iter < 300; ++iter) {
      testgen::TraceShape shape;
      shape.min_layers = 2;
      shape.max_steps = 2;
      const auto t = testgen::random_trace(rng, shape);
      const double lambda = testgen::uniform(rng, 0.0, 4.0);
      const auto ds = decode_sequence(t, end_cfg(BucketLayers{0, 1}, lambda));
      for (const auto& d : ds) {
        const double floor = std::pow(static_cast<double>(d.layer_set.size()), -lambda);
        for (std::size_t i = 0; i < d.vhead.size(); ++i) {
          const auto v = d.vhead[i];
          const double m = d.final_scores[v] / d.final_probs[v];
          REQUIRE(m <= 1.0 + 1e-12);
          REQUIRE(m >= floor * (1 - 1e-9));
          REQUIRE(d.final_scores[v] <= d.final_probs[v] * (1 + 1e-12));
        }
        for (std::size_t v = 0; v < d.final_scores.size(); ++v) {
          if (!std::binary_search(d.vhead.begin(), d.vhead.end(), static_cast<std::uint32_t>(v))) {
            REQUIRE(d.final_scores[v] == d.final_probs[v]);
          }
        }
      }
    }
    // For fixed P_N, larger H gives a strictly smaller score.
    const auto h = dense_header(3, {0, 1, 2});
    const auto flat = from_probs({{0.2, 0.4, 0.4}, {0.2, 0.4, 0.4}, {0.5, 0.25, 0.25}});
    const auto sharp = from_probs({{0.02, 0.49, 0.49}, {0.2, 0.4, 0.4}, {0.5, 0.25, 0.25}});
    const auto cfg = end_cfg(ExplicitLayers{{0, 1}}, 1.5);
    const auto a = end_adjust(flat, h, cfg);
    const auto b = end_adjust(sharp, h, cfg);
    REQUIRE(*a.entropy_of(0) > *b.entropy_of(0));
    CHECK(a.final_scores[0] < b.final_scores[0]);
  }

  TEST_CASE("END: scaling a token's layer probabilities leaves q unchanged") {
    testgen::Rng rng(0xe4d0'0004);
    for (int iter = 0; iter < 1000; ++iter) {
      std::vector<double> p(testgen::pick(rng, 1, 16));
      for (auto& x : p) x = testgen::uniform(rng, 1e-6, 1.0);
      auto scaled = p;
      const double c = std::exp(testgen::uniform(rng, -10.0, 10.0));
      for (auto& x : scaled) x *= c;
      const auto a = build_cross_layer_from(0, p);
      const auto b = build_cross_layer_from(0, scaled);
      for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(std::abs(a.q[i] - b.q[i]) <= 1e-9);
      REQUIRE(std::abs(cross_layer_entropy(a, EntropySign::standard) -
                       cross_layer_entropy(b, EntropySign::standard)) <= 1e-9);
    }
  }

  TEST_CASE("END matches the independent oracle over a 5-step trace") {
    testgen::Rng rng(0xe4d0'0005);
    testgen::TraceShape shape;
    shape.min_layers = 8;
    shape.max_layers = 12;
    shape.max_steps = 5;
    LayerTrace t;
    do {
      t = testgen::random_trace(rng, shape);
    } while (t.steps.size() != 5);
    const auto cfg = end_cfg(BucketLayers{3, 4});
    const auto ds = decode_sequence(t, cfg);
    REQUIRE(ds.size() == 5);
    for (std::size_t s = 0; s < 5; ++s) {
      const auto o = oracle::end_decision(t.steps[s], t.header, positions(t.header, ds[s].layer_set), 2.0L, 0.01L);
      CHECK(ds[s].vhead == o.head);
      for (std::size_t i = 0; i < o.head.size(); ++i) {
        CHECK(std::abs(ds[s].entropies[i] - static_cast<double>(o.entropy[i])) < 1e-9);
      }
      for (std::size_t v = 0; v < o.scores.size(); ++v) {
        CHECK(std::abs(ds[s].final_scores[v] - static_cast<double>(o.scores[v])) < 1e-12);
      }
      CHECK(ds[s].chosen_token == o.chosen);
    }
  }

  TEST_CASE("greedy picks the final-layer argmax") {
    testgen::Rng rng(0x9eed'0001);
    DecodeConfig g;
    g.strategy = Strategy::greedy;
    for (int iter = 0; iter < 200; ++iter) {
      const auto t = testgen::random_trace(rng);
      const auto ds = decode_sequence(t, g);
      for (std::size_t s = 0; s < ds.size(); ++s) {
        const auto pn = oracle::softmax(oracle::row(t.steps[s], t.header, t.header.num_layers() - 1, -1e4f));
        REQUIRE(ds[s].chosen_token == std::max_element(pn.begin(), pn.end()) - pn.begin());
      }
    }
    LayerTrace empty;
    empty.header = dense_header(4, {0, 1});
    empty.header.step_count = 0;
    CHECK(decode_sequence(empty, g).empty());
  }

  TEST_CASE("DoLa: identical layers fall back to greedy") {
    const auto h = dense_header(4, {0, 1, 2, 3});
    std::vector<std::vector<double>> rows(4, {0.1, 0.5, 0.3, 0.1});
    const auto r = from_probs(rows);
    DecodeConfig cfg;
    cfg.strategy = Strategy::dola;
    const LayerSet cand{0, 1, 2};
    const auto d = dola_contrast(r, h, cand, cfg);
    CHECK(d.contrast_layer == 0);
    CHECK(d.chosen_token == 1);
    for (const auto v : d.vhead) CHECK(d.final_scores[v] == 0.0);
    CHECK(std::isinf(d.final_scores[0]) == false);
  }

  TEST_CASE("DoLa: picks the uniform candidate over a copy of the final") {
    const auto h = dense_header(4, {0, 1, 2});
    const auto r = from_probs({{0.7, 0.1, 0.1, 0.1}, {0.25, 0.25, 0.25, 0.25}, {0.7, 0.1, 0.1, 0.1}});
    DecodeConfig cfg;
    cfg.strategy = Strategy::dola;
    const LayerSet cand{0, 1};
    const auto d = dola_contrast(r, h, cand, cfg);
    CHECK(d.contrast_layer == 1);
    CHECK(d.chosen_token == 0);
    CHECK(d.final_scores[0] == doctest::Approx(std::log(0.7 / 0.25)).epsilon(1e-6));
  }

  TEST_CASE("DoLa: layer selection equals an exhaustive scan") {
    testgen::Rng rng(0xd01a'0001);
    for (int iter = 0; iter < 200; ++iter) {
      testgen::TraceShape shape;
      shape.min_layers = 3;
      const auto t = testgen::random_trace(rng, shape);
      DecodeConfig cfg;
      cfg.strategy = Strategy::dola;
      cfg.layer_policy = BucketLayers{0, 1};
      const auto ds = decode_sequence(t, cfg);
      for (std::size_t s = 0; s < ds.size(); ++s) {
        const auto pos = oracle::dola_layer(t.steps[s], t.header, positions(t.header, ds[s].layer_set));
        REQUIRE(*ds[s].contrast_layer == t.header.layer_indices[pos]);
        for (std::size_t v = 0; v < t.header.vocab_size; ++v) {
          const bool in_head =
              std::binary_search(ds[s].vhead.begin(), ds[s].vhead.end(), static_cast<std::uint32_t>(v));
          if (!in_head) REQUIRE(std::isinf(ds[s].final_scores[v]));
        }
      }
    }
  }

  TEST_CASE("missing final layer data and errors carry the step") {
    LayerTrace t;
    t.header = dense_header(2, {0, 1, 2});
    t.header.step_count = 3;
    for (int s = 0; s < 3; ++s) t.steps.push_back(from_probs({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}));
    DecodeConfig cfg = end_cfg(ExplicitLayers{{0, 9}});
    try {
      decode_sequence(t, cfg);
      FAIL("expected LayerNotCaptured");
    } catch (const LayerNotCaptured& e) {
      REQUIRE(e.step().has_value());
      CHECK(*e.step() == 0);
    }
  }

  TEST_CASE("decisions are deterministic across thread counts") {
    testgen::Rng rng(0xde7e'0001);
    testgen::TraceShape shape;
    shape.min_layers = 4;
    shape.max_steps = 40;
    const auto t = testgen::random_trace(rng, shape);
    const auto cfg = end_cfg(DynamicBucket{2});
    const auto a = decode_sequence(t, cfg, 1);
    const auto b = decode_sequence(t, cfg, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t s = 0; s < a.size(); ++s) {
      CHECK(a[s].chosen_token == b[s].chosen_token);
      CHECK(a[s].final_scores == b[s].final_scores);
    }
  }

  TEST_CASE("sampling") {
    const auto h = dense_header(4, {0, 1, 2});
    const auto r = from_probs({{0.4, 0.3, 0.2, 0.1}, {0.4, 0.3, 0.2, 0.1}, {0.4, 0.3, 0.2, 0.1}});
    const auto d = end_adjust(r, h, end_cfg(ExplicitLayers{{0, 1}}));
    std::mt19937_64 a(7), b(7);
    for (int i = 0; i < 50; ++i) CHECK(sample_token(d, 1.0, 1.0, a) == sample_token(d, 1.0, 1.0, b));
    std::mt19937_64 c(3);
    for (int i = 0; i < 50; ++i) CHECK(sample_token(d, 1.0, 1e-9, c) == d.chosen_token);
    const auto w = sampling_weights(d);
    CHECK(w.size() == 4);
  }
}
