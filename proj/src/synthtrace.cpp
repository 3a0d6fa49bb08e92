// SPDX-License-Identifier: Apache-2.0

#include "endec/synthtrace.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "endec/errors.hpp"

namespace endec::synth {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double unit_open(std::uint64_t& state) {
  // (0, 1], never 0 so log() stays finite.
  return (static_cast<double>(splitmix64(state) >> 11) + 1.0) * 0x1.0p-53;
}

// Box-Muller on a private generator so output does not depend on the
// standard library's distribution implementations.
double gaussian(std::uint64_t seed) {
  std::uint64_t state = seed;
  const double u1 = unit_open(state);
  const double u2 = unit_open(state);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t noise_key(std::uint64_t seed, std::uint64_t profile_seed, std::uint64_t step,
                        std::uint32_t token) {
  std::uint64_t s = seed;
  std::uint64_t k = splitmix64(s);
  s = k ^ profile_seed;
  k = splitmix64(s);
  s = k ^ step;
  k = splitmix64(s);
  s = k ^ token;
  return splitmix64(s);
}

double smoothstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

void validate_profile(const TokenProfile& p, std::uint32_t vocab_size) {
  const std::string where = "profile for token " + std::to_string(p.token_id);
  if (p.token_id >= vocab_size) throw InvalidSpec(where + ": token id >= vocab_size");
  if (!std::isfinite(p.base_logit)) throw InvalidSpec(where + ": base_logit must be finite");
  if (!(p.growth_onset_layer >= 0.0 && p.growth_onset_layer <= 1.0)) {
    throw InvalidSpec(where + ": growth_onset_layer must be in [0, 1]");
  }
  if (!(p.growth_magnitude >= 0.0) || !std::isfinite(p.growth_magnitude)) {
    throw InvalidSpec(where + ": growth_magnitude must be finite and >= 0");
  }
  if (p.kind == TokenKind::factual_sharp) {
    if (!(p.growth_magnitude > 0.0)) throw InvalidSpec(where + ": factual_sharp needs growth_magnitude > 0");
    if (p.growth_onset_layer < 0.5) throw InvalidSpec(where + ": factual_sharp needs growth_onset_layer >= 0.5");
  }
}

void validate_unique(const std::vector<TokenProfile>& profiles, const std::string& where) {
  std::set<std::uint32_t> seen;
  for (const auto& p : profiles) {
    if (!seen.insert(p.token_id).second) {
      throw InvalidSpec(where + ": duplicate profile for token " + std::to_string(p.token_id));
    }
  }
}

}  // namespace

void ScenarioSpec::validate() const {
  if (vocab_size == 0) throw InvalidSpec("vocab_size must be positive");
  if (num_layers == 0) throw InvalidSpec("num_layers must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InvalidSpec("noise_sigma must be >= 0");
  validate_unique(profiles, "profiles");
  for (const auto& p : profiles) validate_profile(p, vocab_size);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    validate_unique(steps[i].profiles, "step " + std::to_string(i));
    for (const auto& p : steps[i].profiles) validate_profile(p, vocab_size);
  }
}

std::vector<TokenProfile> ScenarioSpec::profiles_for_step(std::size_t step) const {
  std::vector<TokenProfile> out = profiles;
  if (step < steps.size()) {
    for (const TokenProfile& o : steps[step].profiles) {
      const auto it = std::find_if(out.begin(), out.end(),
                                   [&](const TokenProfile& p) { return p.token_id == o.token_id; });
      if (it != out.end()) {
        *it = o;
      } else {
        out.push_back(o);
      }
    }
  }
  return out;
}

double trajectory_logit(const TokenProfile& p, std::size_t pos, std::size_t num_layers) {
  const double x = num_layers <= 1 ? 1.0 : static_cast<double>(pos) / static_cast<double>(num_layers - 1);
  switch (p.kind) {
    case TokenKind::factual_sharp: {
      const double span = 1.0 - p.growth_onset_layer;
      const double ramp = span > 0.0 ? smoothstep((x - p.growth_onset_layer) / span) : (x >= 1.0 ? 1.0 : 0.0);
      return p.base_logit + p.growth_magnitude * ramp;
    }
    case TokenKind::easy_flat:
      return p.base_logit - p.growth_magnitude * (1.0 - smoothstep(x / 0.5));
    case TokenKind::distractor:
      return p.base_logit;
  }
  return p.base_logit;
}

trace::LayerTrace generate(const ScenarioSpec& spec) {
  spec.validate();
  trace::LayerTrace out;
  out.header.vocab_size = spec.vocab_size;
  out.header.encoding = trace::Encoding::dense_f32;
  out.header.tokenizer_id = spec.tokenizer_id;
  out.header.layer_indices.resize(spec.num_layers);
  for (std::uint16_t i = 0; i < spec.num_layers; ++i) out.header.layer_indices[i] = i;
  out.header.step_count = spec.step_count();

  const std::size_t n = spec.num_layers;
  const std::size_t v = spec.vocab_size;
  for (std::size_t step = 0; step < spec.step_count(); ++step) {
    trace::StepRecord rec;
    rec.step_index = step;
    rec.dense.assign(n * v, 0.0f);
    for (const TokenProfile& p : spec.profiles_for_step(step)) {
      const double offset =
          spec.noise_sigma * gaussian(noise_key(spec.seed, p.noise_seed, step, p.token_id));
      for (std::size_t pos = 0; pos < n; ++pos) {
        rec.dense[pos * v + p.token_id] = static_cast<float>(trajectory_logit(p, pos, n) + offset);
      }
    }
    out.steps.push_back(std::move(rec));
  }
  return out;
}

OvertakeFixture overtake_fixture() {
  constexpr std::uint32_t kVocab = 8;
  constexpr std::uint16_t kLayers = 32;
  constexpr std::uint32_t kFlat = 2;
  constexpr std::uint32_t kSharp = 5;

  // Per-layer probabilities; logits are their logs. The flat token holds
  // 0.45 at every upper layer, the sharp one jumps from 0.001 to 0.30 at the
  // last non-final layer and ends at 0.35. Tokens 6 and 7 stay below the
  // default head threshold.
  auto row = [](std::uint16_t layer) {
    std::vector<double> p(kVocab, 1.0 / kVocab);
    if (layer < 24) return p;
    const double rest = layer < 30 ? 0.13675 : (layer == 30 ? 0.062 : 0.0495);
    std::fill(p.begin(), p.end(), rest);
    p[kFlat] = 0.45;
    p[kSharp] = layer < 30 ? 0.001 : (layer == 30 ? 0.30 : 0.35);
    p[6] = p[7] = 0.001;
    return p;
  };

  OvertakeFixture f;
  f.trace.header.vocab_size = kVocab;
  f.trace.header.tokenizer_id = "overtake-fixture";
  f.trace.header.step_count = 1;
  for (std::uint16_t l = 0; l < kLayers; ++l) f.trace.header.layer_indices.push_back(l);
  trace::StepRecord rec;
  rec.step_index = 0;
  for (std::uint16_t l = 0; l < kLayers; ++l) {
    for (const double p : row(l)) rec.dense.push_back(static_cast<float>(std::log(p)));
  }
  f.trace.steps.push_back(std::move(rec));

  f.flat_token = kFlat;
  f.sharp_token = kSharp;
  f.expected_greedy = kFlat;
  f.expected_end = kSharp;
  f.expected_end_lambda0 = kFlat;
  f.expected_vhead = {0, 1, 2, 3, 4, 5};
  f.expected_layer_set = {24, 25, 26, 27, 28, 29, 30};
  // lambda = 2, alpha = 0.01, layers 24..30, standard sign.
  f.expected_flat_entropy = 1.9459101490553131593;
  f.expected_sharp_entropy = 0.1316414955114419447;
  f.expected_flat_adjusted = 0.0091836733866689871913;
  f.expected_sharp_adjusted = 0.26898353810881384;
  return f;
}

const char* to_string(TokenKind kind) noexcept {
  switch (kind) {
    case TokenKind::factual_sharp: return "factual_sharp";
    case TokenKind::easy_flat: return "easy_flat";
    case TokenKind::distractor: return "distractor";
  }
  return "?";
}

}  // namespace endec::synth
