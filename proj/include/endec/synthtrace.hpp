#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file synthtrace.hpp
 * @brief Deterministic synthetic layer-logit traces.
 *
 * Token trajectories (x = layer position / (num_layers - 1)):
 *
 * - factual_sharp: flat at base_logit, then a smoothstep ramp of height
 *   growth_magnitude between x = growth_onset_layer and x = 1.
 * - easy_flat: rises gently by growth_magnitude over the lower half and is
 *   constant at base_logit from x = 0.5 on.
 * - distractor: constant base_logit.
 *
 * Unprofiled tokens sit at logit 0. Each profiled token receives one seeded
 * Gaussian offset per step (sigma = noise_sigma) shared by all its layers,
 * so ties between tokens are broken without distorting trajectory shapes.
 */

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "endec/traceio.hpp"

namespace endec::synth {

enum class TokenKind { factual_sharp, easy_flat, distractor };

struct TokenProfile {
  std::uint32_t token_id = 0;
  TokenKind kind = TokenKind::distractor;
  double base_logit = 0.0;
  double growth_onset_layer = 0.5;
  double growth_magnitude = 0.0;
  std::uint64_t noise_seed = 0;
};

/// Profiles for one step. They replace base profiles with the same token id
/// and add the rest.
struct StepOverride {
  std::string label;
  std::vector<TokenProfile> profiles;
};

inline constexpr double kDefaultNoiseSigma = 0.05;

struct ScenarioSpec {
  std::uint32_t vocab_size = 0;
  std::uint16_t num_layers = 0;
  std::vector<TokenProfile> profiles;
  /// One entry per generated step. Empty means a single step of base profiles.
  std::vector<StepOverride> steps;
  std::uint64_t seed = 0;
  double noise_sigma = kDefaultNoiseSigma;
  std::string tokenizer_id = "synthetic";

  /// Throws InvalidSpec.
  void validate() const;
  std::size_t step_count() const noexcept { return steps.empty() ? 1 : steps.size(); }
  /// Effective profiles of one step after applying its override.
  std::vector<TokenProfile> profiles_for_step(std::size_t step) const;
};

/// Noise-free logit of a profile at layer position `pos` of `num_layers`.
double trajectory_logit(const TokenProfile& profile, std::size_t pos, std::size_t num_layers);

/// Dense trace capturing layers 0..num_layers-1. Pure function of the spec.
trace::LayerTrace generate(const ScenarioSpec& spec);

/// One-step trace where greedy picks a flat token and END with default
/// settings picks a sharply growing one. Expected values were computed
/// offline in extended precision from the stored float32 logits.
struct OvertakeFixture {
  trace::LayerTrace trace;
  std::uint32_t flat_token = 0;
  std::uint32_t sharp_token = 0;
  std::uint32_t expected_greedy = 0;
  std::uint32_t expected_end = 0;
  std::uint32_t expected_end_lambda0 = 0;
  std::vector<std::uint32_t> expected_vhead;
  std::vector<std::uint16_t> expected_layer_set;
  double expected_flat_entropy = 0.0;
  double expected_sharp_entropy = 0.0;
  double expected_flat_adjusted = 0.0;
  double expected_sharp_adjusted = 0.0;
};

OvertakeFixture overtake_fixture();

const char* to_string(TokenKind kind) noexcept;

/// Scenario files are JSON; see docs/scenario-format.md. Throws InvalidSpec.
ScenarioSpec parse_scenario(std::string_view json_text);
ScenarioSpec load_scenario(const std::string& path);
std::string scenario_to_json(const ScenarioSpec& spec);

}  // namespace endec::synth
