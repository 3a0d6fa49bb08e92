#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file decoder.hpp
 * @brief Per-step decoding strategies over layer-logit traces.
 *
 * Three strategies share one entry point (decide):
 *
 * - greedy: argmax of the final layer's softmax P_N.
 * - end: cross-layer entropy adjustment. For every candidate v in the head
 *   set V_head = {v : P_N(v) >= alpha * max P_N}, the per-layer
 *   probabilities P_l(v) over the selected layer set are normalized into a
 *   distribution q over layers, its entropy H(v) is taken, and the score
 *   becomes exp(-lambda * H(v)) * P_N(v). Tokens outside V_head keep P_N.
 *   A token that grows sharply in late layers has a peaked q (low H) and is
 *   barely touched; a token whose probability stays flat is suppressed.
 * - dola: picks the candidate layer with the largest Jensen-Shannon
 *   divergence from the final layer and scores head tokens by
 *   log P_N(v) - log P_premature(v).
 *
 * Steps are independent: the trace fixes the context, so a decision never
 * influences later logits. Ties always go to the lowest token id or the
 * lowest layer index.
 */

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "endec/numkernels.hpp"
#include "endec/traceio.hpp"

namespace endec::decode {

enum class Strategy { greedy, end, dola };
enum class EntropySign { standard, literal };

/// Model layer indices, ascending.
using LayerSet = std::vector<std::uint16_t>;

struct ExplicitLayers {
  LayerSet layers;
};
/// The `index`-th of `count` contiguous partitions of the captured non-final layers.
struct BucketLayers {
  std::uint32_t index = 3;
  std::uint32_t count = 4;
};
/// Per step, the bucket (of `count`) whose mean JSD against the final layer is largest.
struct DynamicBucket {
  std::uint32_t count = 4;
};
using LayerSetPolicy = std::variant<ExplicitLayers, BucketLayers, DynamicBucket>;

inline constexpr double kDefaultLambda = 2.0;
inline constexpr double kDefaultAlpha = 0.01;
inline constexpr double kDefaultEpsilonDenom = 1e-12;
/// Logit given to vocabulary entries absent from a top-k sparse row.
inline constexpr float kDefaultSparseFill = -1.0e4f;
/// JSDs closer than this count as tied when choosing the premature layer.
inline constexpr double kJsdTieTolerance = 1e-12;

struct DecodeConfig {
  Strategy strategy = Strategy::end;
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;
  LayerSetPolicy layer_policy = BucketLayers{};
  EntropySign entropy_sign = EntropySign::standard;
  bool renormalize = false;
  /// Append the final layer to the resolved layer set.
  bool include_final = false;
  double epsilon_denom = kDefaultEpsilonDenom;
  float sparse_fill = kDefaultSparseFill;

  /// Throws InvalidConfig naming the offending field and its valid range.
  void validate() const;
};

struct CrossLayerDistribution {
  std::uint32_t token_id = 0;
  num::ProbVector q;
};

struct StepDecision {
  std::uint64_t step = 0;
  Strategy strategy = Strategy::greedy;
  std::uint32_t chosen_token = 0;
  /// Full-vocabulary scores the argmax is taken over. greedy: P_N. end: adjusted
  /// scores inside V_head, P_N elsewhere. dola: contrast scores inside V_head,
  /// -inf elsewhere.
  std::vector<double> final_scores;
  /// Ascending token ids; always holds every argmax of P_N.
  std::vector<std::uint32_t> vhead;
  /// Cross-layer entropy per V_head member (end only; aligned with vhead).
  std::vector<double> entropies;
  /// P_N over the full vocabulary.
  std::vector<double> final_probs;
  LayerSet layer_set;
  std::optional<std::uint16_t> contrast_layer;

  double chosen_score() const { return final_scores.at(chosen_token); }
  std::optional<double> entropy_of(std::uint32_t token) const;
};

/// P_l over the full vocabulary for each requested model layer. Sparse rows
/// are expanded with `fill` first. Throws LayerNotCaptured.
std::vector<num::ProbVector> layer_distributions(const trace::StepRecord& record,
                                                 const trace::TraceHeader& header,
                                                 std::span<const std::uint16_t> layers,
                                                 float fill = kDefaultSparseFill);

/// q_l = P_l(token) / sum_i P_i(token) over the layer set. Throws
/// DegenerateToken when the denominator is below epsilon_denom.
CrossLayerDistribution build_cross_layer(std::uint32_t token_id,
                                         std::span<const num::ProbVector> layer_probs,
                                         double epsilon_denom = kDefaultEpsilonDenom);
/// Same, from the token's per-layer probabilities directly.
CrossLayerDistribution build_cross_layer_from(std::uint32_t token_id,
                                              std::span<const double> token_layer_probs,
                                              double epsilon_denom = kDefaultEpsilonDenom);

/// standard: -sum q log q in [0, log |L|]. literal: sum q log q in [-log |L|, 0].
double cross_layer_entropy(const CrossLayerDistribution& d, EntropySign sign);

/// Entropy assigned to a degenerate token: that of a uniform q.
double degenerate_entropy(std::size_t layer_count, EntropySign sign);

/// Tokens with P_N(v) >= alpha * max P_N, ascending. Requires 0 < alpha <= 1.
std::vector<std::uint32_t> vhead_filter(const num::ProbVector& final_probs, double alpha);

/// Contiguous partitions of `n` items into `count` buckets; bucket i covers
/// [ceil(i*n/count), ceil((i+1)*n/count)).
std::pair<std::size_t, std::size_t> bucket_bounds(std::size_t n, std::uint32_t index,
                                                  std::uint32_t count);

/// Resolves the layer set for one step. `record` is required by DynamicBucket.
LayerSet resolve_layer_set(const trace::TraceHeader& header, const LayerSetPolicy& policy,
                           const trace::StepRecord* record = nullptr, bool include_final = false,
                           float fill = kDefaultSparseFill);

StepDecision greedy_decide(const trace::StepRecord& record, const trace::TraceHeader& header,
                           const DecodeConfig& cfg);
StepDecision end_adjust(const trace::StepRecord& record, const trace::TraceHeader& header,
                        const DecodeConfig& cfg);
StepDecision dola_contrast(const trace::StepRecord& record, const trace::TraceHeader& header,
                           std::span<const std::uint16_t> candidate_layers, const DecodeConfig& cfg);

/// Dispatches on cfg.strategy (resolving the layer set for dola).
StepDecision decide(const trace::StepRecord& record, const trace::TraceHeader& header,
                    const DecodeConfig& cfg);

/// One decision per step. Errors carry the failing step ordinal. With
/// threads > 1 steps are evaluated concurrently; output order is step order.
std::vector<StepDecision> decode_sequence(const trace::LayerTrace& trace, const DecodeConfig& cfg,
                                          unsigned threads = 1);

/// Non-negative sampling weights over the vocabulary for a decision. dola
/// contrast scores are mapped through a softmax restricted to V_head.
std::vector<double> sampling_weights(const StepDecision& decision);

/// Temperature + nucleus sampling over sampling_weights. Only used when a
/// caller explicitly asks for sampling; decisions themselves are argmax.
std::uint32_t sample_token(const StepDecision& decision, double temperature, double top_p,
                           std::mt19937_64& rng);

const char* to_string(Strategy s) noexcept;
const char* to_string(EntropySign s) noexcept;
std::optional<Strategy> parse_strategy(std::string_view text) noexcept;
std::optional<EntropySign> parse_entropy_sign(std::string_view text) noexcept;
/// Parses "16,20,24", "bucket:3/4", "dynamic" or "dynamic:4".
LayerSetPolicy parse_layer_policy(std::string_view text);
std::string describe(const LayerSetPolicy& policy);

}  // namespace endec::decode
