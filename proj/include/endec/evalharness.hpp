#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file evalharness.hpp
 * @brief Likelihood scoring, MC/QA metrics, layer diagnostics, throughput.
 *
 * Multiple-choice metrics follow the usual TruthfulQA conventions:
 *
 *   MC1 = 1 if the highest-scored option is true (ties: lowest option index)
 *   MC2 = sum_{true} exp(s_i) / sum_{all} exp(s_i)
 *   MC3 = |{true i : s_i > max_{false} s_j}| / |true|
 *
 * where s_i is the option's total log-score. QA metrics use SQuAD-style
 * answer normalization (lowercase, drop ASCII punctuation, drop the
 * articles a/an/the, collapse whitespace) and take the max over gold
 * answers.
 */

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "endec/decoder.hpp"
#include "endec/traceio.hpp"

namespace endec::eval {

struct MCExample {
  std::string question_id;
  std::vector<trace::LayerTrace> option_traces;
  std::vector<bool> labels;
  std::vector<std::vector<std::uint32_t>> option_token_ids;

  /// Throws InvalidExample.
  void validate() const;
};

struct QAExample {
  std::string question_id;
  std::string prediction;
  std::vector<std::string> gold_answers;
};

struct MCScores {
  double mc1 = 0.0;
  double mc2 = 0.0;
  double mc3 = 0.0;
};

struct MCExampleResult {
  std::string question_id;
  std::vector<double> option_scores;
  std::vector<bool> labels;
  MCScores scores;
};

struct MCReport {
  MCScores mean;
  std::vector<MCExampleResult> examples;
};

struct QAExampleResult {
  std::string question_id;
  double exact_match = 0.0;
  double f1 = 0.0;
};

struct QAReport {
  double exact_match = 0.0;
  double f1 = 0.0;
  std::vector<QAExampleResult> examples;
};

/// Probability assigned to each vocabulary entry when scoring a fixed
/// continuation. greedy: P_N. end: renormalized adjusted scores. dola:
/// softmax of contrast scores inside V_head scaled to V_head's P_N mass, P_N
/// elsewhere. Sums to 1.
std::vector<double> scoring_distribution(const decode::StepDecision& decision);

/// Sum over steps of log p(token_t) under the strategy's scoring
/// distribution. Probabilities are floored at the smallest normal double.
/// Throws InvalidExample when token count != step count.
double score_option(const trace::LayerTrace& trace, std::span<const std::uint32_t> token_ids,
                    const decode::DecodeConfig& cfg);

/// Metrics of one example from its option scores.
MCScores mc_scores(std::span<const double> option_scores, const std::vector<bool>& labels);

MCReport mc_metrics(const std::vector<MCExample>& examples, const decode::DecodeConfig& cfg,
                    unsigned threads = 1);

std::string normalize_answer(std::string_view text);
double exact_match(std::string_view prediction, std::string_view gold);
double token_f1(std::string_view prediction, std::string_view gold);
QAReport qa_metrics(const std::vector<QAExample>& examples);

/// KL(P_final || P_l) for every step and every captured non-final layer.
struct KlProfile {
  std::vector<std::uint16_t> layers;
  std::vector<std::vector<double>> kl;  // [step][layer position]
};
KlProfile layer_kl_profile(const trace::LayerTrace& trace, float fill = decode::kDefaultSparseFill);

/// P_l(token) for each requested token across all captured layers.
struct TokenTrajectory {
  std::uint64_t step = 0;
  std::vector<std::uint16_t> layers;
  std::vector<std::uint32_t> tokens;
  std::vector<std::vector<double>> probs;  // [token][layer position]
};
TokenTrajectory token_trajectory(const trace::LayerTrace& trace, std::uint64_t step,
                                 std::span<const std::uint32_t> token_ids,
                                 float fill = decode::kDefaultSparseFill);

/// Reference throughput of a full 7B model, greedy vs END (tokens/s).
inline constexpr double kReferenceGreedyTps = 39.41;
inline constexpr double kReferenceEndTps = 36.10;

struct ThroughputResult {
  std::string label;
  decode::Strategy strategy = decode::Strategy::greedy;
  std::uint64_t tokens = 0;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
  std::vector<double> per_repetition_tps;
  /// Coefficient of variation of per-repetition throughput.
  double relative_spread = 0.0;
};

struct ThroughputReport {
  std::vector<ThroughputResult> results;
  /// 1 - tps(end) / tps(greedy), when both strategies were measured.
  std::optional<double> end_overhead;
};

/// Times decode_sequence for each configuration on the same trace. One
/// untimed warm-up pass precedes the repetitions. Requires repetitions >= 1.
ThroughputReport throughput_bench(const trace::LayerTrace& trace,
                                  const std::vector<decode::DecodeConfig>& cfgs,
                                  std::uint32_t repetitions);

// --- fixtures and reports ----------------------------------------------------------

struct EvalFixture {
  std::vector<MCExample> mc;
  std::vector<QAExample> qa;
};

/// Loads a manifest (JSON, see docs/eval-fixtures.md); trace paths are
/// relative to the manifest's directory.
EvalFixture load_fixture(const std::string& manifest_path);

struct EvalReport {
  std::string config_echo;  // JSON object text
  std::optional<MCReport> mc;
  std::optional<QAReport> qa;
};

EvalReport evaluate(const EvalFixture& fixture, const decode::DecodeConfig& cfg, unsigned threads = 1);

/// JSON object text describing a decode configuration.
std::string config_json(const decode::DecodeConfig& cfg);

/// One JSON record per line: header (metric definitions + config), one per
/// example, then the aggregate.
void write_report_jsonl(const EvalReport& report, std::ostream& out);
/// Human-readable summary block.
void write_report_summary(const EvalReport& report, std::ostream& out);

}  // namespace endec::eval
