// SPDX-License-Identifier: Apache-2.0

#include "endec/decoder.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "endec/detail/parallel.hpp"
#include "endec/errors.hpp"

namespace endec::decode {

using trace::Encoding;
using trace::SparseEntry;
using trace::StepRecord;
using trace::TraceHeader;

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

/// Read-only view of one captured layer's logits within a step.
class RowView {
 public:
  RowView(const StepRecord& rec, const TraceHeader& header, std::size_t pos, float fill)
      : header_(header), fill_(fill) {
    if (header.encoding == Encoding::dense_f32) {
      dense_ = rec.dense_row(header, pos);
    } else {
      sparse_ = rec.sparse_row(header, pos);
    }
  }

  double logit(std::uint32_t token) const {
    if (header_.encoding == Encoding::dense_f32) return dense_[token];
    const auto it = std::lower_bound(sparse_.begin(), sparse_.end(), token,
                                     [](const SparseEntry& e, std::uint32_t t) { return e.token < t; });
    if (it != sparse_.end() && it->token == token) return it->logit;
    return fill_;
  }

  /// log sum_v exp(logit(v)) over the full vocabulary.
  double log_normalizer() const {
    if (header_.encoding == Encoding::dense_f32) return num::log_sum_exp(dense_);
    const double absent = static_cast<double>(header_.vocab_size) - static_cast<double>(sparse_.size());
    double shift = absent > 0 ? static_cast<double>(fill_) : -std::numeric_limits<double>::infinity();
    for (const SparseEntry& e : sparse_) shift = std::max(shift, static_cast<double>(e.logit));
    double s = absent > 0 ? absent * std::exp(static_cast<double>(fill_) - shift) : 0.0;
    for (const SparseEntry& e : sparse_) s += std::exp(static_cast<double>(e.logit) - shift);
    return shift + std::log(s);
  }

  num::ProbVector probs(const StepRecord& rec, std::size_t pos) const {
    if (header_.encoding == Encoding::dense_f32) return num::softmax(dense_);
    return num::softmax(std::span<const float>(trace::layer_logits(rec, header_, pos, fill_)));
  }

 private:
  const TraceHeader& header_;
  float fill_;
  std::span<const float> dense_;
  std::span<const SparseEntry> sparse_;
};

std::size_t position_or_throw(const TraceHeader& header, std::uint16_t layer) {
  const auto pos = header.position_of(layer);
  if (!pos) {
    throw LayerNotCaptured("layer " + std::to_string(layer) + " is not captured in this trace");
  }
  return *pos;
}

template <typename Vec>
std::uint32_t argmax_lowest(const Vec& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<std::uint32_t>(best);
}

num::ProbVector final_distribution(const StepRecord& rec, const TraceHeader& header, float fill) {
  const std::size_t pos = header.num_layers() - 1;
  return RowView(rec, header, pos, fill).probs(rec, pos);
}

// Fills q in place; false when the denominator is below epsilon.
bool normalize_cross_layer(std::vector<double>& p, double epsilon_denom) {
  double denom = 0.0;
  for (const double v : p) denom += v;
  if (!(denom >= epsilon_denom)) return false;
  for (double& v : p) v /= denom;
  return true;
}

double signed_entropy(std::span<const double> q, EntropySign sign) {
  const double h = num::entropy(q);
  return sign == EntropySign::standard ? h : -h;
}

void require_captured(const TraceHeader& header) {
  if (header.layer_indices.empty()) throw LayerNotCaptured("final layer is not captured");
}

StepDecision base_decision(Strategy strategy, const num::ProbVector& p_final) {
  StepDecision d;
  d.strategy = strategy;
  d.final_probs.assign(p_final.begin(), p_final.end());
  return d;
}

}  // namespace

// --- config ---------------------------------------------------------------------

void DecodeConfig::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw InvalidConfig("lambda must be a finite value >= 0, got " + fmt_double(lambda));
  }
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw InvalidConfig("alpha must be in (0, 1], got " + fmt_double(alpha));
  }
  if (!std::isfinite(epsilon_denom) || epsilon_denom <= 0.0) {
    throw InvalidConfig("epsilon_denom must be a finite value > 0, got " + fmt_double(epsilon_denom));
  }
  if (!std::isfinite(sparse_fill)) throw InvalidConfig("sparse_fill must be finite");
  std::visit(
      [](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ExplicitLayers>) {
          if (p.layers.empty()) throw InvalidConfig("explicit layer list is empty");
        } else if constexpr (std::is_same_v<P, BucketLayers>) {
          if (p.count == 0 || p.index >= p.count) {
            throw InvalidConfig("bucket index must be in [0, count) with count >= 1, got " +
                                std::to_string(p.index) + "/" + std::to_string(p.count));
          }
        } else {
          if (p.count == 0) throw InvalidConfig("dynamic bucket count must be >= 1");
        }
      },
      layer_policy);
}

std::optional<double> StepDecision::entropy_of(std::uint32_t token) const {
  const auto it = std::lower_bound(vhead.begin(), vhead.end(), token);
  if (it == vhead.end() || *it != token || entropies.empty()) return std::nullopt;
  return entropies[static_cast<std::size_t>(it - vhead.begin())];
}

// --- building blocks --------------------------------------------------------------

std::vector<num::ProbVector> layer_distributions(const StepRecord& record, const TraceHeader& header,
                                                 std::span<const std::uint16_t> layers, float fill) {
  std::vector<num::ProbVector> out;
  out.reserve(layers.size());
  for (const std::uint16_t layer : layers) {
    const std::size_t pos = position_or_throw(header, layer);
    out.push_back(RowView(record, header, pos, fill).probs(record, pos));
  }
  return out;
}

CrossLayerDistribution build_cross_layer_from(std::uint32_t token_id,
                                              std::span<const double> token_layer_probs,
                                              double epsilon_denom) {
  if (token_layer_probs.empty()) throw InvalidInput("cross-layer distribution needs at least one layer");
  std::vector<double> q(token_layer_probs.begin(), token_layer_probs.end());
  if (!normalize_cross_layer(q, epsilon_denom)) {
    throw DegenerateToken("token " + std::to_string(token_id) +
                          " has cross-layer mass below epsilon_denom");
  }
  return {token_id, num::ProbVector::unchecked(std::move(q))};
}

CrossLayerDistribution build_cross_layer(std::uint32_t token_id,
                                         std::span<const num::ProbVector> layer_probs,
                                         double epsilon_denom) {
  std::vector<double> p;
  p.reserve(layer_probs.size());
  for (const auto& lp : layer_probs) {
    if (token_id >= lp.size()) throw InvalidInput("token id " + std::to_string(token_id) + " out of range");
    p.push_back(lp[token_id]);
  }
  return build_cross_layer_from(token_id, p, epsilon_denom);
}

double cross_layer_entropy(const CrossLayerDistribution& d, EntropySign sign) {
  return signed_entropy(d.q.values(), sign);
}

double degenerate_entropy(std::size_t layer_count, EntropySign sign) {
  const double h = std::log(static_cast<double>(std::max<std::size_t>(layer_count, 1)));
  return sign == EntropySign::standard ? h : -h;
}

std::vector<std::uint32_t> vhead_filter(const num::ProbVector& final_probs, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw InvalidConfig("alpha must be in (0, 1], got " + fmt_double(alpha));
  }
  double max_p = 0.0;
  for (const double p : final_probs) max_p = std::max(max_p, p);
  const double threshold = alpha * max_p;
  std::vector<std::uint32_t> head;
  for (std::size_t v = 0; v < final_probs.size(); ++v) {
    if (final_probs[v] >= threshold) head.push_back(static_cast<std::uint32_t>(v));
  }
  return head;
}

std::pair<std::size_t, std::size_t> bucket_bounds(std::size_t n, std::uint32_t index,
                                                  std::uint32_t count) {
  if (count == 0 || index >= count) {
    throw InvalidConfig("bucket index " + std::to_string(index) + " out of range for " +
                        std::to_string(count) + " buckets");
  }
  auto edge = [&](std::size_t i) { return (i * n + count - 1) / count; };
  return {edge(index), edge(index + 1)};
}

LayerSet resolve_layer_set(const TraceHeader& header, const LayerSetPolicy& policy,
                           const StepRecord* record, bool include_final, float fill) {
  require_captured(header);
  const std::size_t non_final = header.num_layers() - 1;
  LayerSet out;
  if (const auto* ex = std::get_if<ExplicitLayers>(&policy)) {
    out = ex->layers;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    for (const std::uint16_t l : out) position_or_throw(header, l);
  } else if (const auto* b = std::get_if<BucketLayers>(&policy)) {
    const auto [lo, hi] = bucket_bounds(non_final, b->index, b->count);
    if (lo == hi) {
      throw InvalidConfig("bucket " + std::to_string(b->index) + "/" + std::to_string(b->count) +
                          " is empty with " + std::to_string(non_final) +
                          " captured non-final layer(s)");
    }
    out.assign(header.layer_indices.begin() + static_cast<std::ptrdiff_t>(lo),
               header.layer_indices.begin() + static_cast<std::ptrdiff_t>(hi));
  } else {
    const auto& dyn = std::get<DynamicBucket>(policy);
    if (dyn.count == 0) throw InvalidConfig("dynamic bucket count must be >= 1");
    if (record == nullptr) throw InvalidConfig("dynamic bucket selection needs a step record");
    const num::ProbVector p_final = final_distribution(*record, header, fill);
    std::optional<std::pair<std::size_t, std::size_t>> best;
    double best_score = -1.0;
    for (std::uint32_t i = 0; i < dyn.count; ++i) {
      const auto [lo, hi] = bucket_bounds(non_final, i, dyn.count);
      if (lo == hi) continue;
      double total = 0.0;
      for (std::size_t pos = lo; pos < hi; ++pos) {
        total += num::js_divergence(RowView(*record, header, pos, fill).probs(*record, pos), p_final);
      }
      const double mean = total / static_cast<double>(hi - lo);
      if (mean > best_score) {
        best_score = mean;
        best = {lo, hi};
      }
    }
    if (!best) throw InvalidConfig("no non-final layers captured for dynamic bucket selection");
    out.assign(header.layer_indices.begin() + static_cast<std::ptrdiff_t>(best->first),
               header.layer_indices.begin() + static_cast<std::ptrdiff_t>(best->second));
  }
  if (include_final && (out.empty() || out.back() != header.final_layer())) {
    out.push_back(header.final_layer());
  }
  if (out.empty()) throw InvalidConfig("layer set is empty after policy resolution");
  return out;
}

// --- strategies -------------------------------------------------------------------

StepDecision greedy_decide(const StepRecord& record, const TraceHeader& header, const DecodeConfig& cfg) {
  require_captured(header);
  const num::ProbVector p_final = final_distribution(record, header, cfg.sparse_fill);
  StepDecision d = base_decision(Strategy::greedy, p_final);
  d.vhead = vhead_filter(p_final, cfg.alpha);
  d.final_scores = d.final_probs;
  d.chosen_token = argmax_lowest(d.final_scores);
  return d;
}

StepDecision end_adjust(const StepRecord& record, const TraceHeader& header, const DecodeConfig& cfg) {
  require_captured(header);
  const num::ProbVector p_final = final_distribution(record, header, cfg.sparse_fill);
  StepDecision d = base_decision(Strategy::end, p_final);
  d.vhead = vhead_filter(p_final, cfg.alpha);
  d.layer_set = resolve_layer_set(header, cfg.layer_policy, &record, cfg.include_final, cfg.sparse_fill);

  std::vector<RowView> rows;
  std::vector<double> log_norm;
  rows.reserve(d.layer_set.size());
  for (const std::uint16_t layer : d.layer_set) {
    rows.emplace_back(record, header, position_or_throw(header, layer), cfg.sparse_fill);
    log_norm.push_back(rows.back().log_normalizer());
  }

  d.final_scores = d.final_probs;
  d.entropies.reserve(d.vhead.size());
  std::vector<double> q(rows.size());
  double head_mass = 0.0;
  double adjusted_mass = 0.0;
  for (const std::uint32_t v : d.vhead) {
    for (std::size_t i = 0; i < rows.size(); ++i) q[i] = std::exp(rows[i].logit(v) - log_norm[i]);
    const double h = normalize_cross_layer(q, cfg.epsilon_denom)
                         ? signed_entropy(q, cfg.entropy_sign)
                         : degenerate_entropy(rows.size(), cfg.entropy_sign);
    d.entropies.push_back(h);
    const double adjusted = std::exp(-cfg.lambda * h) * p_final[v];
    head_mass += p_final[v];
    adjusted_mass += adjusted;
    d.final_scores[v] = adjusted;
  }
  if (cfg.renormalize && adjusted_mass > 0.0) {
    const double scale = head_mass / adjusted_mass;
    for (const std::uint32_t v : d.vhead) d.final_scores[v] *= scale;
  }
  d.chosen_token = argmax_lowest(d.final_scores);
  return d;
}

StepDecision dola_contrast(const StepRecord& record, const TraceHeader& header,
                           std::span<const std::uint16_t> candidate_layers, const DecodeConfig& cfg) {
  require_captured(header);
  if (candidate_layers.empty()) throw InvalidConfig("dola needs at least one candidate layer");
  const std::size_t final_pos = header.num_layers() - 1;
  const RowView final_row(record, header, final_pos, cfg.sparse_fill);
  const num::ProbVector p_final = final_row.probs(record, final_pos);
  StepDecision d = base_decision(Strategy::dola, p_final);
  d.layer_set.assign(candidate_layers.begin(), candidate_layers.end());

  // Premature layer: largest JSD against the final layer, lowest index on ties.
  std::size_t best_pos = 0;
  std::uint16_t best_layer = 0;
  double best_jsd = -1.0;
  for (const std::uint16_t layer : candidate_layers) {
    const std::size_t pos = position_or_throw(header, layer);
    const double jsd =
        num::js_divergence(RowView(record, header, pos, cfg.sparse_fill).probs(record, pos), p_final);
    const bool tied = std::abs(jsd - best_jsd) <= kJsdTieTolerance;
    if ((!tied && jsd > best_jsd) || (tied && layer < best_layer)) {
      best_jsd = jsd;
      best_pos = pos;
      best_layer = layer;
    }
  }
  d.contrast_layer = best_layer;

  const RowView premature(record, header, best_pos, cfg.sparse_fill);
  const double final_norm = final_row.log_normalizer();
  const double premature_norm = premature.log_normalizer();
  d.vhead = vhead_filter(p_final, cfg.alpha);
  d.final_scores.assign(header.vocab_size, -std::numeric_limits<double>::infinity());
  std::uint32_t chosen = d.vhead.front();
  for (const std::uint32_t v : d.vhead) {
    const double score = (final_row.logit(v) - final_norm) - (premature.logit(v) - premature_norm);
    d.final_scores[v] = score;
    const double best = d.final_scores[chosen];
    if (score > best || (score == best && p_final[v] > p_final[chosen])) chosen = v;
  }
  d.chosen_token = chosen;
  return d;
}

StepDecision decide(const StepRecord& record, const TraceHeader& header, const DecodeConfig& cfg) {
  switch (cfg.strategy) {
    case Strategy::greedy: return greedy_decide(record, header, cfg);
    case Strategy::end: return end_adjust(record, header, cfg);
    case Strategy::dola: {
      const LayerSet candidates =
          resolve_layer_set(header, cfg.layer_policy, &record, cfg.include_final, cfg.sparse_fill);
      return dola_contrast(record, header, candidates, cfg);
    }
  }
  throw InvalidConfig("unknown strategy");
}

std::vector<StepDecision> decode_sequence(const trace::LayerTrace& trace, const DecodeConfig& cfg,
                                          unsigned threads) {
  cfg.validate();
  std::vector<StepDecision> out(trace.steps.size());
  detail::parallel_for(trace.steps.size(), threads, [&](std::size_t i) {
    try {
      out[i] = decide(trace.steps[i], trace.header, cfg);
      out[i].step = i;
    } catch (Error& e) {
      e.set_step(i);
      throw;
    }
  });
  return out;
}

// --- sampling ---------------------------------------------------------------------

std::vector<double> sampling_weights(const StepDecision& decision) {
  std::vector<double> w(decision.final_scores.size(), 0.0);
  if (decision.strategy != Strategy::dola) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::max(decision.final_scores[i], 0.0);
    return w;
  }
  double shift = -std::numeric_limits<double>::infinity();
  for (const std::uint32_t v : decision.vhead) shift = std::max(shift, decision.final_scores[v]);
  double total = 0.0;
  for (const std::uint32_t v : decision.vhead) {
    w[v] = std::exp(decision.final_scores[v] - shift);
    total += w[v];
  }
  for (double& x : w) x /= total;
  return w;
}

std::uint32_t sample_token(const StepDecision& decision, double temperature, double top_p,
                           std::mt19937_64& rng) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidConfig("temperature must be > 0, got " + fmt_double(temperature));
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidConfig("top_p must be in (0, 1], got " + fmt_double(top_p));
  const std::vector<double> w = sampling_weights(decision);

  std::vector<std::pair<double, std::uint32_t>> cand;  // (log weight / T, token)
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) cand.emplace_back(std::log(w[i]) / temperature, static_cast<std::uint32_t>(i));
  }
  if (cand.empty()) return decision.chosen_token;
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const double shift = cand.front().first;
  std::vector<double> p(cand.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) total += (p[i] = std::exp(cand[i].first - shift));
  std::size_t keep = 0;
  double cum = 0.0;
  while (keep < cand.size()) {
    cum += p[keep++] / total;
    if (cum >= top_p) break;
  }
  double kept_total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept_total += p[i];
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * kept_total;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += p[i];
    if (u < acc) return cand[i].second;
  }
  return cand[keep - 1].second;
}

// --- names ------------------------------------------------------------------------

const char* to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::end: return "end";
    case Strategy::dola: return "dola";
  }
  return "?";
}

const char* to_string(EntropySign s) noexcept {
  return s == EntropySign::standard ? "standard" : "literal";
}

std::optional<Strategy> parse_strategy(std::string_view text) noexcept {
  if (text == "greedy") return Strategy::greedy;
  if (text == "end") return Strategy::end;
  if (text == "dola") return Strategy::dola;
  return std::nullopt;
}

std::optional<EntropySign> parse_entropy_sign(std::string_view text) noexcept {
  if (text == "standard") return EntropySign::standard;
  if (text == "literal") return EntropySign::literal;
  return std::nullopt;
}

namespace {

std::uint32_t parse_uint(std::string_view s, std::string_view whole) {
  std::uint32_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
    throw InvalidConfig("invalid layer spec '" + std::string(whole) +
                        "' (expected \"16,20,24\", \"bucket:I/K\" or \"dynamic[:K]\")");
  }
  return v;
}

}  // namespace

LayerSetPolicy parse_layer_policy(std::string_view text) {
  if (text.starts_with("bucket:")) {
    const std::string_view rest = text.substr(7);
    const auto slash = rest.find('/');
    if (slash == std::string_view::npos) parse_uint("", text);
    BucketLayers b{parse_uint(rest.substr(0, slash), text), parse_uint(rest.substr(slash + 1), text)};
    if (b.count == 0 || b.index >= b.count) {
      throw InvalidConfig("bucket index must be in [0, K) for --layers bucket:I/K, got '" +
                          std::string(text) + "'");
    }
    return b;
  }
  if (text == "dynamic") return DynamicBucket{};
  if (text.starts_with("dynamic:")) {
    const std::uint32_t k = parse_uint(text.substr(8), text);
    if (k == 0) throw InvalidConfig("dynamic bucket count must be >= 1");
    return DynamicBucket{k};
  }
  ExplicitLayers ex;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string_view item = text.substr(start, comma == std::string_view::npos ? text.size() - start
                                                                                    : comma - start);
    const std::uint32_t v = parse_uint(item, text);
    if (v > 0xFFFFu) throw InvalidConfig("layer index out of range in '" + std::string(text) + "'");
    ex.layers.push_back(static_cast<std::uint16_t>(v));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return ex;
}

std::string describe(const LayerSetPolicy& policy) {
  if (const auto* ex = std::get_if<ExplicitLayers>(&policy)) {
    std::string s;
    for (std::size_t i = 0; i < ex->layers.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(ex->layers[i]);
    }
    return s;
  }
  if (const auto* b = std::get_if<BucketLayers>(&policy)) {
    return "bucket:" + std::to_string(b->index) + "/" + std::to_string(b->count);
  }
  return "dynamic:" + std::to_string(std::get<DynamicBucket>(policy).count);
}

}  // namespace endec::decode
