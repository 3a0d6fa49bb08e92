// SPDX-License-Identifier: Apache-2.0

#include "endec/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "endec/detail/parallel.hpp"
#include "endec/errors.hpp"
#include "endec/numkernels.hpp"

namespace endec::eval {

using decode::DecodeConfig;
using decode::StepDecision;
using decode::Strategy;
using nlohmann::json;

// --- scoring ------------------------------------------------------------------------

void MCExample::validate() const {
  const std::string where = "example '" + question_id + "'";
  if (option_traces.size() < 2) throw InvalidExample(where + ": needs at least 2 options");
  if (labels.size() != option_traces.size() || option_token_ids.size() != option_traces.size()) {
    throw InvalidExample(where + ": options, labels and token lists differ in length");
  }
  if (std::none_of(labels.begin(), labels.end(), [](bool b) { return b; })) {
    throw InvalidExample(where + ": needs at least one true option");
  }
}

std::vector<double> scoring_distribution(const StepDecision& d) {
  switch (d.strategy) {
    case Strategy::greedy:
      return d.final_probs;
    case Strategy::end: {
      std::vector<double> p = d.final_scores;
      double head_mass = 0.0;
      double adjusted = 0.0;
      for (const std::uint32_t v : d.vhead) {
        head_mass += d.final_probs[v];
        adjusted += d.final_scores[v];
      }
      if (adjusted > 0.0) {
        for (const std::uint32_t v : d.vhead) p[v] *= head_mass / adjusted;
      }
      return p;
    }
    case Strategy::dola: {
      std::vector<double> p = d.final_probs;
      double head_mass = 0.0;
      double shift = -std::numeric_limits<double>::infinity();
      for (const std::uint32_t v : d.vhead) {
        head_mass += d.final_probs[v];
        shift = std::max(shift, d.final_scores[v]);
      }
      double z = 0.0;
      for (const std::uint32_t v : d.vhead) z += std::exp(d.final_scores[v] - shift);
      for (const std::uint32_t v : d.vhead) p[v] = head_mass * std::exp(d.final_scores[v] - shift) / z;
      return p;
    }
  }
  return d.final_probs;
}

double score_option(const trace::LayerTrace& trace, std::span<const std::uint32_t> token_ids,
                    const DecodeConfig& cfg) {
  if (token_ids.size() != trace.steps.size()) {
    throw InvalidExample("option has " + std::to_string(token_ids.size()) + " tokens but its trace has " +
                         std::to_string(trace.steps.size()) + " steps");
  }
  cfg.validate();
  double total = 0.0;
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (token_ids[t] >= trace.header.vocab_size) {
      throw InvalidExample("token id " + std::to_string(token_ids[t]) + " out of vocabulary", t);
    }
    StepDecision d;
    try {
      d = decode::decide(trace.steps[t], trace.header, cfg);
    } catch (Error& e) {
      e.set_step(t);
      throw;
    }
    const double p = scoring_distribution(d)[token_ids[t]];
    total += std::log(std::max(p, std::numeric_limits<double>::min()));
  }
  return total;
}

MCScores mc_scores(std::span<const double> s, const std::vector<bool>& labels) {
  MCScores out;
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] > s[best]) best = i;
  }
  out.mc1 = labels[best] ? 1.0 : 0.0;

  const double shift = *std::max_element(s.begin(), s.end());
  double true_mass = 0.0;
  double all_mass = 0.0;
  double max_false = -std::numeric_limits<double>::infinity();
  std::size_t n_true = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double w = std::exp(s[i] - shift);
    all_mass += w;
    if (labels[i]) {
      true_mass += w;
      ++n_true;
    } else {
      max_false = std::max(max_false, s[i]);
    }
  }
  out.mc2 = true_mass / all_mass;
  std::size_t above = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (labels[i] && s[i] > max_false) ++above;
  }
  out.mc3 = static_cast<double>(above) / static_cast<double>(n_true);
  return out;
}

MCReport mc_metrics(const std::vector<MCExample>& examples, const DecodeConfig& cfg, unsigned threads) {
  for (const auto& ex : examples) ex.validate();
  MCReport report;
  report.examples.resize(examples.size());
  detail::parallel_for(examples.size(), threads, [&](std::size_t i) {
    const MCExample& ex = examples[i];
    MCExampleResult& r = report.examples[i];
    r.question_id = ex.question_id;
    r.labels = ex.labels;
    for (std::size_t o = 0; o < ex.option_traces.size(); ++o) {
      try {
        r.option_scores.push_back(score_option(ex.option_traces[o], ex.option_token_ids[o], cfg));
      } catch (Error& e) {
        e.add_context("question '" + ex.question_id + "' option " + std::to_string(o));
        throw;
      }
    }
    r.scores = mc_scores(r.option_scores, r.labels);
  });
  if (!examples.empty()) {
    for (const auto& r : report.examples) {
      report.mean.mc1 += r.scores.mc1;
      report.mean.mc2 += r.scores.mc2;
      report.mean.mc3 += r.scores.mc3;
    }
    const double n = static_cast<double>(examples.size());
    report.mean.mc1 /= n;
    report.mean.mc2 /= n;
    report.mean.mc3 /= n;
  }
  return report;
}

// --- QA -----------------------------------------------------------------------------

namespace {

std::vector<std::string> answer_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is(normalize_answer(text));
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (const char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 128 && std::ispunct(u)) continue;
    cleaned.push_back(u < 128 ? static_cast<char>(std::tolower(u)) : c);
  }
  std::istringstream is(cleaned);
  std::string out;
  for (std::string w; is >> w;) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

double token_f1(std::string_view prediction, std::string_view gold) {
  const auto pred = answer_tokens(prediction);
  const auto ref = answer_tokens(gold);
  if (pred.empty() || ref.empty()) return pred == ref ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : ref) ++counts[w];
  int common = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(common) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

QAReport qa_metrics(const std::vector<QAExample>& examples) {
  QAReport report;
  for (const auto& ex : examples) {
    if (ex.gold_answers.empty()) {
      throw InvalidExample("QA example '" + ex.question_id + "' has no gold answers");
    }
    QAExampleResult r;
    r.question_id = ex.question_id;
    for (const auto& g : ex.gold_answers) {
      r.exact_match = std::max(r.exact_match, exact_match(ex.prediction, g));
      r.f1 = std::max(r.f1, token_f1(ex.prediction, g));
    }
    report.exact_match += r.exact_match;
    report.f1 += r.f1;
    report.examples.push_back(std::move(r));
  }
  if (!examples.empty()) {
    report.exact_match /= static_cast<double>(examples.size());
    report.f1 /= static_cast<double>(examples.size());
  }
  return report;
}

// --- diagnostics --------------------------------------------------------------------

KlProfile layer_kl_profile(const trace::LayerTrace& trace, float fill) {
  const auto& h = trace.header;
  if (h.layer_indices.empty()) throw LayerNotCaptured("final layer is not captured");
  KlProfile out;
  out.layers.assign(h.layer_indices.begin(), h.layer_indices.end() - 1);
  const std::size_t final_pos = h.num_layers() - 1;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& rec = trace.steps[t];
    const auto p_final = num::softmax(std::span<const float>(trace::layer_logits(rec, h, final_pos, fill)));
    std::vector<double> row;
    row.reserve(out.layers.size());
    for (std::size_t pos = 0; pos < final_pos; ++pos) {
      const auto p_l = num::softmax(std::span<const float>(trace::layer_logits(rec, h, pos, fill)));
      row.push_back(num::kl_divergence(p_final, p_l));
    }
    out.kl.push_back(std::move(row));
  }
  return out;
}

TokenTrajectory token_trajectory(const trace::LayerTrace& trace, std::uint64_t step,
                                 std::span<const std::uint32_t> token_ids, float fill) {
  const auto& h = trace.header;
  if (step >= trace.steps.size()) {
    throw InvalidInput("step " + std::to_string(step) + " out of range (trace has " +
                       std::to_string(trace.steps.size()) + " steps)");
  }
  for (const std::uint32_t t : token_ids) {
    if (t >= h.vocab_size) {
      throw InvalidInput("token id " + std::to_string(t) + " >= vocab_size " + std::to_string(h.vocab_size));
    }
  }
  TokenTrajectory out;
  out.step = step;
  out.layers = h.layer_indices;
  out.tokens.assign(token_ids.begin(), token_ids.end());
  out.probs.assign(token_ids.size(), std::vector<double>(h.num_layers()));
  const auto& rec = trace.steps[step];
  for (std::size_t pos = 0; pos < h.num_layers(); ++pos) {
    const auto p = num::softmax(std::span<const float>(trace::layer_logits(rec, h, pos, fill)));
    for (std::size_t i = 0; i < token_ids.size(); ++i) out.probs[i][pos] = p[token_ids[i]];
  }
  return out;
}

// --- throughput ---------------------------------------------------------------------

ThroughputReport throughput_bench(const trace::LayerTrace& trace, const std::vector<DecodeConfig>& cfgs,
                                  std::uint32_t repetitions) {
  if (repetitions == 0) throw InvalidInput("repetitions must be >= 1");
  using clock = std::chrono::steady_clock;
  ThroughputReport report;
  volatile std::uint64_t sink = 0;
  for (const DecodeConfig& cfg : cfgs) {
    cfg.validate();
    ThroughputResult r;
    r.strategy = cfg.strategy;
    r.label = decode::to_string(cfg.strategy);
    for (const auto& d : decode::decode_sequence(trace, cfg)) sink = sink + d.chosen_token;
    for (std::uint32_t rep = 0; rep < repetitions; ++rep) {
      const auto start = clock::now();
      for (const auto& d : decode::decode_sequence(trace, cfg)) sink = sink + d.chosen_token;
      const double secs = std::chrono::duration<double>(clock::now() - start).count();
      r.seconds += secs;
      r.per_repetition_tps.push_back(secs > 0.0 ? static_cast<double>(trace.steps.size()) / secs : 0.0);
    }
    r.tokens = static_cast<std::uint64_t>(trace.steps.size()) * repetitions;
    r.tokens_per_second = r.seconds > 0.0 ? static_cast<double>(r.tokens) / r.seconds : 0.0;
    const double mean = std::accumulate(r.per_repetition_tps.begin(), r.per_repetition_tps.end(), 0.0) /
                        static_cast<double>(repetitions);
    double var = 0.0;
    for (const double x : r.per_repetition_tps) var += (x - mean) * (x - mean);
    var /= static_cast<double>(repetitions);
    r.relative_spread = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    report.results.push_back(std::move(r));
  }
  auto find = [&](Strategy s) -> const ThroughputResult* {
    for (const auto& r : report.results) {
      if (r.strategy == s) return &r;
    }
    return nullptr;
  };
  const auto* greedy = find(Strategy::greedy);
  const auto* end = find(Strategy::end);
  if (greedy && end && greedy->tokens_per_second > 0.0) {
    report.end_overhead = 1.0 - end->tokens_per_second / greedy->tokens_per_second;
  }
  return report;
}

// --- fixtures -----------------------------------------------------------------------

EvalFixture load_fixture(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError("cannot open manifest '" + manifest_path + "'");
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw InvalidExample(std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  EvalFixture out;
  try {
    if (doc.contains("mc")) {
      for (const auto& q : doc.at("mc")) {
        MCExample ex;
        ex.question_id = q.at("question_id").get<std::string>();
        for (const auto& opt : q.at("options")) {
          const auto rel = opt.at("trace").get<std::string>();
          try {
            ex.option_traces.push_back(trace::read_trace_file((base / rel).string()));
          } catch (Error& e) {
            throw InvalidExample("question '" + ex.question_id + "', trace '" + rel + "': " + e.what());
          }
          std::vector<std::uint32_t> ids;
          for (const auto& t : opt.at("token_ids")) {
            // get<uint32_t> would wrap negatives and large values.
            const bool ok = t.is_number_unsigned() ? t.get<std::uint64_t>() <= 0xFFFFFFFFull
                                                   : t.is_number_integer() && t.get<std::int64_t>() >= 0;
            if (!ok) {
              throw InvalidExample("question '" + ex.question_id + "': token id " + t.dump() +
                                   " is not a u32");
            }
            ids.push_back(t.get<std::uint32_t>());
          }
          ex.option_token_ids.push_back(std::move(ids));
          ex.labels.push_back(opt.at("label").get<bool>());
        }
        ex.validate();
        out.mc.push_back(std::move(ex));
      }
    }
    if (doc.contains("qa")) {
      for (const auto& q : doc.at("qa")) {
        QAExample ex;
        ex.question_id = q.at("question_id").get<std::string>();
        ex.prediction = q.at("prediction").get<std::string>();
        ex.gold_answers = q.at("gold_answers").get<std::vector<std::string>>();
        if (ex.gold_answers.empty()) throw InvalidExample("QA example '" + ex.question_id + "' has no gold answers");
        out.qa.push_back(std::move(ex));
      }
    }
  } catch (const json::exception& e) {
    throw InvalidExample(std::string("malformed manifest: ") + e.what());
  }
  return out;
}

EvalReport evaluate(const EvalFixture& fixture, const DecodeConfig& cfg, unsigned threads) {
  EvalReport r;
  r.config_echo = config_json(cfg);
  if (!fixture.mc.empty()) r.mc = mc_metrics(fixture.mc, cfg, threads);
  if (!fixture.qa.empty()) r.qa = qa_metrics(fixture.qa);
  return r;
}

std::string config_json(const DecodeConfig& cfg) {
  json j = {{"method", decode::to_string(cfg.strategy)},
            {"lambda", cfg.lambda},
            {"alpha", cfg.alpha},
            {"layers", decode::describe(cfg.layer_policy)},
            {"entropy_sign", decode::to_string(cfg.entropy_sign)},
            {"renormalize", cfg.renormalize},
            {"include_final", cfg.include_final},
            {"epsilon_denom", cfg.epsilon_denom},
            {"sparse_fill", cfg.sparse_fill}};
  return j.dump();
}

namespace {

constexpr const char* kMc1Def = "1 if the top-scored option is true (ties: lowest option index)";
constexpr const char* kMc2Def = "sum_true exp(s) / sum_all exp(s), s = option log-score";
constexpr const char* kMc3Def = "fraction of true options scored strictly above every false option";
constexpr const char* kEmDef = "max over gold answers of normalized string equality";
constexpr const char* kF1Def = "max over gold answers of normalized token-overlap F1";

}  // namespace

void write_report_jsonl(const EvalReport& report, std::ostream& out) {
  json header = {{"record", "header"},
                 {"config", json::parse(report.config_echo)},
                 {"definitions",
                  {{"mc1", kMc1Def}, {"mc2", kMc2Def}, {"mc3", kMc3Def}, {"em", kEmDef}, {"f1", kF1Def}}}};
  out << header.dump() << '\n';
  if (report.mc) {
    for (const auto& r : report.mc->examples) {
      json rec = {{"record", "mc_example"},
                  {"question_id", r.question_id},
                  {"option_scores", r.option_scores},
                  {"labels", r.labels},
                  {"mc1", r.scores.mc1},
                  {"mc2", r.scores.mc2},
                  {"mc3", r.scores.mc3}};
      out << rec.dump() << '\n';
    }
  }
  if (report.qa) {
    for (const auto& r : report.qa->examples) {
      json rec = {{"record", "qa_example"}, {"question_id", r.question_id}, {"em", r.exact_match}, {"f1", r.f1}};
      out << rec.dump() << '\n';
    }
  }
  json summary = {{"record", "summary"}};
  if (report.mc) {
    summary["mc_examples"] = report.mc->examples.size();
    summary["mc1"] = report.mc->mean.mc1;
    summary["mc2"] = report.mc->mean.mc2;
    summary["mc3"] = report.mc->mean.mc3;
  }
  if (report.qa) {
    summary["qa_examples"] = report.qa->examples.size();
    summary["em"] = report.qa->exact_match;
    summary["f1"] = report.qa->f1;
  }
  out << summary.dump() << '\n';
}

void write_report_summary(const EvalReport& report, std::ostream& out) {
  auto pct = [](double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << 100.0 * v;
    return os.str();
  };
  out << "config: " << report.config_echo << '\n';
  out << "metric definitions:\n"
      << "  MC1: " << kMc1Def << '\n'
      << "  MC2: " << kMc2Def << '\n'
      << "  MC3: " << kMc3Def << '\n'
      << "  EM:  " << kEmDef << '\n'
      << "  F1:  " << kF1Def << '\n';
  if (report.mc) {
    out << "multiple choice (" << report.mc->examples.size() << " examples): MC1 " << pct(report.mc->mean.mc1)
        << "  MC2 " << pct(report.mc->mean.mc2) << "  MC3 " << pct(report.mc->mean.mc3) << '\n';
  }
  if (report.qa) {
    out << "qa (" << report.qa->examples.size() << " examples): EM " << pct(report.qa->exact_match) << "  F1 "
        << pct(report.qa->f1) << '\n';
  }
}

}  // namespace endec::eval
