// SPDX-License-Identifier: Apache-2.0

#include "endec/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "endec/decoder.hpp"
#include "endec/detail/parallel.hpp"
#include "endec/errors.hpp"
#include "endec/evalharness.hpp"
#include "endec/synthtrace.hpp"
#include "endec/traceio.hpp"

namespace endec::cli {

namespace {

using nlohmann::json;

/// Flag validation failure; maps to the usage exit code.
struct UsageError {
  std::string message;
};

struct Options {
  std::string trace_path;
  std::string positional_trace;
  std::string method = "end";
  double lambda = decode::kDefaultLambda;
  double alpha = decode::kDefaultAlpha;
  std::string layers = "bucket:3/4";
  std::string entropy_sign = "standard";
  bool renormalize = false;
  bool include_final = false;
  std::string output;
  std::string format = "jsonl";
  std::optional<std::uint64_t> seed;

  unsigned threads = 1;
  bool sample = false;
  double temperature = 1.0;
  double top_p = 1.0;

  std::optional<std::uint64_t> step;
  std::string tokens;
  bool even_layers = false;

  std::string manifest;
  std::uint32_t repetitions = 3;
  std::string scenario;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

decode::DecodeConfig build_config(const Options& o) {
  decode::DecodeConfig cfg;
  const auto strategy = decode::parse_strategy(o.method);
  if (!strategy) throw UsageError{"--method must be one of greedy|end|dola, got '" + o.method + "'"};
  cfg.strategy = *strategy;
  const auto sign = decode::parse_entropy_sign(o.entropy_sign);
  if (!sign) throw UsageError{"--entropy-sign must be standard|literal, got '" + o.entropy_sign + "'"};
  cfg.entropy_sign = *sign;
  if (!(o.alpha > 0.0 && o.alpha <= 1.0)) {
    throw UsageError{"--alpha must be in the range (0, 1], got " + fmt(o.alpha, 4)};
  }
  if (!std::isfinite(o.lambda) || o.lambda < 0.0) {
    throw UsageError{"--lambda must be a finite value >= 0, got " + fmt(o.lambda, 4)};
  }
  cfg.alpha = o.alpha;
  cfg.lambda = o.lambda;
  cfg.renormalize = o.renormalize;
  cfg.include_final = o.include_final;
  try {
    cfg.layer_policy = decode::parse_layer_policy(o.layers);
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError{"--layers: " + e.message()};
  }
  if (o.format != "jsonl" && o.format != "summary") {
    throw UsageError{"--format must be jsonl|summary, got '" + o.format + "'"};
  }
  return cfg;
}

std::string trace_path(const Options& o) {
  if (!o.trace_path.empty() && !o.positional_trace.empty() && o.trace_path != o.positional_trace) {
    throw UsageError{"trace given both positionally and with --trace"};
  }
  std::string p = o.trace_path.empty() ? o.positional_trace : o.trace_path;
  if (p.empty()) throw UsageError{"a trace file is required (--trace PATH)"};
  return p;
}

std::vector<std::uint32_t> parse_token_list(const std::string& text) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v > 0xFFFFFFFFul) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw UsageError{"--tokens expects a comma-separated list of token ids, got '" + text + "'"};
    }
  }
  if (out.empty()) throw UsageError{"--tokens is empty"};
  return out;
}

std::ifstream open_trace(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return f;
}

// --- subcommands ------------------------------------------------------------------

void cmd_decode(const Options& o, std::ostream& out) {
  const decode::DecodeConfig cfg = build_config(o);
  if (o.sample && !(o.temperature > 0.0)) throw UsageError{"--temperature must be > 0"};
  if (o.sample && !(o.top_p > 0.0 && o.top_p <= 1.0)) throw UsageError{"--top-p must be in (0, 1]"};
  const std::string path = trace_path(o);
  std::ifstream file = open_trace(path);
  trace::TraceReader reader(file);
  const auto& header = reader.header();
  std::mt19937_64 rng(o.seed.value_or(0));
  const bool summary = o.format == "summary";
  if (summary) {
    out << "method " << decode::to_string(cfg.strategy) << "  lambda " << cfg.lambda << "  alpha " << cfg.alpha
        << "  layers " << decode::describe(cfg.layer_policy) << '\n';
    out << std::setw(6) << "step" << std::setw(9) << "token" << std::setw(14) << "score" << std::setw(12) << "P_N"
        << std::setw(12) << "entropy" << std::setw(8) << "|head|" << '\n';
  }

  // Steps are decided in parallel batches and written in order.
  const std::size_t batch = std::max<std::size_t>(1, static_cast<std::size_t>(o.threads) * 8);
  std::vector<trace::StepRecord> records;
  std::vector<decode::StepDecision> decisions;
  std::uint64_t ordinal = 0;
  bool done = false;
  while (!done) {
    records.clear();
    while (records.size() < batch) {
      auto rec = reader.next();
      if (!rec) {
        done = true;
        break;
      }
      records.push_back(std::move(*rec));
    }
    decisions.assign(records.size(), {});
    detail::parallel_for(records.size(), o.threads, [&](std::size_t i) {
      try {
        decisions[i] = decode::decide(records[i], header, cfg);
        decisions[i].step = ordinal + i;
      } catch (Error& e) {
        e.set_step(ordinal + i);
        throw;
      }
    });
    for (std::size_t i = 0; i < decisions.size(); ++i) {
      const auto& d = decisions[i];
      const auto h = d.entropy_of(d.chosen_token);
      if (summary) {
        out << std::setw(6) << d.step << std::setw(9) << d.chosen_token << std::setw(14) << fmt(d.chosen_score())
            << std::setw(12) << fmt(d.final_probs[d.chosen_token]) << std::setw(12) << (h ? fmt(*h) : "-")
            << std::setw(8) << d.vhead.size() << '\n';
        continue;
      }
      json rec = {{"step", d.step},
                  {"step_index", records[i].step_index},
                  {"method", decode::to_string(d.strategy)},
                  {"token", d.chosen_token},
                  {"score", d.chosen_score()},
                  {"p_final", d.final_probs[d.chosen_token]},
                  {"entropy", h ? json(*h) : json(nullptr)},
                  {"vhead_size", d.vhead.size()}};
      if (d.contrast_layer) rec["contrast_layer"] = *d.contrast_layer;
      if (o.sample) rec["sampled"] = decode::sample_token(d, o.temperature, o.top_p, rng);
      out << rec.dump() << '\n';
    }
    ordinal += records.size();
  }
}

void cmd_analyze(const Options& o, std::ostream& out) {
  if (o.format != "jsonl" && o.format != "summary") {
    throw UsageError{"--format must be jsonl|summary, got '" + o.format + "'"};
  }
  const std::string path = trace_path(o);
  const bool summary = o.format == "summary";
  const std::optional<std::vector<std::uint32_t>> tokens =
      o.tokens.empty() ? std::nullopt : std::optional(parse_token_list(o.tokens));
  if (tokens && !o.step) throw UsageError{"--tokens requires --step"};
  const trace::LayerTrace t = trace::read_trace_file(path);

  if (tokens) {
    const auto traj = eval::token_trajectory(t, *o.step, *tokens);
    if (!summary) {
      for (std::size_t i = 0; i < traj.tokens.size(); ++i) {
        out << json{{"step", traj.step}, {"token", traj.tokens[i]}, {"layers", traj.layers}, {"probs", traj.probs[i]}}
                   .dump()
            << '\n';
      }
      return;
    }
    out << "P_l(token) at step " << traj.step << '\n' << std::setw(7) << "layer";
    for (const auto tok : traj.tokens) out << std::setw(11) << tok;
    out << '\n';
    for (std::size_t pos = 0; pos < traj.layers.size(); ++pos) {
      if (o.even_layers && traj.layers[pos] % 2 != 0 && pos + 1 != traj.layers.size()) continue;
      out << std::setw(7) << traj.layers[pos];
      for (std::size_t i = 0; i < traj.tokens.size(); ++i) out << std::setw(11) << fmt(traj.probs[i][pos], 6);
      out << '\n';
    }
    return;
  }

  const auto profile = eval::layer_kl_profile(t);
  if (!summary) {
    for (std::size_t s = 0; s < profile.kl.size(); ++s) {
      out << json{{"step", s}, {"layers", profile.layers}, {"kl", profile.kl[s]}}.dump() << '\n';
    }
    return;
  }
  out << "KL(P_final || P_layer); rows: layer, columns: step\n" << std::setw(7) << "layer";
  for (std::size_t s = 0; s < profile.kl.size(); ++s) out << std::setw(9) << s;
  out << '\n';
  for (std::size_t pos = 0; pos < profile.layers.size(); ++pos) {
    if (o.even_layers && profile.layers[pos] % 2 != 0) continue;
    out << std::setw(7) << profile.layers[pos];
    for (const auto& row : profile.kl) out << std::setw(9) << fmt(row[pos], 3);
    out << '\n';
  }
}

void cmd_eval(const Options& o, std::ostream& out) {
  const decode::DecodeConfig cfg = build_config(o);
  if (o.manifest.empty()) throw UsageError{"eval requires --manifest PATH"};
  const eval::EvalFixture fixture = eval::load_fixture(o.manifest);
  const eval::EvalReport report = eval::evaluate(fixture, cfg, o.threads);
  if (o.format == "summary") {
    eval::write_report_summary(report, out);
  } else {
    eval::write_report_jsonl(report, out);
  }
}

void cmd_bench(const Options& o, std::ostream& out) {
  const decode::DecodeConfig base = build_config(o);
  if (o.repetitions == 0) throw UsageError{"--repetitions must be >= 1"};
  const trace::LayerTrace t = trace::read_trace_file(trace_path(o));
  std::vector<decode::DecodeConfig> cfgs;
  for (const auto s : {decode::Strategy::greedy, decode::Strategy::end, decode::Strategy::dola}) {
    decode::DecodeConfig c = base;
    c.strategy = s;
    cfgs.push_back(c);
  }
  const auto report = eval::throughput_bench(t, cfgs, o.repetitions);
  const double ref_overhead = 1.0 - eval::kReferenceEndTps / eval::kReferenceGreedyTps;
  if (o.format == "summary") {
    out << "decision throughput over " << t.steps.size() << " steps x " << o.repetitions << " repetitions\n";
    out << std::setw(8) << "method" << std::setw(16) << "tokens/s" << std::setw(12) << "spread" << '\n';
    for (const auto& r : report.results) {
      out << std::setw(8) << r.label << std::setw(16) << fmt(r.tokens_per_second, 1) << std::setw(11)
          << fmt(100.0 * r.relative_spread, 1) << "%\n";
    }
    if (report.end_overhead) out << "END overhead vs greedy: " << fmt(100.0 * *report.end_overhead, 2) << "%\n";
    out << "reference (full 7B model, end-to-end): greedy " << fmt(eval::kReferenceGreedyTps, 2) << " tok/s, END "
        << fmt(eval::kReferenceEndTps, 2) << " tok/s, overhead " << fmt(100.0 * ref_overhead, 2) << "%\n";
    return;
  }
  for (const auto& r : report.results) {
    out << json{{"record", "throughput"},
                {"method", r.label},
                {"tokens", r.tokens},
                {"seconds", r.seconds},
                {"tokens_per_second", r.tokens_per_second},
                {"relative_spread", r.relative_spread}}
               .dump()
        << '\n';
  }
  json summary = {{"record", "overhead"},
                  {"reference_greedy_tps", eval::kReferenceGreedyTps},
                  {"reference_end_tps", eval::kReferenceEndTps},
                  {"reference_overhead", ref_overhead}};
  summary["end_overhead"] = report.end_overhead ? json(*report.end_overhead) : json(nullptr);
  out << summary.dump() << '\n';
}

void cmd_trace_gen(const Options& o) {
  if (o.scenario.empty()) throw UsageError{"trace-gen requires --scenario PATH"};
  if (o.output.empty()) throw UsageError{"trace-gen requires --output PATH"};
  synth::ScenarioSpec spec = synth::load_scenario(o.scenario);
  if (o.seed) spec.seed = *o.seed;
  trace::write_trace_file(synth::generate(spec), o.output);
}

void cmd_inspect(const Options& o, std::ostream& out) {
  if (o.format != "jsonl" && o.format != "summary") {
    throw UsageError{"--format must be jsonl|summary, got '" + o.format + "'"};
  }
  const std::string path = trace_path(o);
  std::ifstream file = open_trace(path);
  trace::TraceReader reader(file);
  const auto& h = reader.header();
  if (o.format == "summary") {
    out << "magic: LLTRACE1\n"
        << "version: " << h.version << '\n'
        << "encoding: " << trace::to_string(h.encoding) << '\n'
        << "vocab_size: " << h.vocab_size << '\n'
        << "num_layers: " << h.num_layers() << '\n'
        << "layer_indices:";
    for (const auto l : h.layer_indices) out << ' ' << l;
    out << '\n'
        << "final_layer: " << h.final_layer() << '\n'
        << "topk: " << h.topk << '\n'
        << "tokenizer_id: " << h.tokenizer_id << '\n'
        << "step_count: " << h.step_count << '\n';
    return;
  }
  out << json{{"magic", "LLTRACE1"},
              {"version", h.version},
              {"encoding", trace::to_string(h.encoding)},
              {"vocab_size", h.vocab_size},
              {"num_layers", h.num_layers()},
              {"layer_indices", h.layer_indices},
              {"final_layer", h.final_layer()},
              {"topk", h.topk},
              {"tokenizer_id", h.tokenizer_id},
              {"step_count", h.step_count}}
             .dump()
      << '\n';
}

void add_trace_positional(CLI::App* sub, Options& o) {
  sub->add_option("trace_file", o.positional_trace, "Trace file (same as --trace)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Layer-logit trace decoding and analysis", "endec"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_option("--trace", o.trace_path, "Input trace file (LLTRACE1)");
  app.add_option("--method", o.method, "Decoding strategy: greedy|end|dola")->capture_default_str();
  app.add_option("--lambda", o.lambda, "Entropy adjustment coefficient (>= 0)")->capture_default_str();
  app.add_option("--alpha", o.alpha, "Head filter threshold in (0, 1]")->capture_default_str();
  app.add_option("--layers", o.layers, "Layer set: \"16,20,24\" | \"bucket:I/K\" | \"dynamic[:K]\"")
      ->capture_default_str();
  app.add_option("--entropy-sign", o.entropy_sign, "standard|literal")->capture_default_str();
  app.add_option("--renormalize", o.renormalize, "Rescale adjusted head scores to the head's mass")
      ->capture_default_str();
  app.add_flag("--include-final", o.include_final, "Add the final layer to the layer set");
  app.add_option("--output", o.output, "Write output here instead of stdout");
  app.add_option("--format", o.format, "jsonl|summary")->capture_default_str();
  app.add_option("--seed", o.seed, "Seed for sampling / scenario generation");

  auto* decode_cmd = app.add_subcommand("decode", "Emit one decision per trace step");
  add_trace_positional(decode_cmd, o);
  decode_cmd->add_option("--threads", o.threads, "Worker threads")->check(CLI::Range(1u, 1024u));
  decode_cmd->add_flag("--sample", o.sample, "Also sample a token from the adjusted distribution");
  decode_cmd->add_option("--temperature", o.temperature, "Sampling temperature");
  decode_cmd->add_option("--top-p", o.top_p, "Nucleus sampling mass");

  auto* analyze_cmd = app.add_subcommand("analyze", "Per-layer KL profile or token trajectories");
  add_trace_positional(analyze_cmd, o);
  analyze_cmd->add_option("--step", o.step, "Step for token trajectories");
  analyze_cmd->add_option("--tokens", o.tokens, "Comma-separated token ids for trajectories");
  analyze_cmd->add_flag("--even-layers", o.even_layers, "Summary tables show even-numbered layers only");

  auto* eval_cmd = app.add_subcommand("eval", "Score MC and QA fixtures");
  eval_cmd->add_option("--manifest", o.manifest, "Fixture manifest (JSON)");
  eval_cmd->add_option("--threads", o.threads, "Worker threads")->check(CLI::Range(1u, 1024u));

  auto* bench_cmd = app.add_subcommand("bench", "Decision throughput of greedy, END and DoLa");
  add_trace_positional(bench_cmd, o);
  bench_cmd->add_option("--repetitions", o.repetitions, "Timed repetitions per method")->capture_default_str();

  auto* gen_cmd = app.add_subcommand("trace-gen", "Generate a synthetic trace from a scenario file");
  gen_cmd->add_option("--scenario", o.scenario, "Scenario file (JSON)");

  auto* inspect_cmd = app.add_subcommand("inspect", "Print a trace header");
  add_trace_positional(inspect_cmd, o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << " (run with --help for usage)\n";
    return kExitUsage;
  }

  std::ofstream file_out;
  std::ostream* sink = &out;
  const bool writes_stream = !gen_cmd->parsed();
  std::string context = o.trace_path.empty() ? o.positional_trace : o.trace_path;
  try {
    // Validate every flag before touching the output file.
    if (decode_cmd->parsed() || eval_cmd->parsed() || bench_cmd->parsed()) build_config(o);
    if (o.format != "jsonl" && o.format != "summary") {
      throw UsageError{"--format must be jsonl|summary, got '" + o.format + "'"};
    }
    if (writes_stream && !o.output.empty()) {
      file_out.open(o.output, std::ios::trunc);
      if (!file_out) throw IoError("cannot open '" + o.output + "' for writing");
      sink = &file_out;
    }
    if (decode_cmd->parsed()) cmd_decode(o, *sink);
    if (analyze_cmd->parsed()) cmd_analyze(o, *sink);
    if (eval_cmd->parsed()) {
      context = o.manifest;
      cmd_eval(o, *sink);
    }
    if (bench_cmd->parsed()) cmd_bench(o, *sink);
    if (gen_cmd->parsed()) {
      context = o.scenario;
      cmd_trace_gen(o);
    }
    if (inspect_cmd->parsed()) cmd_inspect(o, *sink);
    sink->flush();
  } catch (const UsageError& e) {
    err << "error: " << e.message << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << (context.empty() ? "" : context + ": ") << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace endec::cli
