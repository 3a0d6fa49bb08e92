// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

#include <json.hpp>

#include "endec/errors.hpp"
#include "endec/synthtrace.hpp"

namespace endec::synth {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw InvalidSpec(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw InvalidSpec(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if constexpr (std::is_integral_v<T>) {
    // json's get<> narrows silently; reject negatives and overflow instead.
    const bool ok = v.is_number_unsigned()
                        ? v.get<std::uint64_t>() <= std::numeric_limits<T>::max()
                        : v.is_number_integer() && v.get<std::int64_t>() >= 0 &&
                              static_cast<std::uint64_t>(v.get<std::int64_t>()) <= std::numeric_limits<T>::max();
    if (!ok) {
      throw InvalidSpec(where + ": field '" + key + "' must be an integer in [0, " +
                        std::to_string(std::numeric_limits<T>::max()) + "]");
    }
  }
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw InvalidSpec(where + ": field '" + key + "' has the wrong type");
  }
}

TokenKind parse_kind(const std::string& s, const std::string& where) {
  if (s == "factual_sharp") return TokenKind::factual_sharp;
  if (s == "easy_flat") return TokenKind::easy_flat;
  if (s == "distractor") return TokenKind::distractor;
  throw InvalidSpec(where + ": unknown kind '" + s + "'");
}

std::vector<TokenProfile> parse_profiles(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw InvalidSpec(where + " must be an array");
  std::vector<TokenProfile> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string w = where + "[" + std::to_string(i) + "]";
    const json& p = arr[i];
    check_keys(p, {"token_id", "kind", "base_logit", "growth_onset_layer", "growth_magnitude", "noise_seed"}, w);
    if (!p.contains("token_id") || !p.contains("kind")) throw InvalidSpec(w + ": token_id and kind are required");
    TokenProfile tp;
    tp.token_id = get_or<std::uint32_t>(p, "token_id", 0, w);
    tp.kind = parse_kind(get_or<std::string>(p, "kind", "", w), w);
    tp.base_logit = get_or<double>(p, "base_logit", 0.0, w);
    tp.growth_onset_layer = get_or<double>(p, "growth_onset_layer", 0.5, w);
    tp.growth_magnitude = get_or<double>(p, "growth_magnitude", 0.0, w);
    tp.noise_seed = get_or<std::uint64_t>(p, "noise_seed", 0, w);
    out.push_back(tp);
  }
  return out;
}

json profiles_to_json(const std::vector<TokenProfile>& profiles) {
  json arr = json::array();
  for (const auto& p : profiles) {
    arr.push_back({{"token_id", p.token_id},
                   {"kind", to_string(p.kind)},
                   {"base_logit", p.base_logit},
                   {"growth_onset_layer", p.growth_onset_layer},
                   {"growth_magnitude", p.growth_magnitude},
                   {"noise_seed", p.noise_seed}});
  }
  return arr;
}

}  // namespace

ScenarioSpec parse_scenario(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InvalidSpec(std::string("scenario is not valid JSON: ") + e.what());
  }
  check_keys(doc, {"vocab_size", "num_layers", "seed", "noise_sigma", "tokenizer_id", "profiles", "steps"},
             "scenario");
  if (!doc.contains("vocab_size") || !doc.contains("num_layers")) {
    throw InvalidSpec("scenario: vocab_size and num_layers are required");
  }
  ScenarioSpec spec;
  spec.vocab_size = get_or<std::uint32_t>(doc, "vocab_size", 0, "scenario");
  spec.num_layers = get_or<std::uint16_t>(doc, "num_layers", 0, "scenario");
  spec.seed = get_or<std::uint64_t>(doc, "seed", 0, "scenario");
  spec.noise_sigma = get_or<double>(doc, "noise_sigma", kDefaultNoiseSigma, "scenario");
  spec.tokenizer_id = get_or<std::string>(doc, "tokenizer_id", "synthetic", "scenario");
  if (doc.contains("profiles")) spec.profiles = parse_profiles(doc["profiles"], "profiles");
  if (doc.contains("steps")) {
    const json& steps = doc["steps"];
    if (!steps.is_array()) throw InvalidSpec("steps must be an array");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const std::string w = "steps[" + std::to_string(i) + "]";
      check_keys(steps[i], {"label", "profiles"}, w);
      StepOverride o;
      o.label = get_or<std::string>(steps[i], "label", "", w);
      if (steps[i].contains("profiles")) o.profiles = parse_profiles(steps[i]["profiles"], w + ".profiles");
      spec.steps.push_back(std::move(o));
    }
  }
  spec.validate();
  return spec;
}

ScenarioSpec load_scenario(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open scenario '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_scenario(ss.str());
}

std::string scenario_to_json(const ScenarioSpec& spec) {
  json doc = {{"vocab_size", spec.vocab_size},
              {"num_layers", spec.num_layers},
              {"seed", spec.seed},
              {"noise_sigma", spec.noise_sigma},
              {"tokenizer_id", spec.tokenizer_id},
              {"profiles", profiles_to_json(spec.profiles)}};
  json steps = json::array();
  for (const auto& s : spec.steps) steps.push_back({{"label", s.label}, {"profiles", profiles_to_json(s.profiles)}});
  doc["steps"] = steps;
  return doc.dump(2);
}

}  // namespace endec::synth
