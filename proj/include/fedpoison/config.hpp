#pragma once

// Flat key=value configuration with dotted sections, e.g.
//
//   rounds=20
//   defense=cosine_filter
//   defense.lambda=1.5
//   grmp.vgae.epochs=100
//
// '#' starts a comment. Missing keys keep their defaults; unknown keys are an
// error listing every offender.

#include "fedpoison/common.hpp"
#include "fedpoison/sim.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace fedpoison {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] inline void type_error(const std::string& key, const char* expected, const std::string& got) {
  throw ConfigError(concat("config key '", key, "': expected ", expected, ", got '", got, "'"));
}

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
  Int v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) type_error(key, "integer", s);
  return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) type_error(key, "real number", s);
  return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct ConfigField {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

using FieldTable = std::vector<std::pair<std::string, ConfigField>>;

// Field builders over an accessor returning a (const or mutable) reference
// into the config.
template <class Int, class Access>
ConfigField int_ref(std::string key, Access access) {
  return {[key, access](ExperimentConfig& c, const std::string& s) { access(c) = parse_int<Int>(key, s); },
          [access](const ExperimentConfig& c) { return std::to_string(access(c)); }};
}

template <class Access>
ConfigField real_ref(std::string key, Access access) {
  return {[key, access](ExperimentConfig& c, const std::string& s) { access(c) = parse_double(key, s); },
          [access](const ExperimentConfig& c) { return format_double(access(c)); }};
}

template <class Access>
ConfigField string_ref(Access access) {
  return {[access](ExperimentConfig& c, const std::string& s) { access(c) = s; },
          [access](const ExperimentConfig& c) { return access(c); }};
}

inline const FieldTable& config_fields() {
  using C = ExperimentConfig;
  static const FieldTable table = [] {
    FieldTable t;
    auto add = [&t](const std::string& k, ConfigField f) { t.emplace_back(k, std::move(f)); };

    add("n_clients", int_ref<int>("n_clients", [](auto& c) -> auto& { return c.n_clients; }));
    add("n_attackers", int_ref<int>("n_attackers", [](auto& c) -> auto& { return c.n_attackers; }));
    add("rounds", int_ref<int>("rounds", [](auto& c) -> auto& { return c.rounds; }));
    add("local_epochs", int_ref<int>("local_epochs", [](auto& c) -> auto& { return c.local_epochs; }));
    add("lr", real_ref("lr", [](auto& c) -> auto& { return c.lr; }));
    add("batch_size", int_ref<int>("batch_size", [](auto& c) -> auto& { return c.batch_size; }));
    add("weight_decay", real_ref("weight_decay", [](auto& c) -> auto& { return c.weight_decay; }));
    add("seed", int_ref<std::uint64_t>("seed", [](auto& c) -> auto& { return c.seed; }));
    add("phase_switch_round", int_ref<int>("phase_switch_round", [](auto& c) -> auto& { return c.phase_switch_round; }));
    add("attack", {[](C& c, const std::string& s) {
                     const auto a = parse_attack(s);
                     if (!a) type_error("attack", "one of none|naive_flip|grmp", s);
                     c.attack = *a;
                   },
                   [](const C& c) { return to_string(c.attack); }});
    add("naive_scale", real_ref("naive_scale", [](auto& c) -> auto& { return c.naive_scale; }));
    add("attacker_noise", real_ref("attacker_noise", [](auto& c) -> auto& { return c.attacker_noise; }));

    add("defense", {[](C& c, const std::string& s) {
                      const auto d = parse_defense(s);
                      if (!d) type_error("defense", "a defense name", s);
                      c.defense.kind = *d;
                    },
                    [](const C& c) { return to_string(c.defense.kind); }});
    add("defense.f", int_ref<int>("defense.f", [](auto& c) -> auto& { return c.defense.f; }));
    add("defense.m", int_ref<int>("defense.m", [](auto& c) -> auto& { return c.defense.m; }));
    add("defense.beta", int_ref<int>("defense.beta", [](auto& c) -> auto& { return c.defense.beta; }));
    add("defense.lambda", real_ref("defense.lambda", [](auto& c) -> auto& { return c.defense.lambda; }));
    add("defense.gm_tol", real_ref("defense.gm_tol", [](auto& c) -> auto& { return c.defense.gm_tol; }));
    add("defense.gm_max_iter", int_ref<int>("defense.gm_max_iter", [](auto& c) -> auto& { return c.defense.gm_max_iter; }));

    add("data.source", string_ref([](auto& c) -> auto& { return c.data.source; }));
    add("data.train_path", string_ref([](auto& c) -> auto& { return c.data.train_path; }));
    add("data.test_path", string_ref([](auto& c) -> auto& { return c.data.test_path; }));
    add("data.alpha", real_ref("data.alpha", [](auto& c) -> auto& { return c.data.alpha; }));
    add("data.hash_dim", int_ref<std::size_t>("data.hash_dim", [](auto& c) -> auto& { return c.data.hash_dim; }));
    add("data.hash_seed", int_ref<std::uint64_t>("data.hash_seed", [](auto& c) -> auto& { return c.data.hash_seed; }));
    add("data.triggers", {[](C& c, const std::string& s) { c.data.triggers = split_list(s); },
                          [](const C& c) { return join_list(c.data.triggers); }});
    add("data.src_class", int_ref<int>("data.src_class", [](auto& c) -> auto& { return c.data.src_class; }));
    add("data.dst_class", int_ref<int>("data.dst_class", [](auto& c) -> auto& { return c.data.dst_class; }));
    add("data.synth.train_per_class",
        int_ref<int>("data.synth.train_per_class", [](auto& c) -> auto& { return c.data.synth.train_per_class; }));
    add("data.synth.test_per_class",
        int_ref<int>("data.synth.test_per_class", [](auto& c) -> auto& { return c.data.synth.test_per_class; }));
    add("data.synth.vocab_per_class",
        int_ref<int>("data.synth.vocab_per_class", [](auto& c) -> auto& { return c.data.synth.vocab_per_class; }));
    add("data.synth.noise_vocab", int_ref<int>("data.synth.noise_vocab", [](auto& c) -> auto& { return c.data.synth.noise_vocab; }));
    add("data.synth.tokens_per_example",
        int_ref<int>("data.synth.tokens_per_example", [](auto& c) -> auto& { return c.data.synth.tokens_per_example; }));
    add("data.synth.trigger_rate",
        real_ref("data.synth.trigger_rate", [](auto& c) -> auto& { return c.data.synth.trigger_rate; }));
    add("data.synth.trigger_tokens_min",
        int_ref<int>("data.synth.trigger_tokens_min", [](auto& c) -> auto& { return c.data.synth.trigger_tokens_min; }));
    add("data.synth.trigger_tokens_max",
        int_ref<int>("data.synth.trigger_tokens_max", [](auto& c) -> auto& { return c.data.synth.trigger_tokens_max; }));
    add("data.synth.own_class_prob",
        real_ref("data.synth.own_class_prob", [](auto& c) -> auto& { return c.data.synth.own_class_prob; }));
    add("data.synth.cross_class_prob",
        real_ref("data.synth.cross_class_prob", [](auto& c) -> auto& { return c.data.synth.cross_class_prob; }));

    add("grmp.tau_edge", real_ref("grmp.tau_edge", [](auto& c) -> auto& { return c.grmp.tau_edge; }));
    add("grmp.stealth_floor", {[](C& c, const std::string& s) {
                                 if (s == "auto") c.grmp.stealth_floor.reset();
                                 else c.grmp.stealth_floor = parse_double("grmp.stealth_floor", s);
                               },
                               [](const C& c) {
                                 return c.grmp.stealth_floor ? format_double(*c.grmp.stealth_floor) : std::string("auto");
                               }});
    add("grmp.stealth_margin", real_ref("grmp.stealth_margin", [](auto& c) -> auto& { return c.grmp.stealth_margin; }));
    add("grmp.gamma_blend", real_ref("grmp.gamma_blend", [](auto& c) -> auto& { return c.grmp.gamma_blend; }));
    add("grmp.dual_steps", int_ref<int>("grmp.dual_steps", [](auto& c) -> auto& { return c.grmp.dual_steps; }));
    add("grmp.step_size", real_ref("grmp.step_size", [](auto& c) -> auto& { return c.grmp.step_size; }));
    add("grmp.history_window", int_ref<int>("grmp.history_window", [](auto& c) -> auto& { return c.grmp.history_window; }));
    add("grmp.knowledge", {[](C& c, const std::string& s) {
                             const auto k = parse_knowledge(s);
                             if (!k) type_error("grmp.knowledge", "one of full|own_plus_global", s);
                             c.grmp.knowledge = *k;
                           },
                           [](const C& c) { return to_string(c.grmp.knowledge); }});
    add("grmp.vgae.hidden", int_ref<Index>("grmp.vgae.hidden", [](auto& c) -> auto& { return c.grmp.vgae.hidden; }));
    add("grmp.vgae.latent", int_ref<Index>("grmp.vgae.latent", [](auto& c) -> auto& { return c.grmp.vgae.latent; }));
    add("grmp.vgae.epochs", int_ref<int>("grmp.vgae.epochs", [](auto& c) -> auto& { return c.grmp.vgae.epochs; }));
    add("grmp.vgae.lr", real_ref("grmp.vgae.lr", [](auto& c) -> auto& { return c.grmp.vgae.lr; }));
    add("grmp.vgae.projection_dim",
        int_ref<Index>("grmp.vgae.projection_dim", [](auto& c) -> auto& { return c.grmp.vgae.projection_dim; }));
    add("grmp.vgae.row_norm", real_ref("grmp.vgae.row_norm", [](auto& c) -> auto& { return c.grmp.vgae.row_norm; }));
    return t;
  }();
  return table;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& [k, f] : config_fields())
    if (k == key) return &f;
  return nullptr;
}

}  // namespace detail

using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::config_fields()) keys.push_back(k);
  return keys;
}

// Applies key/value pairs in order without validating the result.
inline void apply_overrides(ExperimentConfig& cfg, const ConfigOverrides& kv) {
  std::vector<std::string> unknown;
  for (const auto& [k, v] : kv)
    if (!detail::find_field(k)) unknown.push_back(k);
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + detail::join_list(unknown));
  for (const auto& [k, v] : kv) detail::find_field(k)->set(cfg, v);
}

inline ConfigOverrides parse_config_pairs(std::istream& in) {
  ConfigOverrides kv;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(detail::concat("config line ", lineno, ": expected key=value"));
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(detail::concat("config line ", lineno, ": empty key"));
    if (!seen.insert(key).second) throw ConfigError("duplicate config key: " + key);
    kv.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

// Defaults, then the document's keys, then validation.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  apply_overrides(cfg, parse_config_pairs(in));
  validate(cfg);
  return cfg;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return parse_config(in);
}

// Fully resolved config, one key per line, reals printed with 17 significant digits.
inline std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + "=" + f.get(cfg) + "\n";
  return out;
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  for (const auto& [k, f] : detail::config_fields()) j[k] = f.get(cfg);
  return j;
}

}  // namespace fedpoison
