// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `section.key = value` run configuration. Unknown keys are errors, and
// the echo lists every effective parameter so a run can be replayed from it.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dvi/backbone.hpp"
#include "dvi/corpus.hpp"
#include "dvi/error.hpp"
#include "dvi/heads.hpp"
#include "dvi/metrics.hpp"
#include "dvi/replay_buffer.hpp"
#include "dvi/spec_engine.hpp"
#include "dvi/trainer.hpp"

namespace dvi {

struct EvalConfig {
  std::size_t n_prompts = 100;
  /// Timing passes over the eval stream; the fastest pass is reported.
  std::size_t timing_repeats = 3;
};

struct RunConfig {
  BackboneConfig backbone;
  HeadConfig head;
  SpecConfig spec;
  TrainerConfig trainer;
  BufferConfig buffer;
  CorpusConfig corpus;
  EvalConfig eval;
  CostModel cost;
  std::string out_dir = "runs/default";
  std::uint64_t global_seed = 7;
  std::size_t max_updates = 2000;   // 0: until the prompt stream is exhausted
  std::size_t train_every = 1;      // speculative steps per update
  std::size_t audit_every = 100;    // updates between losslessness audits; 0 disables

  void validate() const {
    backbone.validate();
    head.validate(backbone.vocab, backbone.width);
    spec.validate();
    trainer.validate();
    buffer.validate();
    corpus.validate();
    cost.validate();
    if (train_every < 1) throw ConfigError("run.train_every must be >= 1");
    if (spec.eos >= 0 && static_cast<std::size_t>(spec.eos) >= backbone.vocab)
      throw ConfigError("spec.eos must be a vocabulary id or negative");
    if (corpus.prompt_len + corpus.gen_len + 2 * spec.k_spec + 2 > backbone.max_ctx)
      throw ConfigError("corpus.prompt_len + corpus.gen_len leave no room for speculation within backbone.max_ctx");
    if (eval.n_prompts < 1) throw ConfigError("eval.n_prompts must be >= 1");
    if (eval.timing_repeats < 1) throw ConfigError("eval.timing_repeats must be >= 1");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class Field {
 public:
  using Setter = std::function<void(const std::string&)>;
  using Getter = std::function<std::string()>;
  Field(Setter set, Getter get) : set_(std::move(set)), get_(std::move(get)) {}
  void set(const std::string& v) const { set_(v); }
  std::string get() const { return get_(); }

 private:
  Setter set_;
  Getter get_;
};

template <typename T>
T parse_number(const std::string& s) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("not a valid number: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

}  // namespace detail

/// Seeds that follow run.seed unless the file pins them.
struct SeedPins {
  bool backbone = false, head = false, corpus = false, trainer = false, sample = false;
};

class ConfigSchema {
 public:
  explicit ConfigSchema(RunConfig& c) {
    using detail::Field;
    auto sz = [](std::size_t& r) {
      return Field([&r](const std::string& v) { r = detail::parse_number<std::size_t>(v); },
                   [&r] { return std::to_string(r); });
    };
    auto u64 = [](std::uint64_t& r) {
      return Field([&r](const std::string& v) { r = detail::parse_number<std::uint64_t>(v); },
                   [&r] { return std::to_string(r); });
    };
    auto dbl = [](double& r) {
      return Field([&r](const std::string& v) { r = detail::parse_number<double>(v); },
                   [&r] { return detail::format_double(r); });
    };
    auto boolean = [](bool& r) {
      return Field([&r](const std::string& v) { r = detail::parse_bool(v); },
                   [&r] { return std::string(r ? "true" : "false"); });
    };
    auto str = [](std::string& r) {
      return Field([&r](const std::string& v) { r = v; }, [&r] { return r; });
    };

    add("run.seed", u64(c.global_seed));
    add("run.out_dir", str(c.out_dir));
    add("run.max_updates", sz(c.max_updates));
    add("run.train_every", sz(c.train_every));
    add("run.audit_every", sz(c.audit_every));

    add("backbone.layers", sz(c.backbone.layers));
    add("backbone.split", sz(c.backbone.split));
    add("backbone.width", sz(c.backbone.width));
    add("backbone.vocab", sz(c.backbone.vocab));
    add("backbone.heads", sz(c.backbone.heads));
    add("backbone.max_ctx", sz(c.backbone.max_ctx));
    add("backbone.seed", u64(c.backbone.seed), &SeedPins::backbone);
    add("backbone.residual_gain", dbl(c.backbone.residual_gain));
    add("backbone.attn_gain", dbl(c.backbone.attn_gain));

    add("head.rank", sz(c.head.rank));
    add("head.gamma", dbl(c.head.gamma));
    add("head.b_init_scale", dbl(c.head.b_init_scale));
    add("head.verifier_scale", dbl(c.head.verifier_scale));
    add("head.center_verifier", boolean(c.head.center_verifier));
    add("head.seed", u64(c.head.seed), &SeedPins::head);

    add("spec.k_spec", sz(c.spec.k_spec));
    add("spec.draft_mode",
        Field(
            [&c](const std::string& v) {
              if (v == "greedy") c.spec.draft_mode = DraftMode::greedy;
              else if (v == "sample") c.spec.draft_mode = DraftMode::sample;
              else throw ConfigError("spec.draft_mode must be greedy or sample");
            },
            [&c] { return std::string(c.spec.draft_mode == DraftMode::greedy ? "greedy" : "sample"); }));
    add("spec.bonus_on_full_accept", boolean(c.spec.bonus_on_full_accept));
    add("spec.sample_seed", u64(c.spec.sample_seed), &SeedPins::sample);
    add("spec.eos",
        Field([&c](const std::string& v) { c.spec.eos = detail::parse_number<Token>(v); },
              [&c] { return std::to_string(c.spec.eos); }));

    auto& t = c.trainer;
    add("trainer.mode", Field([&t](const std::string& v) { t.mode = parse_train_mode(v); },
                              [&t] { return std::string(to_string(t.mode)); }));
    add("trainer.lambda_0", dbl(t.lambda_0));
    add("trainer.lambda_pg_max", dbl(t.lambda_pg_max));
    add("trainer.lambda_kl_min", dbl(t.lambda_kl_min));
    add("trainer.t_warmup", sz(t.t_warmup));
    add("trainer.t_ramp", sz(t.t_ramp));
    add("trainer.w_ce", dbl(t.w_ce));
    add("trainer.w_ent", dbl(t.w_ent));
    add("trainer.w_rl", dbl(t.w_rl));
    add("trainer.tau", dbl(t.tau));
    add("trainer.beta_0", dbl(t.beta_0));
    add("trainer.beta_decay", dbl(t.beta_decay));
    add("trainer.ema_decay", dbl(t.ema_decay));
    add("trainer.learning_rate", dbl(t.learning_rate));
    add("trainer.momentum", dbl(t.momentum));
    add("trainer.seed", u64(t.seed), &SeedPins::trainer);

    add("buffer.capacity", sz(c.buffer.capacity));
    add("buffer.minibatch_size", sz(c.buffer.minibatch_size));
    add("buffer.fresh_window", sz(c.buffer.fresh_window));

    add("corpus.kind", Field([&c](const std::string& v) { c.corpus.kind = parse_corpus_kind(v); },
                             [&c] { return std::string(to_string(c.corpus.kind)); }));
    add("corpus.order", sz(c.corpus.order));
    add("corpus.n_prompts", sz(c.corpus.n_prompts));
    add("corpus.prompt_len", sz(c.corpus.prompt_len));
    add("corpus.gen_len", sz(c.corpus.gen_len));
    add("corpus.seed", u64(c.corpus.seed), &SeedPins::corpus);

    add("eval.n_prompts", sz(c.eval.n_prompts));
    add("eval.timing_repeats", sz(c.eval.timing_repeats));

    add("cost.c_shallow", dbl(c.cost.c_shallow));
    add("cost.c_deep", dbl(c.cost.c_deep));
    add("cost.c_head", dbl(c.cost.c_head));
  }

  bool has(const std::string& key) const { return index_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) const { fields_[index_.at(key)].second.set(value); }

  std::string echo() const {
    std::ostringstream os;
    for (const auto& [k, f] : fields_) os << k << " = " << f.get() << '\n';
    return os.str();
  }

  void pin(const std::string& key, SeedPins& pins) const {
    auto it = seed_pins_.find(key);
    if (it != seed_pins_.end()) pins.*(it->second) = true;
  }

 private:
  void add(std::string key, detail::Field f, bool SeedPins::*pin = nullptr) {
    index_[key] = fields_.size();
    if (pin) seed_pins_[key] = pin;
    fields_.emplace_back(std::move(key), std::move(f));
  }

  std::vector<std::pair<std::string, detail::Field>> fields_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, bool SeedPins::*> seed_pins_;
};

/// Fills seeds and the split-derived cost model that were not given explicitly.
inline void resolve_derived(RunConfig& c, const SeedPins& pins, const std::set<std::string>& given) {
  if (!pins.backbone) c.backbone.seed = c.global_seed;
  if (!pins.head) c.head.seed = c.global_seed + 1000;
  if (!pins.corpus) c.corpus.seed = c.global_seed + 2000;
  if (!pins.trainer) c.trainer.seed = c.global_seed + 3000;
  if (!pins.sample) c.spec.sample_seed = c.global_seed + 4000;
  const CostModel d = CostModel::from_split(c.backbone, c.cost.c_head);
  if (!given.count("cost.c_shallow")) c.cost.c_shallow = d.c_shallow;
  if (!given.count("cost.c_deep")) c.cost.c_deep = d.c_deep;
}

struct ConfigOverrides {
  std::optional<TrainMode> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> k_spec;
  /// Used for run.out_dir only when neither the file nor out_dir sets it.
  std::optional<std::string> out_dir_fallback;
};

/// Parses config text, applies overrides, derives unpinned values, validates.
inline RunConfig parse_config(std::string_view text, const ConfigOverrides& ov = {},
                              const std::string& source = "<config>") {
  RunConfig c;
  ConfigSchema schema(c);
  SeedPins pins;
  std::set<std::string> given;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (!schema.has(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (given.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      schema.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + key + ": " + e.what());
    }
    given.insert(key);
    schema.pin(key, pins);
  }
  if (ov.mode) c.trainer.mode = *ov.mode;
  if (ov.seed) {
    c.global_seed = *ov.seed;
    pins = {};
  }
  if (ov.out_dir) c.out_dir = *ov.out_dir;
  else if (ov.out_dir_fallback && !given.count("run.out_dir")) c.out_dir = *ov.out_dir_fallback;
  if (ov.k_spec) c.spec.k_spec = *ov.k_spec;
  resolve_derived(c, pins, given);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path, const ConfigOverrides& ov = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), ov, path);
}

/// Fully resolved `key = value` listing of every parameter.
inline std::string echo_config(const RunConfig& c) {
  RunConfig copy = c;
  return ConfigSchema(copy).echo();
}

/// Echo without run.out_dir, so a checkpoint does not depend on where it
/// was written.
inline std::string checkpoint_echo(const RunConfig& c) {
  std::istringstream in(echo_config(c));
  std::string line, out;
  while (std::getline(in, line))
    if (!line.starts_with("run.out_dir ")) out += line + '\n';
  return out;
}

}  // namespace dvi
