// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dvi/dvi.hpp"

namespace {

enum Exit : int { kOk = 0, kRuntime = 1, kConfig = 2, kCorrupt = 3, kInvariant = 4 };

struct Options {
  std::string config;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> k_spec;
  std::string checkpoint;
};

dvi::ConfigOverrides overrides(const Options& o) {
  dvi::ConfigOverrides ov;
  if (!o.mode.empty()) ov.mode = dvi::parse_train_mode(o.mode);
  ov.seed = o.seed;
  if (!o.out.empty()) ov.out_dir = o.out;
  ov.k_spec = o.k_spec;
  if (const char* env = std::getenv("DVI_OUT"); env && *env) ov.out_dir_fallback = env;
  return ov;
}

dvi::RunConfig resolve(const Options& o) {
  return o.config.empty() ? dvi::parse_config("", overrides(o)) : dvi::load_config(o.config, overrides(o));
}

void print_eval(const dvi::EvalReport& e) {
  const auto& m = e.metrics;
  std::cout << "mat " << m.mat << "\nmat_with_bonus " << m.mat_with_bonus << "\nacceptance " << m.batch_acceptance
            << "\nspeedup_proxy " << m.speedup_proxy << "\nwall_speedup " << e.wall_speedup() << '\n';
}

int cmd_train(const Options& o) {
  const dvi::RunConfig c = resolve(o);
  const dvi::RunOutcome r = dvi::train_and_eval(c);
  const auto trend = r.train.trend();
  std::cout << "updates " << r.train.updates << "\naudits " << r.train.audits << "\nacceptance " << trend.initial
            << " -> " << trend.final << '\n';
  print_eval(r.eval);
  std::cout << "out " << c.out_dir << '\n';
  return kOk;
}

int cmd_eval(const Options& o) {
  // Without --config the run is rebuilt from the config the checkpoint carries.
  const dvi::Checkpoint ck = dvi::load_checkpoint(o.checkpoint);
  const dvi::RunConfig c =
      o.config.empty() ? dvi::parse_config(ck.config_echo, overrides(o), o.checkpoint) : resolve(o);
  dvi::DraftHead head = dvi::build_rig(c).drafter;
  dvi::apply_checkpoint(ck, head);
  const dvi::EvalReport e = dvi::run_eval(c, head);
  if (e.mismatches) throw dvi::InvariantViolation("held-out decode diverged from the greedy reference");
  dvi::write_eval_outputs(c.out_dir, c, nullptr, e);
  print_eval(e);
  return kOk;
}

int cmd_ablate(const Options& o) {
  const dvi::RunConfig c = resolve(o);
  const auto rows = dvi::run_ablation(c);
  std::cout << dvi::ablation_csv(rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online drafter training for self-speculative decoding on a toy transformer"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value config file");
    sub->add_option("--seed", o.seed, "global seed; re-derives every unpinned seed");
    sub->add_option("--out", o.out, "output directory (falls back to $DVI_OUT)");
    sub->add_option("--k-spec", o.k_spec, "draft length per speculative step");
  };
  auto* train = app.add_subcommand("train", "train the drafter online, then evaluate it");
  common(train);
  train->add_option("--mode", o.mode, "full_dvi | kl_only | pg_only | ce_only");
  auto* eval = app.add_subcommand("eval", "evaluate a frozen drafter checkpoint on held-out prompts");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint.dvi written by train")->required();
  auto* ablate = app.add_subcommand("ablate", "train and evaluate all four objectives on one rig");
  common(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    return cmd_ablate(o);
  } catch (const dvi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const dvi::CorruptCheckpoint& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << '\n';
    return kCorrupt;
  } catch (const dvi::InvariantViolation& e) {
    std::cerr << "invariant violated: " << e.what() << '\n';
    return kInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
