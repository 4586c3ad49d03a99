// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end runs: the rig, the interleaved decode/train loop, frozen-drafter
// evaluation and the four-way ablation.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dvi/backbone.hpp"
#include "dvi/checkpoint.hpp"
#include "dvi/config.hpp"
#include "dvi/corpus.hpp"
#include "dvi/error.hpp"
#include "dvi/heads.hpp"
#include "dvi/metrics.hpp"
#include "dvi/replay_buffer.hpp"
#include "dvi/spec_engine.hpp"
#include "dvi/trainer.hpp"

namespace dvi {

/// Prompt streams with disjoint seed keys.
enum class Stream : std::uint64_t { train = 0, eval = 1, audit = 2, calibration = 3 };

inline constexpr std::size_t kTrendWindow = 200;
inline constexpr std::size_t kAuditPrompts = 4;
inline constexpr std::size_t kCalibrationPrompts = 64;

/// Frozen backbone and verifier plus the trainable drafter.
struct Rig {
  BackboneWeights backbone;
  VerifierHead verifier;
  DraftHead drafter;

  ModelView view() const { return {backbone, verifier, drafter}; }
};

/// Mean final hidden state over a calibration stream, read once per prompt
/// through the full model.
inline Vector mean_final_state(const BackboneWeights& w, const PromptStream& stream) {
  Vector mean(w.config.width, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    for (const HiddenState& h : full_forward(w, stream.prompt(i))) {
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += h.vector[j];
      ++n;
    }
  }
  for (double& x : mean) x /= static_cast<double>(n);
  return mean;
}

inline Rig build_rig(const RunConfig& c) {
  Rig rig{init_backbone(c.backbone), {}, {}};
  rig.verifier = init_verifier(c.backbone, c.head);
  if (c.head.center_verifier) {
    const PromptStream cal(c.corpus, c.backbone.vocab, static_cast<std::uint64_t>(Stream::calibration),
                           kCalibrationPrompts);
    project_out(rig.verifier, mean_final_state(rig.backbone, cal));
  }
  rig.drafter = init_draft_head(rig.verifier, c.head);
  return rig;
}

inline std::uint64_t prompt_sample_seed(const RunConfig& c, Stream s, std::size_t i) {
  return mix_keys(mix_keys(c.spec.sample_seed, static_cast<std::uint64_t>(s)), i);
}

/// Decodes `prompt` speculatively and checks it token for token against the
/// full-model greedy reference. Returns the number of mismatching prompts (0/1).
inline std::size_t check_lossless(const Rig& rig, const SpecConfig& spec, std::span<const Token> prompt,
                                  std::size_t gen_len, std::uint64_t sample_seed) {
  DecodeState st(rig.backbone, prompt, sample_seed);
  speculative_decode(rig.view(), st, spec, gen_len);
  const auto out = st.generated();
  const auto ref = greedy_ar_reference(rig.backbone, rig.verifier, prompt, out.size(), spec.eos);
  return std::equal(out.begin(), out.end(), ref.begin(), ref.end()) ? 0 : 1;
}

namespace detail {

inline std::string csv_double(double v) { return format_double(v); }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + p.string() + "'");
  f << text;
}

}  // namespace detail

inline double window_mean(std::span<const double> xs, std::size_t begin, std::size_t len) {
  if (len == 0 || begin + len > xs.size()) throw Error("window exceeds trajectory");
  double s = 0.0;
  for (std::size_t i = begin; i < begin + len; ++i) s += xs[i];
  return s / static_cast<double>(len);
}

struct TrendSummary {
  double initial = 0.0;
  double final = 0.0;
  double delta() const { return final - initial; }
};

/// First- and last-window means of a batch-acceptance trajectory; the window
/// shrinks to half the trajectory when it is short.
inline TrendSummary acceptance_trend(std::span<const double> xs, std::size_t window = kTrendWindow) {
  if (xs.empty()) return {};
  const std::size_t w = std::max<std::size_t>(1, std::min(window, xs.size() / 2));
  return {window_mean(xs, 0, w), window_mean(xs, xs.size() - w, w)};
}

struct TrainReport {
  std::size_t updates = 0;
  std::size_t spec_steps = 0;
  std::size_t prompts_used = 0;
  std::size_t audits = 0;
  std::size_t audited_prompts = 0;
  std::vector<double> acceptance;  // batch acceptance per update
  DecodeMetrics train_metrics;
  DraftHead drafter;
  std::uint64_t backbone_checksum = 0;
  std::uint64_t verifier_checksum = 0;

  TrendSummary trend() const { return acceptance_trend(acceptance); }
};

/// Called after every update with the rig as it stands after that update.
using UpdateObserver = std::function<void(const UpdateReport&, const Rig&)>;

inline constexpr const char* kTrainLogHeader =
    "step,lambda_pg,lambda_kl,beta,loss_total,loss_pg,loss_kl,loss_ce,entropy,loss_policy,baseline_b,batch_acceptance\n";

inline std::string train_log_row(const UpdateReport& r) {
  using detail::csv_double;
  std::string s = std::to_string(r.t);
  for (double v : {r.lambda_pg, r.lambda_kl, r.beta, r.loss_total, r.loss_pg, r.loss_kl, r.loss_ce, r.entropy,
                   r.loss_policy, r.baseline_b, r.batch_acceptance}) {
    s += ',';
    s += csv_double(v);
  }
  s += '\n';
  return s;
}

/// Runs the audit prompts against the current drafter; throws on mismatch.
inline void audit_lossless(const Rig& rig, const RunConfig& c, std::size_t audit_index) {
  const PromptStream audit(c.corpus, c.backbone.vocab, static_cast<std::uint64_t>(Stream::audit),
                           (audit_index + 1) * kAuditPrompts);
  for (std::size_t j = 0; j < kAuditPrompts; ++j) {
    const std::size_t i = audit_index * kAuditPrompts + j;
    if (check_lossless(rig, c.spec, audit.prompt(i), c.corpus.gen_len, prompt_sample_seed(c, Stream::audit, i)))
      throw InvariantViolation("speculative output diverged from the greedy reference at audit " +
                               std::to_string(audit_index));
  }
}

/// Single pass over the training stream, updating the drafter after every
/// `train_every` speculative steps, until the stream or `max_updates` runs
/// out. Writes train_log.csv, checkpoint.dvi and config.cfg to `out_dir` when
/// it is nonempty.
inline TrainReport run_training(const RunConfig& c, const UpdateObserver& observer = {},
                                std::optional<std::filesystem::path> out_dir = std::nullopt) {
  c.validate();
  Rig rig = build_rig(c);
  TrainReport rep;
  rep.backbone_checksum = checksum(rig.backbone);
  rep.verifier_checksum = checksum(rig.verifier);

  const PromptStream stream(c.corpus, c.backbone.vocab, static_cast<std::uint64_t>(Stream::train));
  ReplayBuffer buffer(c.buffer, c.spec.k_spec);
  Trainer trainer(c.trainer, c.buffer.minibatch_size);
  MetricsAccumulator acc(c.spec.k_spec);
  std::ostringstream log;
  log << kTrainLogHeader;

  std::uint64_t step = 0;
  auto budget_left = [&] { return c.max_updates == 0 || trainer.t() < c.max_updates; };
  for (std::size_t p = 0; p < stream.size() && budget_left(); ++p) {
    ++rep.prompts_used;
    DecodeState st(rig.backbone, stream.prompt(p), prompt_sample_seed(c, Stream::train, p));
    while (!st.finished() && st.generated().size() < c.corpus.gen_len && budget_left()) {
      const SpecStepResult r = spec_step(rig.view(), st, c.spec, step);
      acc.add(r);
      buffer.push(r.tuples);
      if ((step + 1) % c.train_every == 0) {
        const UpdateReport u = trainer.train_step(rig.drafter, buffer, step);
        rep.acceptance.push_back(u.batch_acceptance);
        log << train_log_row(u);
        if (observer) observer(u, rig);
        if (c.audit_every && trainer.t() % c.audit_every == 0) {
          audit_lossless(rig, c, rep.audits);
          ++rep.audits;
          rep.audited_prompts += kAuditPrompts;
        }
      }
      ++step;
    }
  }
  rep.updates = trainer.t();
  rep.spec_steps = step;
  rep.train_metrics = acc.finish(c.cost, c.spec);
  rep.drafter = rig.drafter;

  if (checksum(rig.backbone) != rep.backbone_checksum || checksum(rig.verifier) != rep.verifier_checksum)
    throw InvariantViolation("frozen weights changed during training");

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    detail::write_text(*out_dir / "train_log.csv", log.str());
    const std::string echo = echo_config(c);
    detail::write_text(*out_dir / "config.cfg", echo);
    save_checkpoint((*out_dir / "checkpoint.dvi").string(), rig.drafter, checkpoint_echo(c));
  }
  return rep;
}

struct EvalReport {
  DecodeMetrics metrics;
  std::size_t prompts = 0;
  std::size_t mismatches = 0;
  double spec_seconds = 0.0;
  double ar_seconds = 0.0;

  double wall_speedup() const { return spec_seconds > 0.0 ? ar_seconds / spec_seconds : 0.0; }
};

inline constexpr const char* kEvalHeader =
    "k_spec,prompts,spec_steps,tokens_emitted,mat,mat_with_bonus,batch_acceptance,speedup_proxy,mismatches\n";

inline std::string eval_csv(const EvalReport& e) {
  using detail::csv_double;
  const DecodeMetrics& m = e.metrics;
  std::ostringstream os;
  os << kEvalHeader << m.k_spec << ',' << e.prompts << ',' << m.spec_steps << ',' << m.tokens_emitted << ','
     << csv_double(m.mat) << ',' << csv_double(m.mat_with_bonus) << ',' << csv_double(m.batch_acceptance) << ','
     << csv_double(m.speedup_proxy) << ',' << e.mismatches << '\n';
  return os.str();
}

/// Decodes the held-out stream with `drafter` frozen. Every prompt is checked
/// against the greedy reference; the wall clocks time the speculative decode
/// and the reference separately, keeping the fastest of `timing_repeats`.
inline EvalReport run_eval(const RunConfig& c, const DraftHead& drafter, bool timed = true) {
  c.validate();
  Rig rig = build_rig(c);
  if (drafter.a.rows != rig.drafter.a.rows || drafter.a.cols != rig.drafter.a.cols ||
      drafter.b.rows != rig.drafter.b.rows || drafter.b.cols != rig.drafter.b.cols)
    throw DimensionError("drafter adapters do not match the configured rig");
  rig.drafter.a = drafter.a;
  rig.drafter.b = drafter.b;

  const PromptStream stream(c.corpus, c.backbone.vocab, static_cast<std::uint64_t>(Stream::eval), c.eval.n_prompts);
  std::vector<std::vector<Token>> prompts;
  for (std::size_t i = 0; i < stream.size(); ++i) prompts.push_back(stream.prompt(i));

  EvalReport rep;
  rep.prompts = prompts.size();
  MetricsAccumulator acc(c.spec.k_spec);
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    DecodeState st(rig.backbone, prompts[i], prompt_sample_seed(c, Stream::eval, i));
    for (const auto& s : speculative_decode(rig.view(), st, c.spec, c.corpus.gen_len)) acc.add(s);
    const auto out = st.generated();
    lengths.push_back(out.size());
    const auto ref = greedy_ar_reference(rig.backbone, rig.verifier, prompts[i], out.size(), c.spec.eos);
    if (!std::equal(out.begin(), out.end(), ref.begin(), ref.end())) ++rep.mismatches;
  }
  rep.metrics = acc.finish(c.cost, c.spec);
  if (!timed) return rep;

  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::duration d) { return std::chrono::duration<double>(d).count(); };
  rep.spec_seconds = rep.ar_seconds = 1e300;
  std::size_t sink = 0;
  for (std::size_t r = 0; r < c.eval.timing_repeats; ++r) {
    auto t0 = clock::now();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      DecodeState st(rig.backbone, prompts[i], prompt_sample_seed(c, Stream::eval, i));
      speculative_decode(rig.view(), st, c.spec, c.corpus.gen_len);
      sink += st.tokens().size();
    }
    rep.spec_seconds = std::min(rep.spec_seconds, seconds(clock::now() - t0));
    t0 = clock::now();
    for (std::size_t i = 0; i < prompts.size(); ++i)
      sink += greedy_ar_reference(rig.backbone, rig.verifier, prompts[i], lengths[i], c.spec.eos).size();
    rep.ar_seconds = std::min(rep.ar_seconds, seconds(clock::now() - t0));
  }
  if (sink == 0) throw Error("timing loop produced no tokens");
  return rep;
}

inline std::string timing_csv(const EvalReport& e) {
  std::ostringstream os;
  os << "spec_seconds,ar_seconds,wall_speedup\n"
     << detail::csv_double(e.spec_seconds) << ',' << detail::csv_double(e.ar_seconds) << ','
     << detail::csv_double(e.wall_speedup()) << '\n';
  return os.str();
}

inline std::string run_report_text(const RunConfig& c, const TrainReport* t, const EvalReport& e) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "mode             " << to_string(c.trainer.mode) << '\n';
  os << "seed             " << c.global_seed << '\n';
  if (t) {
    const TrendSummary tr = t->trend();
    os << "updates          " << t->updates << '\n';
    os << "prompts used     " << t->prompts_used << '\n';
    os << "audits passed    " << t->audits << " (" << t->audited_prompts << " prompts)\n";
    os << "acceptance       " << tr.initial << " -> " << tr.final << " (first/last " << kTrendWindow
       << " updates)\n";
  }
  const DecodeMetrics& m = e.metrics;
  os << "eval prompts     " << e.prompts << " (mismatches " << e.mismatches << ")\n";
  os << "eval MAT         " << m.mat << " (with bonus " << m.mat_with_bonus << ")\n";
  os << "eval acceptance  " << m.batch_acceptance << '\n';
  os << "speedup proxy    " << m.speedup_proxy << '\n';
  os << "wall speedup     " << e.wall_speedup() << " (spec " << e.spec_seconds << " s, AR " << e.ar_seconds << " s)\n";
  return os.str();
}

inline void write_eval_outputs(const std::filesystem::path& dir, const RunConfig& c, const TrainReport* t,
                               const EvalReport& e) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "eval.csv", eval_csv(e));
  detail::write_text(dir / "eval_timing.csv", timing_csv(e));
  detail::write_text(dir / "run_report.txt", run_report_text(c, t, e));
}

struct RunOutcome {
  TrainReport train;
  EvalReport eval;
};

/// Train, then evaluate the final drafter, writing everything to c.out_dir.
inline RunOutcome train_and_eval(const RunConfig& c, const UpdateObserver& observer = {}) {
  const std::filesystem::path dir(c.out_dir);
  RunOutcome o{run_training(c, observer, dir), {}};
  o.eval = run_eval(c, o.train.drafter);
  if (o.eval.mismatches) throw InvariantViolation("held-out decode diverged from the greedy reference");
  write_eval_outputs(dir, c, &o.train, o.eval);
  return o;
}

struct AblationRow {
  TrainMode mode;
  double final_mat = 0.0;
  double final_acceptance = 0.0;
  double speedup_proxy = 0.0;
  double wall_speedup = 0.0;
  std::uint64_t backbone_checksum = 0;
};

inline constexpr TrainMode kAblationModes[] = {TrainMode::full_dvi, TrainMode::kl_only, TrainMode::pg_only,
                                              TrainMode::ce_only};

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "mode,final_mat,final_acceptance,speedup_proxy,backbone_checksum\n";
  for (const auto& r : rows) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(r.backbone_checksum));
    os << to_string(r.mode) << ',' << detail::csv_double(r.final_mat) << ','
       << detail::csv_double(r.final_acceptance) << ',' << detail::csv_double(r.speedup_proxy) << ',' << hex << '\n';
  }
  return os.str();
}

/// Runs all four objectives on the same rig and seeds, one subdirectory each.
inline std::vector<AblationRow> run_ablation(const RunConfig& base) {
  std::vector<AblationRow> rows;
  const std::filesystem::path root(base.out_dir);
  for (TrainMode mode : kAblationModes) {
    RunConfig c = base;
    c.trainer.mode = mode;
    c.out_dir = (root / std::string(to_string(mode))).string();
    const RunOutcome o = train_and_eval(c);
    rows.push_back({mode, o.eval.metrics.mat, o.train.trend().final, o.eval.metrics.speedup_proxy,
                    o.eval.wall_speedup(), o.train.backbone_checksum});
  }
  std::filesystem::create_directories(root);
  detail::write_text(root / "ablation_summary.csv", ablation_csv(rows));
  return rows;
}

}  // namespace dvi
