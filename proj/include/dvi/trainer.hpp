// SPDX-License-Identifier: Apache-2.0
#pragma once

// Online objective for the draft adapter. All loss terms return their value
// together with dL/dlogits per tuple; adapter gradients are formed by pushing
// those through accumulate_head_gradients.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dvi/error.hpp"
#include "dvi/heads.hpp"
#include "dvi/replay_buffer.hpp"
#include "dvi/rng.hpp"

namespace dvi {

enum class TrainMode { full_dvi, kl_only, pg_only, ce_only };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::full_dvi: return "full_dvi";
    case TrainMode::kl_only: return "kl_only";
    case TrainMode::pg_only: return "pg_only";
    case TrainMode::ce_only: return "ce_only";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "full_dvi") return TrainMode::full_dvi;
  if (s == "kl_only") return TrainMode::kl_only;
  if (s == "pg_only") return TrainMode::pg_only;
  if (s == "ce_only") return TrainMode::ce_only;
  throw ConfigError("unknown training mode '" + std::string(s) +
                    "' (expected full_dvi, kl_only, pg_only or ce_only)");
}

struct TrainerConfig {
  double lambda_0 = 1.0;
  double lambda_pg_max = 0.5;
  double lambda_kl_min = 0.2;
  std::size_t t_warmup = 200;
  std::size_t t_ramp = 400;
  double w_ce = 0.5;
  double w_ent = 0.01;
  double w_rl = 0.5;
  double tau = 1.0;
  double beta_0 = 0.1;
  double beta_decay = 0.999;
  double ema_decay = 0.9;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  TrainMode mode = TrainMode::full_dvi;
  std::uint64_t seed = 3;

  void validate() const {
    for (auto [name, v] : {std::pair{"lambda_0", lambda_0}, {"lambda_pg_max", lambda_pg_max},
                           {"lambda_kl_min", lambda_kl_min}, {"w_ce", w_ce}, {"w_ent", w_ent},
                           {"w_rl", w_rl}, {"beta_0", beta_0}, {"beta_decay", beta_decay},
                           {"learning_rate", learning_rate}, {"momentum", momentum}}) {
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError(std::string("trainer.") + name + " must be finite and >= 0");
    }
    if (!(tau > 0.0)) throw ConfigError("trainer.tau must be > 0");
    if (t_ramp < 1) throw ConfigError("trainer.t_ramp must be >= 1");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("trainer.ema_decay must lie in (0, 1)");
  }
};

struct ScheduleWeights {
  double lambda_pg = 0.0;
  double lambda_kl = 0.0;
  bool operator==(const ScheduleWeights&) const = default;
};

/// KL-heavy warmup, linear ramp toward the reward terms, then constant.
/// Linear ramp at fraction `frac` in [0, 1]. std::lerp is exact at both ends,
/// so the ramp meets the constant branches without rounding gaps.
inline ScheduleWeights ramp_weights(const TrainerConfig& c, double frac) {
  return {std::lerp(0.0, c.lambda_pg_max, frac), std::lerp(c.lambda_0, c.lambda_kl_min, frac)};
}

inline ScheduleWeights schedule_weights(const TrainerConfig& c, std::size_t t) {
  if (t < c.t_warmup) return {0.0, c.lambda_0};
  if (t >= c.t_warmup + c.t_ramp) return {c.lambda_pg_max, c.lambda_kl_min};
  return ramp_weights(c, static_cast<double>(t - c.t_warmup) / static_cast<double>(c.t_ramp));
}

inline double beta_at(const TrainerConfig& c, std::size_t t) {
  return c.beta_0 * std::pow(c.beta_decay, static_cast<double>(t));
}

struct BaselineState {
  double b = 0.0;
};

inline BaselineState update_baseline(BaselineState s, std::span<const int> rewards, double ema_decay) {
  if (rewards.empty()) return s;
  double mean = 0.0;
  for (int r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  return {ema_decay * s.b + (1.0 - ema_decay) * mean};
}

/// Draft distribution of one tuple under the current adapter.
struct DraftEval {
  const RolloutTuple* tuple = nullptr;
  Vector probs;
  Vector log_probs;
};

inline std::vector<DraftEval> evaluate_draft(const DraftHead& head, std::span<const RolloutTuple> tuples) {
  std::vector<DraftEval> out;
  out.reserve(tuples.size());
  for (const auto& t : tuples) {
    const Logits z = draft_logits(head, t.h_k);
    DraftEval e{&t, {}, log_softmax_temp(z, 1.0)};
    e.probs.resize(e.log_probs.size());
    for (std::size_t i = 0; i < e.probs.size(); ++i) e.probs[i] = std::exp(e.log_probs[i]);
    out.push_back(std::move(e));
  }
  return out;
}

struct LossTerm {
  double value = 0.0;
  std::vector<Vector> dlogits;  // one per tuple, same order as the input
};

namespace detail {

inline LossTerm zero_term(std::span<const DraftEval> evals) {
  LossTerm t;
  t.dlogits.reserve(evals.size());
  for (const auto& e : evals) t.dlogits.emplace_back(e.probs.size(), 0.0);
  return t;
}

// KL(p || softmax(teacher / tau)) averaged over the batch.
inline LossTerm kl_to_teacher(std::span<const DraftEval> evals, double tau) {
  LossTerm out = zero_term(evals);
  if (evals.empty()) return out;
  const double n = static_cast<double>(evals.size());
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const DraftEval& e = evals[i];
    const Vector log_q = log_softmax_temp(e.tuple->verifier_logits, tau);
    detail::require_dims(log_q.size() == e.probs.size(), "verifier logits vs draft vocabulary");
    Vector s(log_q.size());
    double kl = 0.0;
    for (std::size_t v = 0; v < s.size(); ++v) {
      s[v] = e.log_probs[v] - log_q[v];
      kl += e.probs[v] * s[v];
    }
    out.value += kl / n;
    for (std::size_t v = 0; v < s.size(); ++v) out.dlogits[i][v] = e.probs[v] * (s[v] - kl) / n;
  }
  return out;
}

// Mean negative log-likelihood of the drafted action over accepted tuples.
inline LossTerm accepted_nll(std::span<const DraftEval> evals) {
  LossTerm out = zero_term(evals);
  std::size_t accepted = 0;
  for (const auto& e : evals) accepted += e.tuple->reward == 1;
  if (accepted == 0) return out;
  const double n = static_cast<double>(accepted);
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const DraftEval& e = evals[i];
    if (e.tuple->reward != 1) continue;
    const auto a = static_cast<std::size_t>(e.tuple->action);
    out.value -= e.log_probs[a] / n;
    for (std::size_t v = 0; v < e.probs.size(); ++v) out.dlogits[i][v] = e.probs[v] / n;
    out.dlogits[i][a] -= 1.0 / n;
  }
  return out;
}

}  // namespace detail

/// Reward-masked log-likelihood over accepted positions only.
inline LossTerm loss_pg(std::span<const DraftEval> evals) { return detail::accepted_nll(evals); }

inline LossTerm loss_kl(std::span<const DraftEval> evals, double tau) {
  if (!(tau > 0.0)) throw Error("KL temperature must be > 0");
  return detail::kl_to_teacher(evals, tau);
}

/// Same functional form as loss_pg; carried as its own weighted term.
inline LossTerm loss_ce(std::span<const DraftEval> evals) { return detail::accepted_nll(evals); }

/// Mean entropy of p_theta and its gradient (before the bonus sign flip).
inline LossTerm loss_entropy(std::span<const DraftEval> evals) {
  LossTerm out = detail::zero_term(evals);
  if (evals.empty()) return out;
  const double n = static_cast<double>(evals.size());
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const DraftEval& e = evals[i];
    double h = 0.0;
    for (std::size_t v = 0; v < e.probs.size(); ++v) h -= e.probs[v] * e.log_probs[v];
    out.value += h / n;
    for (std::size_t v = 0; v < e.probs.size(); ++v)
      out.dlogits[i][v] = -e.probs[v] * (e.log_probs[v] + h) / n;
  }
  return out;
}

/// On-policy correction: w_rl * mean[-(r - b) log p(a)] + beta * KL(p || p_phi),
/// over fresh accepted and first-reject tuples alike. The KL here is at tau = 1.
inline LossTerm loss_policy(std::span<const DraftEval> evals, BaselineState baseline, double beta,
                            double w_rl) {
  LossTerm out = detail::zero_term(evals);
  if (evals.empty()) return out;
  const double n = static_cast<double>(evals.size());
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const DraftEval& e = evals[i];
    const double adv = static_cast<double>(e.tuple->reward) - baseline.b;
    const auto a = static_cast<std::size_t>(e.tuple->action);
    out.value += -w_rl * adv * e.log_probs[a] / n;
    if (adv == 0.0) continue;
    for (std::size_t v = 0; v < e.probs.size(); ++v) out.dlogits[i][v] = w_rl * adv * e.probs[v] / n;
    out.dlogits[i][a] -= w_rl * adv / n;
  }
  if (beta != 0.0) {
    const LossTerm kl = detail::kl_to_teacher(evals, 1.0);
    out.value += beta * kl.value;
    for (std::size_t i = 0; i < evals.size(); ++i)
      for (std::size_t v = 0; v < out.dlogits[i].size(); ++v) out.dlogits[i][v] += beta * kl.dlogits[i][v];
  }
  return out;
}

// Tuple-level conveniences that evaluate the head first.
inline LossTerm loss_pg(std::span<const RolloutTuple> batch, const DraftHead& head) {
  return loss_pg(evaluate_draft(head, batch));
}
inline LossTerm loss_kl(std::span<const RolloutTuple> batch, const DraftHead& head, double tau) {
  return loss_kl(evaluate_draft(head, batch), tau);
}
inline LossTerm loss_ce(std::span<const RolloutTuple> batch, const DraftHead& head) {
  return loss_ce(evaluate_draft(head, batch));
}
inline LossTerm loss_entropy(std::span<const RolloutTuple> batch, const DraftHead& head) {
  return loss_entropy(evaluate_draft(head, batch));
}
inline LossTerm loss_policy(std::span<const RolloutTuple> fresh, const DraftHead& head,
                            BaselineState baseline, double beta, double w_rl) {
  return loss_policy(evaluate_draft(head, fresh), baseline, beta, w_rl);
}

/// Effective weight of every term for one update.
struct ObjectiveWeights {
  double lambda_pg = 0.0;
  double lambda_kl = 0.0;
  double w_ce = 0.0;
  double w_ent = 0.0;
  double w_rl = 0.0;
  double beta = 0.0;
  double tau = 1.0;
  bool policy = false;
};

/// Weights as they apply at update t for the configured mode.
inline ObjectiveWeights objective_weights(const TrainerConfig& c, std::size_t t) {
  ObjectiveWeights w;
  w.tau = c.tau;
  switch (c.mode) {
    case TrainMode::full_dvi: {
      const ScheduleWeights s = schedule_weights(c, t);
      w.lambda_pg = s.lambda_pg;
      w.lambda_kl = s.lambda_kl;
      w.w_ce = c.w_ce;
      w.w_ent = c.w_ent;
      if (t >= c.t_warmup) {
        w.policy = true;
        w.w_rl = c.w_rl;
        w.beta = beta_at(c, t);
      }
      break;
    }
    case TrainMode::kl_only:
      w.lambda_kl = c.lambda_0;
      break;
    case TrainMode::pg_only:
      w.policy = true;
      w.w_rl = c.w_rl;
      break;
    case TrainMode::ce_only:
      w.w_ce = c.w_ce;
      break;
  }
  return w;
}

struct ObjectiveValue {
  double total = 0.0;
  double pg = 0.0;
  double kl = 0.0;
  double ce = 0.0;
  double entropy = 0.0;
  double policy = 0.0;
  AdapterGradients grads;
};

/// L_fast on the minibatch plus (when active) L_policy on the fresh slice,
/// with exact adapter gradients.
inline ObjectiveValue evaluate_objective(const DraftHead& head, std::span<const RolloutTuple> minibatch,
                                         std::span<const RolloutTuple> fresh, const ObjectiveWeights& w,
                                         BaselineState baseline) {
  ObjectiveValue out;
  out.grads = AdapterGradients(head);

  const std::vector<DraftEval> mb = evaluate_draft(head, minibatch);
  const LossTerm pg = loss_pg(mb);
  const LossTerm kl = loss_kl(mb, w.tau);
  const LossTerm ce = loss_ce(mb);
  const LossTerm ent = loss_entropy(mb);
  out.pg = pg.value;
  out.kl = kl.value;
  out.ce = ce.value;
  out.entropy = ent.value;
  out.total = w.lambda_pg * pg.value + w.lambda_kl * kl.value + w.w_ce * ce.value - w.w_ent * ent.value;

  Vector g;
  for (std::size_t i = 0; i < mb.size(); ++i) {
    g.assign(head.vocab(), 0.0);
    bool any = false;
    for (std::size_t v = 0; v < g.size(); ++v) {
      g[v] = w.lambda_pg * pg.dlogits[i][v] + w.lambda_kl * kl.dlogits[i][v] + w.w_ce * ce.dlogits[i][v] -
             w.w_ent * ent.dlogits[i][v];
      any = any || g[v] != 0.0;
    }
    if (any) accumulate_head_gradients(head, minibatch[i].h_k, g, out.grads);
  }

  if (w.policy && !fresh.empty()) {
    const std::vector<DraftEval> fe = evaluate_draft(head, fresh);
    const LossTerm pol = loss_policy(fe, baseline, w.beta, w.w_rl);
    out.policy = pol.value;
    out.total += pol.value;
    for (std::size_t i = 0; i < fe.size(); ++i)
      accumulate_head_gradients(head, fresh[i].h_k, pol.dlogits[i], out.grads);
  }
  return out;
}

struct UpdateReport {
  std::size_t t = 0;
  std::uint64_t step = 0;
  double lambda_pg = 0.0;
  double lambda_kl = 0.0;
  double beta = 0.0;
  double loss_total = 0.0;
  double loss_pg = 0.0;
  double loss_kl = 0.0;
  double loss_ce = 0.0;
  double entropy = 0.0;
  double loss_policy = 0.0;
  double baseline_b = 0.0;
  double batch_acceptance = 0.0;
  std::size_t fresh_tuples = 0;
};

/// Owns the optimizer state for one draft head (SGD with momentum on a, b).
class Trainer {
 public:
  Trainer(TrainerConfig config, std::size_t minibatch_size)
      : config_(config), minibatch_size_(minibatch_size) {
    config_.validate();
  }

  const TrainerConfig& config() const { return config_; }
  std::size_t t() const { return t_; }
  BaselineState baseline() const { return baseline_; }

  UpdateReport train_step(DraftHead& head, const ReplayBuffer& buffer, std::uint64_t current_step) {
    if (buffer.empty()) throw EmptyBuffer("train_step needs a nonempty replay buffer");
    if (vel_a_.rows != head.a.rows || vel_a_.cols != head.a.cols) {
      vel_a_ = Matrix(head.a.rows, head.a.cols);
      vel_b_ = Matrix(head.b.rows, head.b.cols);
    }
    const std::vector<RolloutTuple> minibatch =
        buffer.sample_minibatch(minibatch_size_, mix_keys(config_.seed, t_));
    const std::vector<RolloutTuple> fresh = buffer.fresh_slice(current_step);
    const ObjectiveWeights w = objective_weights(config_, t_);
    const ObjectiveValue obj = evaluate_objective(head, minibatch, fresh, w, baseline_);

    apply(head.a, vel_a_, obj.grads.da);
    apply(head.b, vel_b_, obj.grads.db);

    UpdateReport rep;
    rep.t = t_;
    rep.step = current_step;
    rep.lambda_pg = w.lambda_pg;
    rep.lambda_kl = w.lambda_kl;
    rep.beta = w.beta;
    rep.loss_total = obj.total;
    rep.loss_pg = obj.pg;
    rep.loss_kl = obj.kl;
    rep.loss_ce = obj.ce;
    rep.entropy = obj.entropy;
    rep.loss_policy = obj.policy;
    rep.fresh_tuples = fresh.size();

    std::vector<int> rewards;
    std::size_t latest = 0, latest_accepted = 0;
    for (const auto& f : fresh) {
      rewards.push_back(f.reward);
      if (f.step_id == current_step) {
        ++latest;
        latest_accepted += f.reward == 1;
      }
    }
    rep.batch_acceptance = latest ? static_cast<double>(latest_accepted) / static_cast<double>(latest) : 0.0;
    baseline_ = update_baseline(baseline_, rewards, config_.ema_decay);
    rep.baseline_b = baseline_.b;
    ++t_;
    return rep;
  }

 private:
  void apply(Matrix& param, Matrix& vel, const Matrix& grad) const {
    for (std::size_t i = 0; i < param.data.size(); ++i) {
      vel.data[i] = config_.momentum * vel.data[i] + grad.data[i];
      param.data[i] -= config_.learning_rate * vel.data[i];
    }
  }

  TrainerConfig config_;
  std::size_t minibatch_size_;
  std::size_t t_ = 0;
  BaselineState baseline_;
  Matrix vel_a_, vel_b_;
};

}  // namespace dvi
