// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dvi/backbone.hpp"
#include "dvi/error.hpp"
#include "dvi/rng.hpp"

namespace dvi {

/// One verified drafted position. `position` is 1-based within the block;
/// reward is 1 for an accepted draft and 0 for the first reject.
struct RolloutTuple {
  Vector h_k;
  Token action = 0;
  Vector verifier_logits;
  int reward = 0;
  std::size_t position = 1;
  std::uint64_t step_id = 0;
};

struct BufferConfig {
  std::size_t capacity = 4096;
  std::size_t minibatch_size = 64;
  std::size_t fresh_window = 1;

  void validate() const {
    if (capacity == 0) throw ConfigError("buffer.capacity must be >= 1");
    if (minibatch_size > capacity) throw ConfigError("buffer.minibatch_size must not exceed buffer.capacity");
    if (fresh_window < 1) throw ConfigError("buffer.fresh_window must be >= 1");
  }
};

/// FIFO store of rollout tuples with uniform minibatch sampling.
class ReplayBuffer {
 public:
  ReplayBuffer(BufferConfig config, std::size_t k_spec) : config_(config), k_spec_(k_spec) {
    config_.validate();
  }

  /// Appends tuples, evicting the oldest beyond capacity. Each step's tuples
  /// must read positions 1..n with rewards 1,...,1 followed by at most one 0;
  /// the whole call is rejected otherwise.
  void push(std::span<const RolloutTuple> tuples) {
    validate_steps(tuples);
    for (const auto& t : tuples) {
      items_.push_back(t);
      if (items_.size() > config_.capacity) items_.pop_front();
    }
  }

  std::vector<RolloutTuple> sample_minibatch(std::size_t n, std::uint64_t seed) const {
    if (items_.empty()) throw EmptyBuffer("cannot sample from an empty replay buffer");
    Engine eng(seed);
    std::vector<RolloutTuple> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(items_[uniform_below(eng, items_.size())]);
    return out;
  }

  /// Tuples logged within the last fresh_window steps, i.e. with
  /// step_id > current_step - fresh_window.
  std::vector<RolloutTuple> fresh_slice(std::uint64_t current_step) const {
    std::vector<RolloutTuple> out;
    const std::uint64_t w = config_.fresh_window;
    for (auto it = items_.rbegin(); it != items_.rend(); ++it) {
      if (it->step_id + w <= current_step) break;
      if (it->step_id <= current_step) out.push_back(*it);
    }
    return {out.rbegin(), out.rend()};
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const BufferConfig& config() const { return config_; }
  const std::deque<RolloutTuple>& items() const { return items_; }

  /// Text dump: one tuple per line, tab-separated
  /// step_id, position, action, reward, h_k, verifier_logits; vectors are
  /// comma-joined with 17 significant digits.
  void dump(std::ostream& os) const {
    auto join = [&os](const Vector& v) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
      }
    };
    const auto old_prec = os.precision(17);
    for (const auto& t : items_) {
      os << t.step_id << '\t' << t.position << '\t' << t.action << '\t' << t.reward << '\t';
      join(t.h_k);
      os << '\t';
      join(t.verifier_logits);
      os << '\n';
    }
    os.precision(old_prec);
  }

 private:
  void validate_steps(std::span<const RolloutTuple> tuples) const {
    std::map<std::uint64_t, std::vector<const RolloutTuple*>> by_step;
    for (const auto& t : tuples) {
      if (t.reward != 0 && t.reward != 1)
        throw InvariantViolation("tuple reward must be 0 or 1");
      if (t.position < 1 || t.position > k_spec_)
        throw InvariantViolation("tuple position " + std::to_string(t.position) + " outside 1.." +
                                 std::to_string(k_spec_));
      by_step[t.step_id].push_back(&t);
    }
    for (const auto& [step, list] : by_step) {
      bool seen_reject = false;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const RolloutTuple& t = *list[i];
        if (t.position != i + 1)
          throw InvariantViolation("step " + std::to_string(step) + ": positions must run 1..n");
        if (seen_reject)
          throw InvariantViolation("step " + std::to_string(step) + ": tuple logged past the first reject");
        if (t.reward == 0) seen_reject = true;
      }
    }
  }

  BufferConfig config_;
  std::size_t k_spec_;
  std::deque<RolloutTuple> items_;
};

}  // namespace dvi
