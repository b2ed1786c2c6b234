#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alpt/dataset.hpp"
#include "alpt/error.hpp"
#include "alpt/maze.hpp"
#include "alpt/model.hpp"
#include "alpt/rng.hpp"
#include "alpt/svg.hpp"

namespace alpt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class ActionMode { Greedy, Sample };

inline const char* action_mode_name(ActionMode m) {
  return m == ActionMode::Greedy ? "greedy" : "sample";
}

inline ActionMode action_mode_from_name(const std::string& name) {
  if (name == "greedy") return ActionMode::Greedy;
  if (name == "sample") return ActionMode::Sample;
  throw Error(ErrorCategory::Usage, "unknown action mode: " + name);
}

struct EvalConfig {
  int episodes = 100;
  int max_steps = 500;
  double return_quantile = 0.85;
  ActionMode action_mode = ActionMode::Greedy;
  // When >= 0, condition every step on this return bin instead of consulting
  // the return head (mazes condition on reaching the goal, bin 1).
  int fixed_return_bin = -1;
  uint64_t seed = 0;

  void validate() const {
    require(episodes >= 1, ErrorCategory::Usage, "need at least one evaluation episode");
    require(max_steps >= 1, ErrorCategory::Usage, "max_steps must be positive");
    require(return_quantile > 0.0 && return_quantile <= 1.0, ErrorCategory::Usage,
            "return quantile must lie in (0,1]");
  }
};

// ---------------------------------------------------------------------------
// Return-conditioned action selection
// ---------------------------------------------------------------------------

struct Chosen {
  int32_t action = 0;
  int32_t return_bin = 0;
};

namespace detail {

// Smallest bin whose CDF under softmax(logits) reaches the quantile. A hair
// of tolerance keeps quantile 1.0 from overshooting past the last bin with
// mass when the probabilities sum to one minus rounding.
template <typename S>
int quantile_bin(const Mat<S>& logits, Eigen::Index row, double quantile) {
  const int n = static_cast<int>(logits.cols());
  double mx = static_cast<double>(logits.row(row).maxCoeff());
  double sum = 0;
  std::vector<double> p(static_cast<size_t>(n));
  for (int b = 0; b < n; ++b) {
    p[static_cast<size_t>(b)] = std::exp(static_cast<double>(logits(row, b)) - mx);
    sum += p[static_cast<size_t>(b)];
  }
  double cdf = 0;
  for (int b = 0; b < n; ++b) {
    cdf += p[static_cast<size_t>(b)] / sum;
    if (cdf >= quantile - 1e-9) return b;
  }
  return n - 1;
}

template <typename S>
int32_t greedy_or_sample(const Mat<S>& logits, Eigen::Index row, ActionMode mode, Rng* rng) {
  if (mode == ActionMode::Greedy) return argmax_lowest(logits, row);
  require(rng != nullptr, "sampled evaluation needs a random stream");
  const int n = static_cast<int>(logits.cols());
  double mx = static_cast<double>(logits.row(row).maxCoeff());
  std::vector<double> p(static_cast<size_t>(n));
  double sum = 0;
  for (int a = 0; a < n; ++a) {
    p[static_cast<size_t>(a)] = std::exp(static_cast<double>(logits(row, a)) - mx);
    sum += p[static_cast<size_t>(a)];
  }
  double u = rng->next_double() * sum;
  for (int a = 0; a < n; ++a) {
    u -= p[static_cast<size_t>(a)];
    if (u < 0) return a;
  }
  return n - 1;
}

// Two-pass decode over pre-assembled token matrices whose last column is the
// probe timestep: current state, return bin 0, placeholder action, reward
// bin 0. The causal mask keeps the probe's own dummy tokens out of both
// read positions, so the dummies are inert. The chosen return bins are
// written back into the probe column between the passes.
template <typename S>
std::vector<Chosen> decide(const TransformerParams<S>& p, MatXi& states, MatXi& returns,
                           MatXi& actions_in, MatXi& rewards, const EvalConfig& cfg,
                           const std::vector<Rng*>& rngs) {
  const auto& mc = p.config;
  require(mc.kind == ModelKind::Dt, "action selection needs a decision transformer");
  const int B = static_cast<int>(states.rows());
  const int T = static_cast<int>(states.cols());
  require(static_cast<int>(rngs.size()) == B, "one random stream slot per row");

  std::vector<Chosen> out(static_cast<size_t>(B));
  if (cfg.fixed_return_bin >= 0) {
    require(cfg.fixed_return_bin < mc.return_bins, ErrorCategory::Usage,
            "fixed return bin out of range");
    for (int b = 0; b < B; ++b) out[static_cast<size_t>(b)].return_bin = cfg.fixed_return_bin;
  } else {
    auto probe = dt_forward(p, states, returns, actions_in, rewards);
    for (int b = 0; b < B; ++b) {
      Eigen::Index row = static_cast<Eigen::Index>(b) * T + (T - 1);
      out[static_cast<size_t>(b)].return_bin =
          static_cast<int32_t>(quantile_bin(probe.return_logits, row, cfg.return_quantile));
    }
  }
  for (int b = 0; b < B; ++b) returns(b, T - 1) = out[static_cast<size_t>(b)].return_bin;

  auto act = dt_forward(p, states, returns, actions_in, rewards);
  for (int b = 0; b < B; ++b) {
    Eigen::Index row = static_cast<Eigen::Index>(b) * T + (T - 1);
    out[static_cast<size_t>(b)].action =
        greedy_or_sample(act.action_logits, row, cfg.action_mode, rngs[static_cast<size_t>(b)]);
  }
  return out;
}

}  // namespace detail

// Rolling context of completed timesteps, oldest first. Each entry holds the
// four token channels exactly as the training batches carried them.
struct TokenWindow {
  std::vector<int32_t> states, returns, actions, rewards;

  int size() const { return static_cast<int>(states.size()); }

  void push(int32_t s, int32_t g, int32_t a, int32_t r) {
    states.push_back(s);
    returns.push_back(g);
    actions.push_back(a);
    rewards.push_back(r);
  }

  void evict_to(int keep) {
    require(keep >= 0, "cannot keep a negative number of timesteps");
    while (size() > keep) {
      states.erase(states.begin());
      returns.erase(returns.begin());
      actions.erase(actions.begin());
      rewards.erase(rewards.begin());
    }
  }
};

// Chooses the next action given the history window and the freshly observed
// state. The history must leave room for one more timestep in the model's
// context; callers evict before asking.
template <typename S>
Chosen select_action(const TransformerParams<S>& p, const TokenWindow& history,
                     int32_t current_state, const EvalConfig& cfg, Rng* rng = nullptr) {
  const auto& mc = p.config;
  const int T = history.size() + 1;
  require(4 * T <= mc.context_tokens, "history leaves no room for the probe timestep");

  MatXi states(1, T), returns(1, T), actions(1, T), rewards(1, T);
  for (int t = 0; t + 1 < T; ++t) {
    states(0, t) = history.states[static_cast<size_t>(t)];
    returns(0, t) = history.returns[static_cast<size_t>(t)];
    actions(0, t) = history.actions[static_cast<size_t>(t)];
    rewards(0, t) = history.rewards[static_cast<size_t>(t)];
  }
  states(0, T - 1) = current_state;
  returns(0, T - 1) = 0;
  actions(0, T - 1) = mc.action_vocab;  // placeholder id
  rewards(0, T - 1) = 0;

  std::vector<Rng*> rngs{rng};
  return detail::decide(p, states, returns, actions, rewards, cfg, rngs)[0];
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutResult {
  float episode_return = 0.0f;
  int length = 0;
  bool success = false;
  int start = 0, goal = 0;
  std::vector<uint32_t> states;       // state token before each step
  std::vector<int32_t> actions;       // global action ids as emitted
  std::vector<float> rewards;         // realized rewards
  std::vector<int32_t> chosen_bins;   // conditioning return bin per step
};

namespace detail {

// Model-emitted ids resolve through the global vocabulary to maze moves;
// names outside the canonical four (or absent from this maze's action set)
// leave the agent in place for that step.
inline std::vector<std::optional<Action>> resolve_actions(const MazeSpec& spec,
                                                          const std::vector<std::string>& names) {
  std::vector<std::optional<Action>> resolved;
  for (const auto& n : names) {
    auto a = action_from_name(n);
    if (a.has_value() && spec.local_action_id(*a) < 0) a.reset();
    resolved.push_back(a);
  }
  return resolved;
}

template <typename S>
void check_compatibility(const TransformerParams<S>& p, const MazeSpec& spec,
                         const std::vector<std::string>& action_names) {
  const auto& mc = p.config;
  require(mc.kind == ModelKind::Dt, "rollouts need a decision transformer");
  require(mc.context_tokens >= 4, "context must hold at least one timestep");
  require(static_cast<int>(action_names.size()) == mc.action_vocab,
          "action vocabulary does not match the model");
  int64_t cells = spec.cells();
  if (mc.state_factor > 0)
    require(mc.state_factor == spec.cells(), "maze grid does not match the model's state space");
  else
    require(cells * cells <= mc.state_vocab,
            "maze state tokens exceed the model's state vocabulary");
}

}  // namespace detail

// One episode from a random (start, goal) pair drawn from the seed. The
// window keeps the most recent timesteps that fit the model context, each
// carrying the return bin the step was conditioned on and the realized
// reward; the episode ends at the goal or after max_steps.
template <typename S>
RolloutResult rollout(const TransformerParams<S>& p, const MazeSpec& spec,
                      const std::vector<std::string>& action_names, const EvalConfig& cfg,
                      uint64_t seed) {
  cfg.validate();
  detail::check_compatibility(p, spec, action_names);
  auto resolved = detail::resolve_actions(spec, action_names);
  const auto& mc = p.config;
  const int capacity = mc.context_tokens / 4;
  const int cells = spec.cells();

  Rng rng(seed);
  auto open = spec.open_cells();
  require(open.size() >= 2, "need at least two open cells");
  int start = static_cast<int>(open[rng.next_below(open.size())]);
  int goal = start;
  while (goal == start) goal = static_cast<int>(open[rng.next_below(open.size())]);

  RolloutResult res;
  res.start = start;
  res.goal = goal;
  TokenWindow window;
  EnvState state{start, goal};

  for (int t = 0; t < cfg.max_steps; ++t) {
    uint32_t token = state_token(state.agent, state.goal, cells);
    window.evict_to(capacity - 1);
    Chosen c = select_action(p, window, static_cast<int32_t>(token), cfg, &rng);

    float reward = 0.0f;
    const auto& move = resolved[static_cast<size_t>(c.action)];
    if (move.has_value()) {
      StepOutcome out = step(spec, state, *move);
      reward = out.reward;
      state = out.next;
    }

    res.states.push_back(token);
    res.actions.push_back(c.action);
    res.rewards.push_back(reward);
    res.chosen_bins.push_back(c.return_bin);
    res.episode_return += reward;
    res.length += 1;
    if (reward > 0.5f) {
      res.success = true;
      break;
    }
    window.push(static_cast<int32_t>(token), c.return_bin, c.action,
                bin_of(reward, mc.reward_bins));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double mean_return = 0.0;
  double success_rate = 0.0;
  std::vector<std::pair<float, int>> per_episode;  // (return, length)
  uint64_t checkpoint_step = 0;
};

// Runs cfg.episodes rollouts in lockstep, batching the two decode passes
// across every episode that is still running. Episodes advance on a shared
// step clock, so all active rows carry the same window length and one
// forward serves the whole batch. Per-episode seeds come off the config
// seed, making the report independent of batch composition in Greedy mode.
template <typename S>
EvalReport evaluate(const TransformerParams<S>& p, const MazeSpec& spec,
                    const std::vector<std::string>& action_names, const EvalConfig& cfg,
                    uint64_t checkpoint_step = 0) {
  cfg.validate();
  detail::check_compatibility(p, spec, action_names);
  auto resolved = detail::resolve_actions(spec, action_names);
  const auto& mc = p.config;
  const int capacity = mc.context_tokens / 4;
  const int cells = spec.cells();
  const int E = cfg.episodes;

  auto open = spec.open_cells();
  require(open.size() >= 2, "need at least two open cells");

  std::vector<Rng> rngs;
  std::vector<EnvState> env(static_cast<size_t>(E));
  std::vector<TokenWindow> window(static_cast<size_t>(E));
  std::vector<char> done(static_cast<size_t>(E), 0);
  std::vector<float> ep_return(static_cast<size_t>(E), 0.0f);
  std::vector<int> ep_length(static_cast<size_t>(E), 0);
  rngs.reserve(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) {
    rngs.emplace_back(derive_seed(cfg.seed, 0x65766c00ull + static_cast<uint64_t>(e)));
    Rng& r = rngs.back();
    int start = static_cast<int>(open[r.next_below(open.size())]);
    int goal = start;
    while (goal == start) goal = static_cast<int>(open[r.next_below(open.size())]);
    env[static_cast<size_t>(e)] = EnvState{start, goal};
  }

  for (int t = 0; t < cfg.max_steps; ++t) {
    std::vector<int> active;
    for (int e = 0; e < E; ++e)
      if (!done[static_cast<size_t>(e)]) active.push_back(e);
    if (active.empty()) break;

    const int A = static_cast<int>(active.size());
    const int hist = window[static_cast<size_t>(active[0])].size();
    const int T = hist + 1;
    MatXi states(A, T), returns(A, T), actions(A, T), rewards(A, T);
    std::vector<Rng*> row_rng(static_cast<size_t>(A));
    for (int r = 0; r < A; ++r) {
      int e = active[static_cast<size_t>(r)];
      const TokenWindow& w = window[static_cast<size_t>(e)];
      for (int i = 0; i < hist; ++i) {
        states(r, i) = w.states[static_cast<size_t>(i)];
        returns(r, i) = w.returns[static_cast<size_t>(i)];
        actions(r, i) = w.actions[static_cast<size_t>(i)];
        rewards(r, i) = w.rewards[static_cast<size_t>(i)];
      }
      const EnvState& s = env[static_cast<size_t>(e)];
      states(r, T - 1) = static_cast<int32_t>(state_token(s.agent, s.goal, cells));
      returns(r, T - 1) = 0;
      actions(r, T - 1) = mc.action_vocab;
      rewards(r, T - 1) = 0;
      row_rng[static_cast<size_t>(r)] = &rngs[static_cast<size_t>(e)];
    }

    auto chosen = detail::decide(p, states, returns, actions, rewards, cfg, row_rng);

    for (int r = 0; r < A; ++r) {
      int e = active[static_cast<size_t>(r)];
      const Chosen& c = chosen[static_cast<size_t>(r)];
      EnvState& s = env[static_cast<size_t>(e)];
      int32_t token = states(r, T - 1);

      float reward = 0.0f;
      const auto& move = resolved[static_cast<size_t>(c.action)];
      if (move.has_value()) {
        StepOutcome out = step(spec, s, *move);
        reward = out.reward;
        s = out.next;
      }
      ep_return[static_cast<size_t>(e)] += reward;
      ep_length[static_cast<size_t>(e)] += 1;
      if (reward > 0.5f) {
        done[static_cast<size_t>(e)] = 1;
        continue;
      }
      TokenWindow& w = window[static_cast<size_t>(e)];
      w.push(token, c.return_bin, c.action, bin_of(reward, mc.reward_bins));
      w.evict_to(capacity - 1);
    }
  }

  EvalReport report;
  report.checkpoint_step = checkpoint_step;
  double sum = 0;
  int successes = 0;
  for (int e = 0; e < E; ++e) {
    report.per_episode.emplace_back(ep_return[static_cast<size_t>(e)],
                                    ep_length[static_cast<size_t>(e)]);
    sum += static_cast<double>(ep_return[static_cast<size_t>(e)]);
    if (ep_return[static_cast<size_t>(e)] > 0.5f) ++successes;
  }
  report.mean_return = sum / E;
  report.success_rate = static_cast<double>(successes) / E;
  return report;
}

// ---------------------------------------------------------------------------
// IDM label accuracy against the displacement oracle
// ---------------------------------------------------------------------------

struct IdmAccuracy {
  double overall = 0.0;
  double unambiguous = 0.0;
  int64_t positions = 0;
  int64_t unambiguous_positions = 0;
};

// Scores argmax pseudo-labels on held-out labelled data. Each labelable
// position is scored exactly once, from chunks laid out the way training
// labels them: starts at 0, k, 2k, ... with the last chunk left-shifted to
// fit. A transition is unambiguous when the agent moved, since a unit
// displacement pins down the action; wall bumps stay in place and are
// excluded from the second score.
template <typename S>
IdmAccuracy idm_accuracy(const TransformerParams<S>& p, const TrajectoryDataset& heldout,
                         const std::vector<std::string>& action_names) {
  const auto& mc = p.config;
  require(mc.kind == ModelKind::Idm, "label accuracy needs an inverse dynamics model");
  require(static_cast<int>(action_names.size()) == mc.action_vocab,
          "action vocabulary does not match the model");
  require(heldout.env_width > 0 && heldout.env_height > 0,
          "displacement oracle needs the grid geometry");
  const int k = mc.context_tokens - 1;
  const int cells = heldout.env_width * heldout.env_height;

  // Local label id -> global model id, via names; -1 marks unknowable labels.
  std::vector<int32_t> to_global;
  for (const auto& name : heldout.action_vocab) {
    int32_t g = -1;
    for (size_t i = 0; i < action_names.size(); ++i)
      if (action_names[i] == name) { g = static_cast<int32_t>(i); break; }
    to_global.push_back(g);
  }

  struct Chunk {
    int episode;
    int start;
    std::vector<char> fresh;  // which of the k positions this chunk scores
  };
  std::vector<Chunk> chunks;
  for (size_t e = 0; e < heldout.episodes.size(); ++e) {
    const auto& ep = heldout.episodes[e];
    int labelable = heldout.extended_length(ep) - 1;
    if (labelable < k) continue;
    std::vector<char> scored(static_cast<size_t>(labelable), 0);
    std::vector<int> starts;
    for (int s = 0; s + k <= labelable; s += k) starts.push_back(s);
    if (starts.empty() || starts.back() + k < labelable) starts.push_back(labelable - k);
    for (int s : starts) {
      Chunk c{static_cast<int>(e), s, std::vector<char>(static_cast<size_t>(k), 0)};
      bool any = false;
      for (int i = 0; i < k; ++i) {
        if (scored[static_cast<size_t>(s + i)]) continue;
        scored[static_cast<size_t>(s + i)] = 1;
        c.fresh[static_cast<size_t>(i)] = 1;
        any = true;
      }
      if (any) chunks.push_back(std::move(c));
    }
  }
  require(!chunks.empty(), "held-out set has no scorable window");

  IdmAccuracy acc;
  int64_t correct = 0, correct_unambiguous = 0;
  const size_t kBatch = 256;
  for (size_t lo = 0; lo < chunks.size(); lo += kBatch) {
    size_t hi = std::min(chunks.size(), lo + kBatch);
    MatXi states(static_cast<Eigen::Index>(hi - lo), k + 1);
    for (size_t c = lo; c < hi; ++c) {
      const auto& ep = heldout.episodes[static_cast<size_t>(chunks[c].episode)];
      for (int i = 0; i <= k; ++i)
        states(static_cast<Eigen::Index>(c - lo), i) =
            static_cast<int32_t>(heldout.extended_state(ep, chunks[c].start + i));
    }
    auto out = idm_forward(p, states);
    for (size_t c = lo; c < hi; ++c) {
      const auto& ep = heldout.episodes[static_cast<size_t>(chunks[c].episode)];
      for (int i = 0; i < k; ++i) {
        if (!chunks[c].fresh[static_cast<size_t>(i)]) continue;
        int t = chunks[c].start + i;
        int32_t label = ep.actions[static_cast<size_t>(t)];
        if (label == kNoAction) continue;
        int32_t truth = to_global[static_cast<size_t>(label)];
        int32_t pred = static_cast<int32_t>(
            argmax_lowest(out.logits, static_cast<Eigen::Index>(c - lo) * k + i));
        int prev = token_agent(static_cast<uint32_t>(states(static_cast<Eigen::Index>(c - lo), i)),
                               cells);
        int next = token_agent(
            static_cast<uint32_t>(states(static_cast<Eigen::Index>(c - lo), i + 1)), cells);
        bool moved = displacement_action(prev, next, heldout.env_width).has_value();
        acc.positions += 1;
        bool right = truth >= 0 && pred == truth;
        if (right) ++correct;
        if (moved) {
          acc.unambiguous_positions += 1;
          if (right) ++correct_unambiguous;
        }
      }
    }
  }
  require(acc.positions > 0, "held-out set has no labelled position");
  acc.overall = static_cast<double>(correct) / static_cast<double>(acc.positions);
  acc.unambiguous = acc.unambiguous_positions == 0
                        ? 0.0
                        : static_cast<double>(correct_unambiguous) /
                              static_cast<double>(acc.unambiguous_positions);
  return acc;
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

struct SeedCurve {
  std::vector<uint64_t> steps;
  std::vector<double> values;
};

struct CurvePoint {
  uint64_t step = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

struct LearningCurve {
  std::string label;
  std::vector<CurvePoint> points;
};

// Collapses per-seed logs onto one mean +/- std curve. All seeds must share
// the same strictly increasing step grid.
inline LearningCurve curve_from_seeds(const std::string& label,
                                      const std::vector<SeedCurve>& seeds) {
  require(!seeds.empty(), "curve needs at least one seed log");
  const auto& grid = seeds.front().steps;
  require(!grid.empty(), "curve needs at least one point");
  for (size_t i = 1; i < grid.size(); ++i)
    require(grid[i] > grid[i - 1], "curve steps must be strictly increasing");
  for (const auto& s : seeds) {
    require(s.steps == grid, "seed logs disagree on the step grid");
    require(s.values.size() == s.steps.size(), "curve values must match steps");
  }

  LearningCurve curve;
  curve.label = label;
  const double n = static_cast<double>(seeds.size());
  for (size_t i = 0; i < grid.size(); ++i) {
    double mean = 0;
    for (const auto& s : seeds) mean += s.values[i];
    mean /= n;
    double var = 0;
    for (const auto& s : seeds) var += (s.values[i] - mean) * (s.values[i] - mean);
    curve.points.push_back({grid[i], mean, std::sqrt(var / n)});
  }
  return curve;
}

// Plain TSV mirror of the plot: one row per (curve, step).
inline std::string curve_table(const std::vector<LearningCurve>& curves) {
  std::string out = "label\tstep\tmean\tstd\n";
  for (const auto& c : curves)
    for (const auto& pt : c.points) {
      out += c.label;
      out += '\t';
      out += std::to_string(pt.step);
      out += '\t';
      out += std::to_string(pt.mean);
      out += '\t';
      out += std::to_string(pt.stddev);
      out += '\n';
    }
  return out;
}

inline std::string curve_svg(const std::vector<LearningCurve>& curves, const std::string& title,
                             const std::string& x_label, const std::string& y_label) {
  require(!curves.empty(), "nothing to plot");
  static const std::vector<std::string> kPalette = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                                    "#d62728", "#9467bd", "#8c564b"};
  const double W = 640, H = 400;
  const double ml = 64, mr = 16, mt = 36, mb = 48;

  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  bool first = true;
  for (const auto& c : curves) {
    require(!c.points.empty(), "curve has no points");
    for (const auto& pt : c.points) {
      double s = static_cast<double>(pt.step);
      if (first) {
        x_lo = x_hi = s;
        y_lo = pt.mean - pt.stddev;
        y_hi = pt.mean + pt.stddev;
        first = false;
      }
      x_lo = std::min(x_lo, s);
      x_hi = std::max(x_hi, s);
      y_lo = std::min(y_lo, pt.mean - pt.stddev);
      y_hi = std::max(y_hi, pt.mean + pt.stddev);
    }
  }
  if (x_hi == x_lo) x_hi = x_lo + 1;
  if (y_hi == y_lo) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }
  double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;

  auto px = [&](double s) { return ml + (s - x_lo) / (x_hi - x_lo) * (W - ml - mr); };
  auto py = [&](double v) { return H - mb - (v - y_lo) / (y_hi - y_lo) * (H - mt - mb); };

  SvgDoc doc(W, H);
  doc.rect(0, 0, W, H, "#ffffff");
  doc.line(ml, H - mb, W - mr, H - mb, "#333", 1.0);
  doc.line(ml, mt, ml, H - mb, "#333", 1.0);
  doc.text(W / 2, 20, title, 14, "#111", "middle");
  doc.text(W / 2, H - 12, x_label, 12, "#333", "middle");
  doc.text(14, mt - 10, y_label, 12, "#333");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.0f", x_lo);
  doc.text(ml, H - mb + 16, buf, 10, "#333", "middle");
  std::snprintf(buf, sizeof buf, "%.0f", x_hi);
  doc.text(W - mr, H - mb + 16, buf, 10, "#333", "middle");
  std::snprintf(buf, sizeof buf, "%.2f", y_lo);
  doc.text(ml - 6, H - mb, buf, 10, "#333", "end");
  std::snprintf(buf, sizeof buf, "%.2f", y_hi);
  doc.text(ml - 6, mt + 8, buf, 10, "#333", "end");

  for (size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const auto& colour = kPalette[i % kPalette.size()];
    std::vector<std::pair<double, double>> band;
    for (const auto& pt : c.points)
      band.emplace_back(px(static_cast<double>(pt.step)), py(pt.mean + pt.stddev));
    for (auto it = c.points.rbegin(); it != c.points.rend(); ++it)
      band.emplace_back(px(static_cast<double>(it->step)), py(it->mean - it->stddev));
    doc.polygon(band, colour, 0.18);

    std::vector<std::pair<double, double>> mean;
    for (const auto& pt : c.points)
      mean.emplace_back(px(static_cast<double>(pt.step)), py(pt.mean));
    doc.polyline(mean, colour, 1.8);
    for (const auto& [x, y] : mean) doc.circle(x, y, 2.2, colour);

    double ly = mt + 14 + 16 * static_cast<double>(i);
    doc.line(W - mr - 120, ly - 4, W - mr - 96, ly - 4, colour, 2.0);
    doc.text(W - mr - 90, ly, c.label, 11, "#333");
  }
  return doc.str();
}

}  // namespace alpt
