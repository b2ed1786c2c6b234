#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "alpt/binio.hpp"
#include "alpt/error.hpp"
#include "alpt/rng.hpp"

namespace alpt {

using MatXi = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int32_t kNoAction = -1;             // in-memory "label absent"
constexpr uint32_t kNoActionWire = 0xffffffffu;  // on-disk sentinel

// One trajectory. All four channels have equal length T; actions may be
// absent per step (kNoAction). returns_to_go is the undiscounted suffix sum
// of rewards.
struct Episode {
  std::string env_id;
  std::vector<uint32_t> states;
  std::vector<int32_t> actions;
  std::vector<float> rewards;
  std::vector<float> returns_to_go;

  int length() const { return static_cast<int>(states.size()); }

  bool consistent() const {
    size_t t = states.size();
    return actions.size() == t && rewards.size() == t && returns_to_go.size() == t;
  }

  // A goal-reaching episode ends on the rewarded transition.
  bool successful() const { return !rewards.empty() && rewards.back() > 0.5f; }
};

inline void compute_returns_to_go(Episode& ep) {
  require(ep.rewards.size() == ep.states.size(), "rewards not populated");
  ep.returns_to_go.assign(ep.rewards.size(), 0.0f);
  float acc = 0.0f;
  for (int t = ep.length() - 1; t >= 0; --t) {
    acc += ep.rewards[static_cast<size_t>(t)];
    ep.returns_to_go[static_cast<size_t>(t)] = acc;
  }
}

// Per-environment episode collection. env_width/env_height carry the grid
// dimensions for gridworld data (0 when not applicable); they let samplers
// synthesize the terminal state of goal-reaching episodes.
struct TrajectoryDataset {
  std::string env_id;
  int env_width = 0;
  int env_height = 0;
  std::vector<Episode> episodes;
  std::vector<std::string> action_vocab;
  uint64_t label_budget_used = 0;

  int64_t total_transitions() const {
    int64_t n = 0;
    for (const auto& ep : episodes) n += ep.length();
    return n;
  }

  int64_t labelled_transitions() const {
    int64_t n = 0;
    for (const auto& ep : episodes)
      for (int32_t a : ep.actions) n += (a != kNoAction) ? 1 : 0;
    return n;
  }

  int cells() const { return env_width * env_height; }

  // State token id of the (goal, goal) cell pair, or nullopt when the
  // episode did not reach a goal / the dataset has no grid metadata.
  std::optional<uint32_t> terminal_state(const Episode& ep) const {
    if (env_width <= 0 || env_height <= 0 || !ep.successful() || ep.states.empty())
      return std::nullopt;
    uint32_t n = static_cast<uint32_t>(cells());
    uint32_t goal = ep.states.back() % n;
    return goal * n + goal;
  }

  // Number of state tokens addressable for this episode: stored states plus
  // the synthesized terminal when one exists.
  int extended_length(const Episode& ep) const {
    return ep.length() + (terminal_state(ep).has_value() ? 1 : 0);
  }

  uint32_t extended_state(const Episode& ep, int t) const {
    if (t < ep.length()) return ep.states[static_cast<size_t>(t)];
    auto term = terminal_state(ep);
    require(t == ep.length() && term.has_value(), "state index out of range");
    return *term;
  }
};

// ---------------------------------------------------------------------------
// Serialization: "ALPT" container, little-endian, length-prefixed episodes.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kDatasetVersion = 1;

inline std::vector<uint8_t> serialize_dataset(const TrajectoryDataset& ds) {
  BinWriter w;
  w.put_bytes("ALPT", 4);
  w.put_u32(kDatasetVersion);
  w.put_string(ds.env_id);
  w.put_u32(static_cast<uint32_t>(ds.env_width));
  w.put_u32(static_cast<uint32_t>(ds.env_height));
  w.put_u32(static_cast<uint32_t>(ds.action_vocab.size()));
  for (const auto& a : ds.action_vocab) w.put_string(a);
  w.put_u64(ds.label_budget_used);
  w.put_u32(static_cast<uint32_t>(ds.episodes.size()));
  for (const auto& ep : ds.episodes) {
    require(ep.consistent(), ErrorCategory::Format, "inconsistent episode lengths");
    BinWriter e;
    e.put_u32(static_cast<uint32_t>(ep.length()));
    for (uint32_t s : ep.states) e.put_u32(s);
    for (int32_t a : ep.actions)
      e.put_u32(a == kNoAction ? kNoActionWire : static_cast<uint32_t>(a));
    for (float r : ep.rewards) e.put_f32(r);
    for (float g : ep.returns_to_go) e.put_f32(g);
    w.put_u64(e.bytes().size());
    w.put_bytes(e.bytes().data(), e.bytes().size());
  }
  return w.bytes();
}

inline void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& path) {
  BinWriter w;
  auto bytes = serialize_dataset(ds);
  w.put_bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

inline TrajectoryDataset deserialize_dataset(BinReader& r) {
  char magic[4];
  r.get_bytes(magic, 4);
  require(std::string(magic, 4) == "ALPT", ErrorCategory::Format, "bad magic");
  uint32_t version = r.get_u32();
  require(version == kDatasetVersion, ErrorCategory::Format,
          "unsupported dataset version " + std::to_string(version));
  TrajectoryDataset ds;
  ds.env_id = r.get_string();
  ds.env_width = static_cast<int>(r.get_u32());
  ds.env_height = static_cast<int>(r.get_u32());
  uint32_t vocab = r.get_u32();
  for (uint32_t i = 0; i < vocab; ++i) ds.action_vocab.push_back(r.get_string());
  ds.label_budget_used = r.get_u64();
  uint32_t count = r.get_u32();
  ds.episodes.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t len = r.get_u64();
    (void)len;
    Episode ep;
    ep.env_id = ds.env_id;
    uint32_t t = r.get_u32();
    ep.states.resize(t);
    ep.actions.resize(t);
    ep.rewards.resize(t);
    ep.returns_to_go.resize(t);
    for (uint32_t j = 0; j < t; ++j) ep.states[j] = r.get_u32();
    for (uint32_t j = 0; j < t; ++j) {
      uint32_t a = r.get_u32();
      ep.actions[j] = (a == kNoActionWire) ? kNoAction : static_cast<int32_t>(a);
    }
    for (uint32_t j = 0; j < t; ++j) ep.rewards[j] = r.get_f32();
    for (uint32_t j = 0; j < t; ++j) ep.returns_to_go[j] = r.get_f32();
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

inline TrajectoryDataset load_dataset(const std::filesystem::path& path) {
  auto r = BinReader::from_file(path);
  return deserialize_dataset(r);
}

// ---------------------------------------------------------------------------
// Action-limited masking
// ---------------------------------------------------------------------------

// Keeps labels on randomly chosen contiguous segments totalling exactly
// `budget` transitions, removes the rest. Returns (labelled, unlabelled):
// `labelled` holds every episode with labels only on the kept segments;
// `unlabelled` holds label-free copies of the episodes that lost at least
// one label.
inline std::pair<TrajectoryDataset, TrajectoryDataset> apply_action_budget(
    const TrajectoryDataset& ds, int64_t budget, int segment_len, uint64_t seed) {
  int64_t total = ds.total_transitions();
  require(budget >= 0 && budget <= total, "label budget exceeds transition count");
  require(segment_len >= 1, "segment length must be positive");
  require(ds.labelled_transitions() == total, "masking requires a fully labelled dataset");

  // Kept-position mask, grown one random segment at a time. Overlapping
  // segments only count their newly covered positions, so the final count
  // is exact.
  std::vector<std::vector<uint8_t>> keep(ds.episodes.size());
  std::vector<int64_t> ep_offset(ds.episodes.size() + 1, 0);
  for (size_t e = 0; e < ds.episodes.size(); ++e)
    ep_offset[e + 1] = ep_offset[e] + ds.episodes[e].length();
  for (size_t e = 0; e < ds.episodes.size(); ++e)
    keep[e].assign(static_cast<size_t>(ds.episodes[e].length()), 0);

  Rng rng(derive_seed(seed, 0x6d61736bull));  // "mask"
  int64_t remaining = budget;
  while (remaining > 0) {
    int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
    size_t e = static_cast<size_t>(
        std::upper_bound(ep_offset.begin(), ep_offset.end(), flat) - ep_offset.begin() - 1);
    int t = static_cast<int>(flat - ep_offset[e]);
    int end = std::min(ds.episodes[e].length(), t + segment_len);
    for (int i = t; i < end && remaining > 0; ++i) {
      if (!keep[e][static_cast<size_t>(i)]) {
        keep[e][static_cast<size_t>(i)] = 1;
        --remaining;
      }
    }
  }

  TrajectoryDataset labelled = ds;
  labelled.label_budget_used = static_cast<uint64_t>(budget);
  TrajectoryDataset unlabelled;
  unlabelled.env_id = ds.env_id;
  unlabelled.env_width = ds.env_width;
  unlabelled.env_height = ds.env_height;
  unlabelled.action_vocab = ds.action_vocab;
  unlabelled.label_budget_used = 0;

  for (size_t e = 0; e < ds.episodes.size(); ++e) {
    bool any_dropped = false;
    for (int t = 0; t < ds.episodes[e].length(); ++t) {
      if (!keep[e][static_cast<size_t>(t)]) {
        labelled.episodes[e].actions[static_cast<size_t>(t)] = kNoAction;
        any_dropped = true;
      }
    }
    if (any_dropped) {
      Episode stripped = ds.episodes[e];
      std::fill(stripped.actions.begin(), stripped.actions.end(), kNoAction);
      unlabelled.episodes.push_back(std::move(stripped));
    }
  }
  return {std::move(labelled), std::move(unlabelled)};
}

// ---------------------------------------------------------------------------
// Multi-environment merging
// ---------------------------------------------------------------------------

struct MergedDataset {
  std::vector<TrajectoryDataset> sources;
  std::vector<std::string> global_action_vocab;
  std::vector<std::vector<int>> local_to_global;
  std::vector<std::pair<int, int>> episode_index;  // (source, episode)

  int global_action_id(const std::string& name) const {
    for (size_t i = 0; i < global_action_vocab.size(); ++i)
      if (global_action_vocab[i] == name) return static_cast<int>(i);
    return -1;
  }

  // Reserved input token standing in for an unlabelled action.
  int placeholder_action_id() const { return static_cast<int>(global_action_vocab.size()); }

  // Recovers the per-source local id of a global action id; -1 when that
  // environment does not use the action.
  int local_action_id(int source, int global_id) const {
    const auto& map = local_to_global[static_cast<size_t>(source)];
    for (size_t l = 0; l < map.size(); ++l)
      if (map[l] == global_id) return static_cast<int>(l);
    return -1;
  }

  const std::string& env_of_episode(int flat_index) const {
    return sources[static_cast<size_t>(episode_index[static_cast<size_t>(flat_index)].first)]
        .env_id;
  }

  int64_t transitions_of(int source) const {
    return sources[static_cast<size_t>(source)].total_transitions();
  }

  // Largest state token across all sources, for sizing embedding tables.
  uint32_t max_state_token() const {
    uint32_t m = 0;
    for (const auto& src : sources) {
      for (const auto& ep : src.episodes)
        for (uint32_t s : ep.states) m = std::max(m, s);
      for (const auto& ep : src.episodes)
        if (auto t = src.terminal_state(ep)) m = std::max(m, *t);
    }
    return m;
  }
};

inline MergedDataset merge(std::vector<TrajectoryDataset> datasets) {
  require(!datasets.empty(), "merge requires at least one dataset");
  MergedDataset merged;
  merged.sources = std::move(datasets);
  for (size_t s = 0; s < merged.sources.size(); ++s) {
    std::vector<int> map;
    for (const auto& name : merged.sources[s].action_vocab) {
      int g = merged.global_action_id(name);
      if (g < 0) {
        g = static_cast<int>(merged.global_action_vocab.size());
        merged.global_action_vocab.push_back(name);
      }
      map.push_back(g);
    }
    merged.local_to_global.push_back(std::move(map));
    for (size_t e = 0; e < merged.sources[s].episodes.size(); ++e)
      merged.episode_index.emplace_back(static_cast<int>(s), static_cast<int>(e));
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Window samplers
// ---------------------------------------------------------------------------

inline int bin_of(float value, int bins) {
  int b = static_cast<int>(std::lround(value));
  return std::clamp(b, 0, bins - 1);
}

struct WindowRef {
  int source;
  int episode;
  int start;
};

// Batch for the inverse dynamics model: k+1 state tokens, k actions.
struct IdmBatch {
  int size = 0;
  int k = 0;
  MatXi states;   // [B, k+1] raw state tokens
  MatXi actions;  // [B, k] global action ids, kNoAction where absent
  std::vector<int> source_of_row;
  std::vector<WindowRef> window_of_row;
};

namespace detail {

// Draws a window index either uniformly over all eligible windows or, when
// per-environment weights are configured, by a weighted source draw followed
// by a uniform draw within the source.
class WindowPool {
 public:
  void build(const MergedDataset& data, int num_sources,
             const std::vector<double>& env_weights, std::vector<WindowRef> windows) {
    windows_ = std::move(windows);
    by_source_.assign(static_cast<size_t>(num_sources), {});
    for (size_t i = 0; i < windows_.size(); ++i)
      by_source_[static_cast<size_t>(windows_[i].source)].push_back(i);
    weights_.clear();
    if (!env_weights.empty()) {
      require(env_weights.size() == static_cast<size_t>(num_sources),
              "one sampling weight per environment required");
      double sum = 0;
      for (size_t s = 0; s < env_weights.size(); ++s) {
        double w = by_source_[s].empty() ? 0.0 : env_weights[s];
        weights_.push_back(w);
        sum += w;
      }
      require(sum > 0, "all sampling weights are zero");
      for (auto& w : weights_) w /= sum;
    }
    (void)data;
  }

  size_t count() const { return windows_.size(); }
  const std::vector<WindowRef>& windows() const { return windows_; }

  const WindowRef& draw(Rng& rng) const {
    if (weights_.empty())
      return windows_[rng.next_below(windows_.size())];
    double u = rng.next_double();
    size_t s = 0;
    for (; s + 1 < weights_.size(); ++s) {
      if (u < weights_[s]) break;
      u -= weights_[s];
    }
    const auto& pool = by_source_[s];
    return windows_[pool[rng.next_below(pool.size())]];
  }

 private:
  std::vector<WindowRef> windows_;
  std::vector<std::vector<size_t>> by_source_;
  std::vector<double> weights_;
};

}  // namespace detail

class IdmSampler {
 public:
  IdmSampler(const MergedDataset& data, int k, bool labelled_only, uint64_t seed,
             std::vector<double> env_weights = {})
      : data_(&data), k_(k), rng_(derive_seed(seed, 0x69646dull)) {
    require(k >= 1, "window length k must be >= 1");
    std::vector<WindowRef> windows;
    for (size_t s = 0; s < data.sources.size(); ++s) {
      const auto& src = data.sources[s];
      for (size_t e = 0; e < src.episodes.size(); ++e) {
        const auto& ep = src.episodes[e];
        int ext = src.extended_length(ep);
        for (int t = 0; t + k <= ext - 1; ++t) {
          if (labelled_only) {
            bool ok = true;
            for (int i = t; i < t + k; ++i)
              if (ep.actions[static_cast<size_t>(i)] == kNoAction) { ok = false; break; }
            if (!ok) continue;
          }
          windows.push_back({static_cast<int>(s), static_cast<int>(e), t});
        }
      }
    }
    require(!windows.empty(), "no eligible window of length k+1");
    pool_.build(data, static_cast<int>(data.sources.size()), env_weights, std::move(windows));
  }

  size_t eligible_count() const { return pool_.count(); }
  const std::vector<WindowRef>& eligible_windows() const { return pool_.windows(); }

  IdmBatch draw(int batch_size) {
    IdmBatch b;
    b.size = batch_size;
    b.k = k_;
    b.states.resize(batch_size, k_ + 1);
    b.actions.resize(batch_size, k_);
    b.source_of_row.resize(static_cast<size_t>(batch_size));
    b.window_of_row.resize(static_cast<size_t>(batch_size));
    for (int r = 0; r < batch_size; ++r) {
      const WindowRef& w = pool_.draw(rng_);
      const auto& src = data_->sources[static_cast<size_t>(w.source)];
      const auto& ep = src.episodes[static_cast<size_t>(w.episode)];
      const auto& map = data_->local_to_global[static_cast<size_t>(w.source)];
      b.source_of_row[static_cast<size_t>(r)] = w.source;
      b.window_of_row[static_cast<size_t>(r)] = w;
      for (int i = 0; i <= k_; ++i)
        b.states(r, i) = static_cast<int32_t>(src.extended_state(ep, w.start + i));
      for (int i = 0; i < k_; ++i) {
        int32_t a = ep.actions[static_cast<size_t>(w.start + i)];
        b.actions(r, i) = (a == kNoAction) ? kNoAction : map[static_cast<size_t>(a)];
      }
    }
    return b;
  }

 private:
  const MergedDataset* data_;
  int k_;
  Rng rng_;
  detail::WindowPool pool_;
};

// Batch for the decision transformer: per timestep the four token channels
// (state, return bin, action, reward bin) plus label-presence flags and the
// k+1 state strip used for pseudo-labelling.
struct DtBatch {
  int size = 0;
  int timesteps = 0;
  MatXi states;         // [B, T]
  MatXi returns;        // [B, T] return bins
  MatXi rewards;        // [B, T] reward bins
  MatXi action_inputs;  // [B, T] global ids; placeholder id where unlabelled
  MatXi action_labels;  // [B, T] global ids; kNoAction where unlabelled
  MatXi label_present;  // [B, T] 0/1
  MatXi next_states;    // [B, T] state token after each step; kNoAction if unavailable
  std::vector<int> source_of_row;
  std::vector<WindowRef> window_of_row;

  int tokens_per_sample() const { return 4 * timesteps; }
};

class DtSampler {
 public:
  DtSampler(const MergedDataset& data, int context_timesteps, bool labelled_only,
            int return_bins, int reward_bins, uint64_t seed,
            std::vector<double> env_weights = {})
      : data_(&data),
        ctx_(context_timesteps),
        return_bins_(return_bins),
        reward_bins_(reward_bins),
        rng_(derive_seed(seed, 0x6474ull)) {
    require(context_timesteps >= 1, "context must be >= 1 timesteps");
    std::vector<WindowRef> windows;
    for (size_t s = 0; s < data.sources.size(); ++s) {
      const auto& src = data.sources[s];
      for (size_t e = 0; e < src.episodes.size(); ++e) {
        const auto& ep = src.episodes[e];
        for (int t = 0; t + ctx_ <= ep.length(); ++t) {
          if (labelled_only) {
            bool ok = true;
            for (int i = t; i < t + ctx_; ++i)
              if (ep.actions[static_cast<size_t>(i)] == kNoAction) { ok = false; break; }
            if (!ok) continue;
          }
          windows.push_back({static_cast<int>(s), static_cast<int>(e), t});
        }
      }
    }
    require(!windows.empty(), "no eligible context window");
    pool_.build(data, static_cast<int>(data.sources.size()), env_weights, std::move(windows));
  }

  size_t eligible_count() const { return pool_.count(); }
  const std::vector<WindowRef>& eligible_windows() const { return pool_.windows(); }

  DtBatch draw(int batch_size) {
    DtBatch b;
    b.size = batch_size;
    b.timesteps = ctx_;
    b.states.resize(batch_size, ctx_);
    b.returns.resize(batch_size, ctx_);
    b.rewards.resize(batch_size, ctx_);
    b.action_inputs.resize(batch_size, ctx_);
    b.action_labels.resize(batch_size, ctx_);
    b.label_present.resize(batch_size, ctx_);
    b.next_states.resize(batch_size, ctx_);
    b.source_of_row.resize(static_cast<size_t>(batch_size));
    b.window_of_row.resize(static_cast<size_t>(batch_size));
    for (int r = 0; r < batch_size; ++r) {
      const WindowRef& w = pool_.draw(rng_);
      const auto& src = data_->sources[static_cast<size_t>(w.source)];
      const auto& ep = src.episodes[static_cast<size_t>(w.episode)];
      const auto& map = data_->local_to_global[static_cast<size_t>(w.source)];
      b.source_of_row[static_cast<size_t>(r)] = w.source;
      b.window_of_row[static_cast<size_t>(r)] = w;
      int ext = src.extended_length(ep);
      for (int i = 0; i < ctx_; ++i) {
        int t = w.start + i;
        b.states(r, i) = static_cast<int32_t>(ep.states[static_cast<size_t>(t)]);
        b.returns(r, i) = bin_of(ep.returns_to_go[static_cast<size_t>(t)], return_bins_);
        b.rewards(r, i) = bin_of(ep.rewards[static_cast<size_t>(t)], reward_bins_);
        int32_t a = ep.actions[static_cast<size_t>(t)];
        int32_t g = (a == kNoAction) ? kNoAction : map[static_cast<size_t>(a)];
        b.action_inputs(r, i) =
            (g == kNoAction) ? static_cast<int32_t>(data_->placeholder_action_id()) : g;
        b.action_labels(r, i) = g;
        b.label_present(r, i) = (g == kNoAction) ? 0 : 1;
        b.next_states(r, i) =
            (t + 1 <= ext - 1) ? static_cast<int32_t>(src.extended_state(ep, t + 1)) : kNoAction;
      }
    }
    return b;
  }

 private:
  const MergedDataset* data_;
  int ctx_;
  int return_bins_;
  int reward_bins_;
  Rng rng_;
  detail::WindowPool pool_;
};

}  // namespace alpt
