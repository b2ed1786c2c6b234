#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alpt/dataset.hpp"
#include "alpt/error.hpp"
#include "alpt/model.hpp"
#include "alpt/optimizer.hpp"
#include "alpt/rng.hpp"

namespace alpt {

// ---------------------------------------------------------------------------
// Regimes
// ---------------------------------------------------------------------------

// Which data each model sees, and in which stages:
//   ALPT               - IDM on all labelled data, DT on everything with IDM
//                        pseudo-labels filling the unlabelled positions.
//   ALPT_NoDTPretrain  - ablation: the first stage trains only the IDM, the
//                        DT starts learning in the second stage.
//   DT1                - DT alone, trained only on the labelled target slice.
//   DT1_IDM            - IDM and DT trained only on target data (IDM from the
//                        labelled slice, DT on everything with pseudo-labels).
//   DT5                - DT alone on all labelled data; unlabelled data unused.
//   DT5_RET            - DT5 plus return-prediction training on the unlabelled
//                        target data with the action term masked out there.
enum class Regime : uint8_t {
  ALPT = 0,
  ALPT_NoDTPretrain = 1,
  DT1 = 2,
  DT1_IDM = 3,
  DT5 = 4,
  DT5_RET = 5,
};

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::ALPT: return "alpt";
    case Regime::ALPT_NoDTPretrain: return "alpt-no-dt-pretrain";
    case Regime::DT1: return "dt1";
    case Regime::DT1_IDM: return "dt1-idm";
    case Regime::DT5: return "dt5";
    case Regime::DT5_RET: return "dt5-ret";
  }
  throw Error(ErrorCategory::Precondition, "unknown regime");
}

inline Regime regime_from_name(const std::string& name) {
  for (Regime r : {Regime::ALPT, Regime::ALPT_NoDTPretrain, Regime::DT1, Regime::DT1_IDM,
                   Regime::DT5, Regime::DT5_RET}) {
    if (name == regime_name(r)) return r;
  }
  throw Error(ErrorCategory::Usage, "unknown regime name: " + name);
}

inline bool uses_idm(Regime r) {
  return r == Regime::ALPT || r == Regime::ALPT_NoDTPretrain || r == Regime::DT1_IDM;
}

inline bool uses_pretraining(Regime r) {
  return r == Regime::ALPT || r == Regime::ALPT_NoDTPretrain || r == Regime::DT5 ||
         r == Regime::DT5_RET;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class PseudoLabelMode : uint8_t { Argmax = 0, Sample = 1 };

// Labels are recomputed from the live IDM for every batch; there is no cached
// labelling pass, so the DT always sees the current IDM's opinion.
struct PseudoLabelPolicy {
  PseudoLabelMode mode = PseudoLabelMode::Argmax;
};

struct ModelHP {
  int layers = 2;
  int heads = 4;
  int hidden = 128;
  int ffn_hidden = 0;  // 0 -> 4*hidden
  int context_timesteps = 5;
  int idm_k = 5;
};

struct RunConfig {
  Regime regime = Regime::ALPT;
  std::vector<TrajectoryDataset> sources;  // fully labelled
  TrajectoryDataset target_labelled;       // D+
  TrajectoryDataset target_unlabelled;     // D-, may hold zero episodes
  int pretrain_steps = 0;
  int finetune_steps = 0;
  int eval_every = 500;
  uint64_t seed = 0;
  OptimizerConfig optimizer;
  ModelHP model;
  PseudoLabelPolicy pseudo;
  // Optional per-source emphasis multiplier on the default window-share
  // weighting; empty means every source keeps its natural share.
  std::vector<double> source_weights;
  // 0 = derive the bin counts from the data.
  int return_bins = 0;
  int reward_bins = 0;

  void validate() const {
    optimizer.validate();
    require(pretrain_steps >= 0 && finetune_steps >= 0, "step counts must be non-negative");
    require(optimizer.warmup_steps <= pretrain_steps + finetune_steps,
            "warmup exceeds the total step budget");
    if (!uses_pretraining(regime)) {
      require(pretrain_steps == 0,
              std::string("regime ") + regime_name(regime) + " has no pretraining stage");
    }
    require(eval_every >= 1, "eval_every must be positive");
    require(model.layers >= 1 && model.heads >= 1 && model.hidden >= model.heads,
            "degenerate model shape");
    require(model.context_timesteps >= 1, "context must be at least one timestep");
    if (uses_idm(regime)) {
      require(model.idm_k >= 1, "IDM window length must be positive");
      require(model.context_timesteps >= model.idm_k,
              "pseudo-labelling needs context_timesteps >= idm_k");
    }
    for (const TrajectoryDataset& src : sources) {
      require(src.labelled_transitions() == src.total_transitions(),
              "source dataset '" + src.env_id + "' is not fully labelled");
    }
    require(target_unlabelled.labelled_transitions() == 0,
            "the unlabelled target dataset still carries action labels");
    require(!target_labelled.episodes.empty(), "labelled target dataset is empty");
    require(source_weights.empty() || source_weights.size() == sources.size(),
            "one emphasis weight per source dataset required");
    for (double w : source_weights) require(w >= 0.0, "emphasis weights must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Pseudo-labelling
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
int32_t pick_action(const Mat<S>& logits, Eigen::Index row, PseudoLabelMode mode, Rng* rng) {
  if (mode == PseudoLabelMode::Argmax) return argmax_lowest(logits, row);
  require(rng != nullptr, "sampled pseudo-labels need a random stream");
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

}  // namespace detail

// One window of k+1 states -> k action ids, straight from the IDM logits.
template <typename S>
std::vector<int32_t> pseudo_label(const TransformerParams<S>& idm,
                                  const std::vector<uint32_t>& states,
                                  const PseudoLabelPolicy& policy = {}, Rng* rng = nullptr) {
  const auto& cfg = idm.config;
  require(cfg.kind == ModelKind::Idm, "pseudo-labelling needs an inverse dynamics model");
  require(static_cast<int>(states.size()) == cfg.context_tokens,
          "window must hold exactly k+1 states");
  const int k = cfg.context_tokens - 1;
  MatXi s(1, k + 1);
  for (int i = 0; i <= k; ++i) s(0, i) = static_cast<int32_t>(states[static_cast<size_t>(i)]);
  IdmOut<S> out = idm_forward(idm, s);
  std::vector<int32_t> labels(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    labels[static_cast<size_t>(i)] = detail::pick_action(out.logits, i, policy.mode, rng);
  return labels;
}

// Fills the unlabelled positions of a DT batch with IDM labels, in place:
// action_labels and action_inputs get the predicted id and label_present is
// raised, so the positions train exactly like labelled ones.  True labels are
// never touched.  A final position whose successor state is unknown stays
// unlabelled (weight zero in the loss).
//
// Rows are covered by sliding IDM windows advancing k positions at a time,
// with the last window right-aligned; on overlap the later window wins.
template <typename S>
void pseudo_label_batch(const TransformerParams<S>& idm, DtBatch& batch,
                        const PseudoLabelPolicy& policy = {}, Rng* rng = nullptr) {
  const auto& cfg = idm.config;
  require(cfg.kind == ModelKind::Idm, "pseudo-labelling needs an inverse dynamics model");
  const int k = cfg.context_tokens - 1;
  const int B = batch.size, T = batch.timesteps;

  struct Chunk {
    int row;
    int start;
  };
  std::vector<Chunk> chunks;
  for (int r = 0; r < B; ++r) {
    // Positions 0..labelable-1 have a known successor state.
    const int labelable = batch.next_states(r, T - 1) == kNoAction ? T - 1 : T;
    if (labelable < k) continue;
    for (int s = 0;; s += k) {
      int cs = std::min(s, labelable - k);
      chunks.push_back({r, cs});
      if (cs + k >= labelable) break;
    }
  }
  if (chunks.empty()) return;

  MatXi states(static_cast<Eigen::Index>(chunks.size()), k + 1);
  for (size_t c = 0; c < chunks.size(); ++c) {
    for (int i = 0; i <= k; ++i) {
      int t = chunks[c].start + i;
      states(static_cast<Eigen::Index>(c), i) =
          t < T ? batch.states(chunks[c].row, t) : batch.next_states(chunks[c].row, T - 1);
    }
  }
  IdmOut<S> out = idm_forward(idm, states);

  for (size_t c = 0; c < chunks.size(); ++c) {
    for (int i = 0; i < k; ++i) {
      const int r = chunks[c].row, t = chunks[c].start + i;
      if (batch.label_present(r, t) == 1 && batch.action_labels(r, t) != kNoAction) continue;
      Eigen::Index lrow = static_cast<Eigen::Index>(c) * k + i;
      int32_t a = detail::pick_action(out.logits, lrow, policy.mode, rng);
      batch.action_labels(r, t) = a;
      batch.action_inputs(r, t) = a;
      batch.label_present(r, t) = 1;
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string stage;  // "pretrain" or "finetune"
  int step = 0;       // 1-based within the stage
  double idm_loss = std::numeric_limits<double>::quiet_NaN();
  double dt_loss = std::numeric_limits<double>::quiet_NaN();
  double dt_return_loss = std::numeric_limits<double>::quiet_NaN();
  double dt_action_loss = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  double wall_seconds = 0;
};

// Which datasets each model trains on during one stage, as inclusion flags
// over the merged source list (sources..., target labelled, target unlabelled).
struct StagePlan {
  bool pretrain_stage = false;
  bool train_idm = false;
  bool train_dt = false;
  bool pseudo_labels = false;     // DT batches get IDM labels before the step
  bool dt_labelled_only = false;  // DT draws only fully labelled windows
  std::vector<char> idm_include;
  std::vector<char> dt_include;
};

template <typename S>
class Trainer {
 public:
  explicit Trainer(RunConfig run) : run_(std::move(run)) {
    run_.validate();
    std::vector<TrajectoryDataset> all = run_.sources;
    all.push_back(run_.target_labelled);
    all.push_back(run_.target_unlabelled);
    data_ = merge(all);
    plus_index_ = static_cast<int>(run_.sources.size());
    minus_index_ = plus_index_ + 1;

    derive_token_space();
    dt_cfg_ = base_config();
    dt_cfg_.kind = ModelKind::Dt;
    dt_cfg_.mask = MaskKind::Causal;
    dt_cfg_.context_tokens = 4 * run_.model.context_timesteps;
    dt_cfg_.seed = derive_seed(run_.seed, 0x647468ull);
    dt_cfg_.validate();
    dt_params_ = init_params<S>(dt_cfg_);

    if (uses_idm(run_.regime)) {
      idm_cfg_ = base_config();
      idm_cfg_.kind = ModelKind::Idm;
      idm_cfg_.mask = MaskKind::Full;
      idm_cfg_.context_tokens = run_.model.idm_k + 1;
      idm_cfg_.seed = derive_seed(run_.seed, 0x626574ull);
      idm_cfg_.validate();
      idm_params_ = init_params<S>(idm_cfg_);
    }
  }

  // Stage drivers.  pretrain() is only defined for regimes that have a
  // pretraining stage; both are no-ops when their step budget is zero.
  std::vector<MetricRow> pretrain() {
    require(uses_pretraining(run_.regime),
            std::string("regime ") + regime_name(run_.regime) + " has no pretraining stage");
    return run_stage("pretrain", run_.pretrain_steps, plan(true), 0x7072ull);
  }

  std::vector<MetricRow> finetune() {
    return run_stage("finetune", run_.finetune_steps, plan(false), 0x6669ull);
  }

  std::vector<MetricRow> run_all() {
    std::vector<MetricRow> rows;
    if (uses_pretraining(run_.regime)) {
      std::vector<MetricRow> r = pretrain();
      rows.insert(rows.end(), r.begin(), r.end());
    }
    std::vector<MetricRow> r = finetune();
    rows.insert(rows.end(), r.begin(), r.end());
    return rows;
  }

  StagePlan plan(bool pretrain_stage) const {
    const int n = static_cast<int>(data_.sources.size());
    StagePlan p;
    p.pretrain_stage = pretrain_stage;
    p.idm_include.assign(static_cast<size_t>(n), 0);
    p.dt_include.assign(static_cast<size_t>(n), 0);
    auto include = [&](std::vector<char>& v, bool srcs, bool plus, bool minus) {
      for (int s = 0; s < plus_index_; ++s) v[static_cast<size_t>(s)] = srcs ? 1 : 0;
      v[static_cast<size_t>(plus_index_)] = plus ? 1 : 0;
      v[static_cast<size_t>(minus_index_)] = minus ? 1 : 0;
    };
    if (pretrain_stage) {
      require(uses_pretraining(run_.regime), "regime has no pretraining stage");
      switch (run_.regime) {
        case Regime::ALPT:
          p.train_idm = true;
          p.train_dt = true;
          p.pseudo_labels = true;
          include(p.idm_include, true, true, false);
          include(p.dt_include, true, true, true);
          break;
        case Regime::ALPT_NoDTPretrain:
          p.train_idm = true;
          include(p.idm_include, true, true, false);
          break;
        case Regime::DT5:
          p.train_dt = true;
          p.dt_labelled_only = true;
          include(p.dt_include, true, true, false);
          break;
        case Regime::DT5_RET:
          p.train_dt = true;
          include(p.dt_include, true, true, true);
          break;
        default:
          break;
      }
      return p;
    }
    switch (run_.regime) {
      case Regime::ALPT:
      case Regime::ALPT_NoDTPretrain:
      case Regime::DT1_IDM:
        p.train_idm = true;
        p.train_dt = true;
        p.pseudo_labels = true;
        include(p.idm_include, false, true, false);
        include(p.dt_include, false, true, true);
        break;
      case Regime::DT1:
      case Regime::DT5:
        p.train_dt = true;
        p.dt_labelled_only = true;
        include(p.dt_include, false, true, false);
        break;
      case Regime::DT5_RET:
        p.train_dt = true;
        include(p.dt_include, false, true, true);
        break;
    }
    return p;
  }

  bool has_idm() const { return idm_params_.has_value(); }
  const TransformerParams<S>& idm_params() const {
    require(has_idm(), "this regime has no inverse dynamics model");
    return *idm_params_;
  }
  const TransformerParams<S>& dt_params() const { return dt_params_; }
  const TransformerConfig& dt_config() const { return dt_cfg_; }
  const TransformerConfig& idm_config() const {
    require(has_idm(), "this regime has no inverse dynamics model");
    return idm_cfg_;
  }
  const MergedDataset& data() const { return data_; }
  const RunConfig& run() const { return run_; }

  // Optional observers, all invoked synchronously from the stage loop.
  std::function<void(const MetricRow&)> metric_sink;
  std::function<void(const std::string& stage, int step)> eval_hook;
  // Test seam: replaces the IDM pseudo-labeller for DT batches.
  std::function<void(DtBatch&)> label_hook;

 private:
  TransformerConfig base_config() const {
    TransformerConfig cfg;
    cfg.layers = run_.model.layers;
    cfg.heads = run_.model.heads;
    cfg.hidden = run_.model.hidden;
    cfg.ffn_hidden = run_.model.ffn_hidden;
    cfg.state_vocab = state_vocab_;
    cfg.state_factor = state_factor_;
    cfg.action_vocab = static_cast<int>(data_.global_action_vocab.size());
    cfg.return_bins = return_bins_;
    cfg.reward_bins = reward_bins_;
    return cfg;
  }

  // Token-space bounds from the data.  Same-shaped gridworlds share the
  // (agent, goal) token layout, so the embedding factorizes over cells; any
  // other mix falls back to one monolithic table large enough for every
  // token, including the synthesized terminal (goal, goal) tokens.
  void derive_token_space() {
    bool factorizable = true;
    int width = 0, height = 0;
    bool first = true;
    for (const TrajectoryDataset& d : data_.sources) {
      if (d.episodes.empty()) continue;
      if (d.env_width <= 0 || d.env_height <= 0) {
        factorizable = false;
        break;
      }
      if (first) {
        width = d.env_width;
        height = d.env_height;
        first = false;
      } else if (d.env_width != width || d.env_height != height) {
        factorizable = false;
        break;
      }
    }
    if (factorizable && !first) {
      state_factor_ = width * height;
      state_vocab_ = 0;
    } else {
      state_factor_ = 0;
      int64_t bound = 0;
      for (const TrajectoryDataset& d : data_.sources) {
        if (d.env_width > 0 && d.env_height > 0) {
          int64_t cells = static_cast<int64_t>(d.env_width) * d.env_height;
          bound = std::max(bound, cells * cells);
        } else {
          for (const Episode& ep : d.episodes)
            for (uint32_t s : ep.states)
              bound = std::max(bound, static_cast<int64_t>(s) + 1);
        }
      }
      require(bound > 0, "no state token observed in any dataset");
      state_vocab_ = static_cast<int>(bound);
    }

    auto bins_from = [&](auto&& field_max) {
      int64_t top = 1;
      for (const TrajectoryDataset& d : data_.sources)
        for (const Episode& ep : d.episodes) top = std::max(top, field_max(ep));
      return static_cast<int>(top + 1);
    };
    return_bins_ = run_.return_bins > 0 ? run_.return_bins : bins_from([](const Episode& ep) {
      int64_t m = 1;
      for (float g : ep.returns_to_go) m = std::max<int64_t>(m, std::lround(g));
      return m;
    });
    reward_bins_ = run_.reward_bins > 0 ? run_.reward_bins : bins_from([](const Episode& ep) {
      int64_t m = 1;
      for (float r : ep.rewards) m = std::max<int64_t>(m, std::lround(r));
      return m;
    });
  }

  // Sampling weights that keep the included subset window-uniform: each
  // source's weight is its eligible-window count, times the configured
  // emphasis for real sources.
  std::vector<double> subset_weights(const std::vector<char>& include,
                                     const std::vector<size_t>& window_counts) const {
    std::vector<double> w(include.size(), 0.0);
    double sum = 0;
    for (size_t s = 0; s < include.size(); ++s) {
      if (!include[s]) continue;
      double ws = static_cast<double>(window_counts[s]);
      if (static_cast<int>(s) < plus_index_ && !run_.source_weights.empty())
        ws *= run_.source_weights[s];
      w[s] = ws;
      sum += ws;
    }
    require(sum > 0, "no trainable window in the included datasets");
    return w;
  }

  template <typename Sampler>
  std::vector<size_t> count_windows(const Sampler& probe) const {
    std::vector<size_t> counts(data_.sources.size(), 0);
    for (const WindowRef& w : probe.eligible_windows())
      counts[static_cast<size_t>(w.source)]++;
    return counts;
  }

  std::vector<MetricRow> run_stage(const char* name, int steps, const StagePlan& sp,
                                   uint64_t salt) {
    std::vector<MetricRow> rows;
    if (steps <= 0) return rows;

    const int B = run_.optimizer.batch_size;
    const int k = run_.model.idm_k;
    const int ctx = run_.model.context_timesteps;

    std::optional<IdmSampler> idm_sampler;
    std::optional<DtSampler> dt_sampler;
    std::optional<OptimizerState<S>> idm_opt;
    std::optional<OptimizerState<S>> dt_opt;
    TransformerParams<S> idm_grads = has_idm() ? zero_like(*idm_params_) : TransformerParams<S>{};
    TransformerParams<S> dt_grads = zero_like(dt_params_);

    if (sp.train_idm) {
      require(has_idm(), "stage plan trains an IDM this regime does not have");
      uint64_t seed = derive_seed(run_.seed, salt ^ 0x69646d00ull);
      IdmSampler probe(data_, k, true, seed);
      idm_sampler.emplace(data_, k, true, seed, subset_weights(sp.idm_include, count_windows(probe)));
      idm_opt.emplace(make_optimizer_state(*idm_params_));
    }
    if (sp.train_dt) {
      uint64_t seed = derive_seed(run_.seed, salt ^ 0x64740000ull);
      DtSampler probe(data_, ctx, sp.dt_labelled_only, return_bins_, reward_bins_, seed);
      dt_sampler.emplace(data_, ctx, sp.dt_labelled_only, return_bins_, reward_bins_, seed,
                         subset_weights(sp.dt_include, count_windows(probe)));
      dt_opt.emplace(make_optimizer_state(dt_params_));
    }
    Rng sample_rng(derive_seed(run_.seed, salt ^ 0x736d7000ull));

    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 1; step <= steps; ++step) {
      MetricRow row;
      row.stage = name;
      row.step = step;

      if (sp.train_idm) {
        IdmBatch batch = idm_sampler->draw(B);
        zero_params(idm_grads);
        LossReport rep = idm_backward(*idm_params_, batch, idm_grads);
        lamb_step(*idm_params_, idm_grads, *idm_opt, run_.optimizer);
        row.idm_loss = rep.total;
        row.lr = lr_schedule(idm_opt->step, run_.optimizer);
      }
      if (sp.train_dt) {
        DtBatch batch = dt_sampler->draw(B);
        if (label_hook) {
          label_hook(batch);
        } else if (sp.pseudo_labels) {
          pseudo_label_batch(*idm_params_, batch, run_.pseudo, &sample_rng);
        }
        zero_params(dt_grads);
        LossReport rep = dt_backward(dt_params_, batch, dt_grads);
        lamb_step(dt_params_, dt_grads, *dt_opt, run_.optimizer);
        row.dt_loss = rep.total;
        row.dt_return_loss = rep.ret;
        row.dt_action_loss = rep.action;
        row.lr = lr_schedule(dt_opt->step, run_.optimizer);
      }

      if (step % run_.eval_every == 0 || step == steps) {
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows.push_back(row);
        if (metric_sink) metric_sink(row);
        if (eval_hook) eval_hook(name, step);
      }
    }
    return rows;
  }

  RunConfig run_;
  MergedDataset data_;
  int plus_index_ = 0;
  int minus_index_ = 0;
  int state_vocab_ = 0;
  int state_factor_ = 0;
  int return_bins_ = 2;
  int reward_bins_ = 2;
  TransformerConfig dt_cfg_;
  TransformerConfig idm_cfg_;
  TransformerParams<S> dt_params_;
  std::optional<TransformerParams<S>> idm_params_;
};

}  // namespace alpt
