#pragma once

// Shared helpers for exercising the transformer in tests: tiny configs,
// parameter randomization (the default init zeroes heads, which makes many
// sensitivity probes vacuous), random batches, and a finite-difference
// gradient comparison.

#include <cmath>
#include <string>
#include <vector>

#include "alpt/dataset.hpp"
#include "alpt/model.hpp"
#include "alpt/rng.hpp"

namespace alpt::testutil {

inline TransformerConfig small_dt_config(uint64_t seed = 1) {
  TransformerConfig cfg;
  cfg.kind = ModelKind::Dt;
  cfg.mask = MaskKind::Causal;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.ffn_hidden = 32;
  cfg.context_tokens = 20;
  cfg.state_vocab = 30;
  cfg.action_vocab = 4;
  cfg.return_bins = 2;
  cfg.reward_bins = 2;
  cfg.seed = seed;
  return cfg;
}

inline TransformerConfig small_idm_config(uint64_t seed = 2) {
  TransformerConfig cfg;
  cfg.kind = ModelKind::Idm;
  cfg.mask = MaskKind::Full;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.ffn_hidden = 32;
  cfg.context_tokens = 6;
  cfg.state_vocab = 30;
  cfg.action_vocab = 4;
  cfg.seed = seed;
  return cfg;
}

// Adds noise to every tensor (heads and biases included) so that no
// gradient path is structurally zero.
template <typename S>
void randomize_params(TransformerParams<S>& p, uint64_t seed, double sigma = 0.05) {
  Rng rng(seed);
  visit_params(p, [&](const std::string&, Mat<S>& t) {
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j)
        t(i, j) += static_cast<S>(rng.next_gaussian() * sigma);
  });
}

inline DtBatch random_dt_batch(const TransformerConfig& cfg, int batch, int timesteps,
                               uint64_t seed) {
  DtBatch b;
  b.size = batch;
  b.timesteps = timesteps;
  auto fill = [&](MatXi& m, int lo, int hi, Rng& rng) {
    m.resize(batch, timesteps);
    for (int r = 0; r < batch; ++r)
      for (int t = 0; t < timesteps; ++t) m(r, t) = rng.next_int(lo, hi);
  };
  Rng rng(seed);
  fill(b.states, 0, cfg.state_tokens() - 1, rng);
  fill(b.returns, 0, cfg.return_bins - 1, rng);
  fill(b.rewards, 0, cfg.reward_bins - 1, rng);
  fill(b.action_inputs, 0, cfg.action_vocab - 1, rng);
  b.action_labels = b.action_inputs;
  b.label_present = MatXi::Ones(batch, timesteps);
  b.next_states = MatXi::Constant(batch, timesteps, kNoAction);
  b.source_of_row.assign(static_cast<size_t>(batch), 0);
  return b;
}

inline IdmBatch random_idm_batch(const TransformerConfig& cfg, int batch, int k,
                                 uint64_t seed) {
  IdmBatch b;
  b.size = batch;
  b.k = k;
  Rng rng(seed);
  b.states.resize(batch, k + 1);
  b.actions.resize(batch, k);
  for (int r = 0; r < batch; ++r) {
    for (int i = 0; i <= k; ++i) b.states(r, i) = rng.next_int(0, cfg.state_tokens() - 1);
    for (int i = 0; i < k; ++i) b.actions(r, i) = rng.next_int(0, cfg.action_vocab - 1);
  }
  b.source_of_row.assign(static_cast<size_t>(batch), 0);
  return b;
}

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0;
  std::string worst_coord;
};

// Central finite differences against the analytic gradient on a sample of
// coordinates from every tensor. loss_fn must evaluate the loss at the
// current parameter values.
template <typename LossFn>
GradCheckResult gradcheck(TransformerParams<double>& params,
                          const TransformerParams<double>& grads, LossFn&& loss_fn,
                          int coords_per_tensor, uint64_t seed, double step = 1e-3,
                          double tol = 1e-4) {
  GradCheckResult res;
  Rng rng(seed);
  std::vector<std::pair<std::string, Mat<double>*>> tensors;
  visit_params(params, [&](const std::string& name, Mat<double>& t) {
    tensors.emplace_back(name, &t);
  });
  std::vector<std::pair<std::string, const Mat<double>*>> gtensors;
  visit_params(grads, [&](const std::string& name, const Mat<double>& t) {
    gtensors.emplace_back(name, &t);
  });

  for (size_t ti = 0; ti < tensors.size(); ++ti) {
    Mat<double>& t = *tensors[ti].second;
    const Mat<double>& g = *gtensors[ti].second;
    for (int c = 0; c < coords_per_tensor; ++c) {
      Eigen::Index i = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(t.rows())));
      Eigen::Index j = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(t.cols())));
      double keep = t(i, j);
      t(i, j) = keep + step;
      double up = loss_fn();
      t(i, j) = keep - step;
      double down = loss_fn();
      t(i, j) = keep;
      double fd = (up - down) / (2 * step);
      double an = g(i, j);
      double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
      ++res.checked;
      if (rel > res.worst_rel) {
        res.worst_rel = rel;
        res.worst_coord = tensors[ti].first + "(" + std::to_string(i) + "," +
                          std::to_string(j) + ")";
      }
      if (rel > tol) ++res.failed;
    }
  }
  return res;
}

}  // namespace alpt::testutil
