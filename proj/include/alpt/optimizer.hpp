#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "alpt/error.hpp"
#include "alpt/model.hpp"

namespace alpt {

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double weight_decay = 5e-5;
  double gradient_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int warmup_steps = 4000;
  int batch_size = 256;
  // Denominator guard in the adaptive update; not a tunable in practice.
  double epsilon = 1e-6;

  // Weight decay may be zero (decay-free training is legal); everything else
  // must be strictly positive, and the betas must leave the bias correction
  // well defined.  "warmup <= total steps" is checked where the step budget
  // is known, i.e. on the run configuration.
  void validate() const {
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(gradient_clip > 0.0, "gradient_clip must be positive");
    require(beta1 > 0.0 && beta1 < 1.0, "beta1 must lie in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "beta2 must lie in (0, 1)");
    require(warmup_steps >= 1, "warmup_steps must be positive");
    require(batch_size >= 1, "batch_size must be positive");
    require(epsilon > 0.0, "epsilon must be positive");
  }
};

// Linear ramp from 0 to the configured rate over the warmup window, constant
// afterwards.  Step counts completed optimizer updates, so the first update
// (step 1) already moves the parameters a little.
inline double lr_schedule(uint64_t step, const OptimizerConfig& config) {
  if (step >= static_cast<uint64_t>(config.warmup_steps)) {
    return config.learning_rate;
  }
  return config.learning_rate *
         (static_cast<double>(step) / static_cast<double>(config.warmup_steps));
}

// First/second moment accumulators, index-aligned with the parameter
// traversal order that produced them.
template <typename S>
struct OptimizerState {
  uint64_t step = 0;
  std::vector<Mat<S>> m;
  std::vector<Mat<S>> v;
};

// One named parameter tensor paired with its gradient.  The optimizer core
// works on these lists so that tiny hand-checkable problems can drive it the
// same way full models do.
template <typename S>
struct TensorRef {
  std::string name;
  Mat<S>* value = nullptr;
  const Mat<S>* grad = nullptr;
};

template <typename S>
std::vector<TensorRef<S>> tensor_refs(TransformerParams<S>& params,
                                      const TransformerParams<S>& grads) {
  std::vector<TensorRef<S>> out;
  visit_params(params, [&](const std::string& name, Mat<S>& t) {
    out.push_back(TensorRef<S>{name, &t, nullptr});
  });
  std::size_t i = 0;
  visit_params(grads, [&](const std::string& name, const Mat<S>& t) {
    require(i < out.size() && out[i].name == name, ErrorCategory::Precondition, "parameter/gradient traversal mismatch at '" + name + "'");
    out[i].grad = &t;
    ++i;
  });
  require(i == out.size(), ErrorCategory::Precondition, "gradient traversal shorter than parameter list");
  return out;
}

template <typename S>
OptimizerState<S> make_optimizer_state(const std::vector<TensorRef<S>>& tensors) {
  OptimizerState<S> st;
  st.m.reserve(tensors.size());
  st.v.reserve(tensors.size());
  for (const TensorRef<S>& t : tensors) {
    st.m.push_back(Mat<S>::Zero(t.value->rows(), t.value->cols()));
    st.v.push_back(Mat<S>::Zero(t.value->rows(), t.value->cols()));
  }
  return st;
}

template <typename S>
OptimizerState<S> make_optimizer_state(const TransformerParams<S>& params) {
  OptimizerState<S> st;
  visit_params(params, [&](const std::string&, const Mat<S>& t) {
    st.m.push_back(Mat<S>::Zero(t.rows(), t.cols()));
    st.v.push_back(Mat<S>::Zero(t.rows(), t.cols()));
  });
  return st;
}

// Euclidean norm over the concatenation of all gradients, accumulated at
// double precision regardless of the scalar type.
template <typename S>
double global_grad_norm(const std::vector<TensorRef<S>>& tensors) {
  double sq = 0.0;
  for (const TensorRef<S>& t : tensors) {
    sq += static_cast<double>(t.grad->squaredNorm());
  }
  return std::sqrt(sq);
}

// One LAMB update, in place.  Order of operations: reject non-finite
// gradients, clip by global norm, advance the step counter, then per tensor
// update the moments, bias-correct, add decoupled weight decay, and scale the
// step by the trust ratio |w| / |update| (1 when either norm vanishes).
template <typename S>
void lamb_step(const std::vector<TensorRef<S>>& tensors, OptimizerState<S>& state,
               const OptimizerConfig& config) {
  config.validate();
  require(state.m.size() == tensors.size() && state.v.size() == tensors.size(), ErrorCategory::Precondition, "optimizer state does not match parameter list");
  for (const TensorRef<S>& t : tensors) {
    require(t.grad->allFinite(), ErrorCategory::Numeric, "non-finite gradient in tensor '" + t.name + "'");
    require(t.grad->rows() == t.value->rows() && t.grad->cols() == t.value->cols(), ErrorCategory::Precondition, "gradient shape mismatch in tensor '" + t.name + "'");
  }

  const double norm = global_grad_norm(tensors);
  const double scale =
      norm > config.gradient_clip ? config.gradient_clip / norm : 1.0;

  state.step += 1;
  const double lr = lr_schedule(state.step, config);
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Mat<S>& w = *tensors[i].value;
    Mat<S>& m = state.m[i];
    Mat<S>& v = state.v[i];
    require(m.rows() == w.rows() && m.cols() == w.cols(), ErrorCategory::Precondition, "optimizer state shape mismatch in tensor '" + tensors[i].name + "'");

    const auto g = tensors[i].grad->array() * static_cast<S>(scale);
    m.array() = static_cast<S>(config.beta1) * m.array() +
                static_cast<S>(1.0 - config.beta1) * g;
    v.array() = static_cast<S>(config.beta2) * v.array() +
                static_cast<S>(1.0 - config.beta2) * g.square();

    Mat<S> update =
        ((m.array() / static_cast<S>(bc1)) /
             ((v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(config.epsilon)) +
         static_cast<S>(config.weight_decay) * w.array())
            .matrix();

    const double w_norm = static_cast<double>(w.norm());
    const double u_norm = static_cast<double>(update.norm());
    const double trust = (w_norm == 0.0 || u_norm == 0.0) ? 1.0 : w_norm / u_norm;
    w.noalias() -= static_cast<S>(lr * trust) * update;
  }
}

template <typename S>
void lamb_step(TransformerParams<S>& params, const TransformerParams<S>& grads,
               OptimizerState<S>& state, const OptimizerConfig& config) {
  lamb_step(tensor_refs(params, grads), state, config);
}

}  // namespace alpt
