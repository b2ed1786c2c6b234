#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "alpt/binio.hpp"
#include "alpt/dataset.hpp"
#include "alpt/error.hpp"
#include "alpt/rng.hpp"

namespace alpt {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class MaskKind : uint8_t { Causal = 0, Full = 1 };
enum class ModelKind : uint8_t { Idm = 0, Dt = 1 };

// Allow-mask: entry (i, j) is 1 when position i may attend to position j.
inline MatXi build_attention_mask(MaskKind kind, int length) {
  require(length >= 1, "mask length must be positive");
  MatXi m(length, length);
  for (int i = 0; i < length; ++i)
    for (int j = 0; j < length; ++j)
      m(i, j) = (kind == MaskKind::Full || j <= i) ? 1 : 0;
  return m;
}

struct TransformerConfig {
  ModelKind kind = ModelKind::Dt;
  MaskKind mask = MaskKind::Causal;
  int layers = 2;
  int heads = 4;
  int hidden = 128;
  int ffn_hidden = 0;  // 0 -> 4*hidden
  int context_tokens = 20;
  // Exactly one state embedding scheme: a monolithic table over state_vocab
  // ids, or two factor tables (agent cell + goal cell) when state_factor is
  // the grid cell count. Factorization keeps gridworld tables small and lets
  // structure transfer across (agent, goal) pairs never seen together.
  int state_vocab = 0;
  int state_factor = 0;
  int action_vocab = 4;
  int return_bins = 2;
  int reward_bins = 2;
  uint64_t seed = 0;

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * hidden; }
  int head_dim() const { return hidden / heads; }
  // input action table has one extra row: the unlabelled-action placeholder
  int action_input_rows() const { return action_vocab + 1; }
  int state_tokens() const {
    return state_factor > 0 ? state_factor * state_factor : state_vocab;
  }

  void validate() const {
    require(layers >= 1 && heads >= 1 && hidden >= heads, "degenerate transformer shape");
    require(hidden % heads == 0, "hidden size must divide evenly across heads");
    require(context_tokens >= 1, "context must hold at least one token");
    require((state_vocab > 0) != (state_factor > 0),
            "exactly one of state_vocab / state_factor must be set");
    require(action_vocab >= 1 && return_bins >= 1 && reward_bins >= 1,
            "vocabulary sizes must be positive");
  }
};

template <typename S>
struct LayerParams {
  Mat<S> ln1_g, ln1_b;
  Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<S> ln2_g, ln2_b;
  Mat<S> w1, b1, w2, b2;
};

template <typename S>
struct TransformerParams {
  TransformerConfig config;
  Mat<S> state_embed;                // [state_vocab, H] when monolithic
  Mat<S> agent_embed, goal_embed;    // [state_factor, H] when factorized
  Mat<S> return_embed, action_embed, reward_embed;  // DT input tables
  Mat<S> pos_embed;                  // [context_tokens, H]
  std::vector<LayerParams<S>> layers;
  Mat<S> lnf_g, lnf_b;
  Mat<S> action_head_w, action_head_b;
  Mat<S> return_head_w, return_head_b;  // DT only
};

// Calls fn(name, tensor) for every allocated parameter tensor, in a fixed
// order. The order defines initialization draws, checkpoint layout, and the
// optimizer's per-tensor trust ratios.
template <typename S, typename P, typename F>
void visit_params_impl(P& p, F&& fn) {
  auto emit = [&](const char* name, auto& t) {
    if (t.size() > 0) fn(std::string(name), t);
  };
  emit("state_embed", p.state_embed);
  emit("agent_embed", p.agent_embed);
  emit("goal_embed", p.goal_embed);
  emit("return_embed", p.return_embed);
  emit("action_embed", p.action_embed);
  emit("reward_embed", p.reward_embed);
  emit("pos_embed", p.pos_embed);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    auto lemit = [&](const char* name, auto& t) {
      if (t.size() > 0) fn(pre + name, t);
    };
    auto& L = p.layers[l];
    lemit("ln1_g", L.ln1_g);
    lemit("ln1_b", L.ln1_b);
    lemit("wq", L.wq);
    lemit("bq", L.bq);
    lemit("wk", L.wk);
    lemit("bk", L.bk);
    lemit("wv", L.wv);
    lemit("bv", L.bv);
    lemit("wo", L.wo);
    lemit("bo", L.bo);
    lemit("ln2_g", L.ln2_g);
    lemit("ln2_b", L.ln2_b);
    lemit("w1", L.w1);
    lemit("b1", L.b1);
    lemit("w2", L.w2);
    lemit("b2", L.b2);
  }
  emit("lnf_g", p.lnf_g);
  emit("lnf_b", p.lnf_b);
  emit("action_head_w", p.action_head_w);
  emit("action_head_b", p.action_head_b);
  emit("return_head_w", p.return_head_w);
  emit("return_head_b", p.return_head_b);
}

template <typename S, typename F>
void visit_params(TransformerParams<S>& p, F&& fn) {
  visit_params_impl<S>(p, std::forward<F>(fn));
}
template <typename S, typename F>
void visit_params(const TransformerParams<S>& p, F&& fn) {
  visit_params_impl<S>(p, std::forward<F>(fn));
}

template <typename S>
TransformerParams<S> init_params(const TransformerConfig& cfg) {
  cfg.validate();
  TransformerParams<S> p;
  p.config = cfg;
  const int H = cfg.hidden, F = cfg.ffn();
  auto zeros = [](Mat<S>& m, int r, int c) { m = Mat<S>::Zero(r, c); };
  auto ones = [](Mat<S>& m, int r, int c) { m = Mat<S>::Ones(r, c); };

  if (cfg.state_factor > 0) {
    zeros(p.agent_embed, cfg.state_factor, H);
    zeros(p.goal_embed, cfg.state_factor, H);
  } else {
    zeros(p.state_embed, cfg.state_vocab, H);
  }
  if (cfg.kind == ModelKind::Dt) {
    zeros(p.return_embed, cfg.return_bins, H);
    zeros(p.action_embed, cfg.action_input_rows(), H);
    zeros(p.reward_embed, cfg.reward_bins, H);
  }
  zeros(p.pos_embed, cfg.context_tokens, H);
  p.layers.resize(static_cast<size_t>(cfg.layers));
  for (auto& L : p.layers) {
    ones(L.ln1_g, 1, H);
    zeros(L.ln1_b, 1, H);
    zeros(L.wq, H, H);
    zeros(L.bq, 1, H);
    zeros(L.wk, H, H);
    zeros(L.bk, 1, H);
    zeros(L.wv, H, H);
    zeros(L.bv, 1, H);
    zeros(L.wo, H, H);
    zeros(L.bo, 1, H);
    ones(L.ln2_g, 1, H);
    zeros(L.ln2_b, 1, H);
    zeros(L.w1, H, F);
    zeros(L.b1, 1, F);
    zeros(L.w2, F, H);
    zeros(L.b2, 1, H);
  }
  ones(p.lnf_g, 1, H);
  zeros(p.lnf_b, 1, H);
  zeros(p.action_head_w, H, cfg.action_vocab);
  zeros(p.action_head_b, 1, cfg.action_vocab);
  if (cfg.kind == ModelKind::Dt) {
    zeros(p.return_head_w, H, cfg.return_bins);
    zeros(p.return_head_b, 1, cfg.return_bins);
  }

  // Truncated normal for embeddings and projection weights; biases, layer
  // norms, and both output heads stay at zero so untrained logits are
  // exactly uniform.
  Rng rng(derive_seed(cfg.seed, 0x696e6974ull));  // "init"
  const double sigma = 0.02;
  visit_params(p, [&](const std::string& name, Mat<S>& t) {
    bool is_weight = name.find("embed") != std::string::npos ||
                     name.find(".w") != std::string::npos;
    bool is_head = name.find("head") != std::string::npos;
    if (!is_weight || is_head) return;
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j)
        t(i, j) = static_cast<S>(rng.next_trunc_gaussian(sigma));
  });
  return p;
}

template <typename S>
void zero_params(TransformerParams<S>& g) {
  visit_params(g, [](const std::string&, Mat<S>& t) { t.setZero(); });
}

template <typename S>
TransformerParams<S> zero_like(const TransformerParams<S>& p) {
  TransformerParams<S> g = p;
  zero_params(g);
  return g;
}

// ---------------------------------------------------------------------------
// Numeric building blocks
// ---------------------------------------------------------------------------

namespace nn {

inline constexpr double kLnEps = 1e-5;

template <typename S>
void layer_norm_forward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, Mat<S>& hat,
                        Vec<S>& rstd, Mat<S>& y) {
  const auto H = x.cols();
  hat.resize(x.rows(), H);
  y.resize(x.rows(), H);
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S mu = x.row(r).mean();
    auto centered = (x.row(r).array() - mu).eval();
    S var = centered.square().sum() / static_cast<S>(H);
    S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    rstd(r) = rs;
    hat.row(r) = (centered * rs).matrix();
    y.row(r) = (hat.row(r).array() * g.row(0).array() + b.row(0).array()).matrix();
  }
}

template <typename S>
void layer_norm_backward(const Mat<S>& dy, const Mat<S>& hat, const Vec<S>& rstd,
                         const Mat<S>& g, Mat<S>& dg, Mat<S>& db, Mat<S>& dx) {
  const auto H = hat.cols();
  dx.resize(dy.rows(), H);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    auto dyg = (dy.row(r).array() * g.row(0).array()).eval();
    S m1 = dyg.mean();
    S m2 = (dyg * hat.row(r).array()).mean();
    dx.row(r) = (rstd(r) * (dyg - m1 - hat.row(r).array() * m2)).matrix();
  }
  dg.row(0).array() += (dy.array() * hat.array()).colwise().sum();
  db.row(0).array() += dy.array().colwise().sum();
}

template <typename S>
void gelu_forward(const Mat<S>& u, Mat<S>& y) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S a = static_cast<S>(0.044715);
  y = (S(0.5) * u.array() * (S(1) + ((u.array() + a * u.array().cube()) * c).tanh()))
          .matrix();
}

template <typename S>
void gelu_backward(const Mat<S>& u, const Mat<S>& dy, Mat<S>& du) {
  const S c = static_cast<S>(0.7978845608028654);
  const S a = static_cast<S>(0.044715);
  auto t = ((u.array() + a * u.array().cube()) * c).tanh().eval();
  auto inner = (c * (S(1) + S(3) * a * u.array().square())).eval();
  du = (dy.array() * (S(0.5) * (S(1) + t) + S(0.5) * u.array() * (S(1) - t.square()) * inner))
           .matrix();
}

// log-sum-exp of a logits row; numerically safe
template <typename S>
S row_lse(const Mat<S>& logits, Eigen::Index r) {
  S m = logits.row(r).maxCoeff();
  return m + std::log((logits.row(r).array() - m).exp().sum());
}

template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived> const& block_in) {
  auto& block = const_cast<Eigen::MatrixBase<Derived>&>(block_in);
  using S = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    S m = block.row(i).maxCoeff();
    block.row(i) = (block.row(i).array() - m).exp().matrix();
    S sum = block.row(i).sum();
    block.row(i) /= sum;
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Shared trunk: B sequences of L token embeddings -> final hidden states
// ---------------------------------------------------------------------------

template <typename S>
struct CoreCache {
  int batch = 0, seq = 0;
  MatXi mask;
  struct Layer {
    Mat<S> x_in;               // residual stream entering the block
    Mat<S> ln1_hat, ln1_y;     // first norm
    Vec<S> ln1_rstd;
    Mat<S> q, k, v;            // projections
    Mat<S> attw;               // [(B*heads)*L, L] post-softmax weights
    Mat<S> attout;             // concatenated head outputs
    Mat<S> h_mid;              // after attention residual
    Mat<S> ln2_hat, ln2_y;     // second norm
    Vec<S> ln2_rstd;
    Mat<S> ffn_u, ffn_g;       // pre-activation, gelu output
  };
  std::vector<Layer> layers;
  Mat<S> y_pre;                // residual stream entering the final norm
  Mat<S> lnf_hat;
  Vec<S> lnf_rstd;
  Mat<S> y;                    // final hidden states [B*L, H]
};

template <typename S>
void core_forward(const TransformerParams<S>& p, Mat<S> x0, int batch, int seq,
                  CoreCache<S>& c) {
  const auto& cfg = p.config;
  require(seq >= 1 && seq <= cfg.context_tokens, "sequence exceeds configured context");
  require(x0.rows() == static_cast<Eigen::Index>(batch) * seq && x0.cols() == cfg.hidden,
          "embedded input shape mismatch");
  const int H = cfg.hidden, heads = cfg.heads, dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const S neg_inf = -std::numeric_limits<S>::infinity();

  c.batch = batch;
  c.seq = seq;
  c.mask = build_attention_mask(cfg.mask, seq);
  c.layers.resize(static_cast<size_t>(cfg.layers));
  Mat<S> h = std::move(x0);

  for (int l = 0; l < cfg.layers; ++l) {
    auto& L = c.layers[static_cast<size_t>(l)];
    const auto& w = p.layers[static_cast<size_t>(l)];
    L.x_in = h;
    nn::layer_norm_forward(L.x_in, w.ln1_g, w.ln1_b, L.ln1_hat, L.ln1_rstd, L.ln1_y);

    L.q.noalias() = L.ln1_y * w.wq;
    L.q.rowwise() += w.bq.row(0);
    L.k.noalias() = L.ln1_y * w.wk;
    L.k.rowwise() += w.bk.row(0);
    L.v.noalias() = L.ln1_y * w.wv;
    L.v.rowwise() += w.bv.row(0);

    L.attw.resize(static_cast<Eigen::Index>(batch) * heads * seq, seq);
    L.attout.resize(static_cast<Eigen::Index>(batch) * seq, H);
    for (int b = 0; b < batch; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        auto Q = L.q.block(b * seq, hd * dh, seq, dh);
        auto K = L.k.block(b * seq, hd * dh, seq, dh);
        auto V = L.v.block(b * seq, hd * dh, seq, dh);
        auto W = L.attw.block((b * heads + hd) * seq, 0, seq, seq);
        W.noalias() = Q * K.transpose();
        W *= scale;
        for (int i = 0; i < seq; ++i)
          for (int j = 0; j < seq; ++j)
            if (!c.mask(i, j)) W(i, j) = neg_inf;
        nn::softmax_rows_inplace(W);
        L.attout.block(b * seq, hd * dh, seq, dh).noalias() = W * V;
      }
    }
    h.noalias() = L.attout * w.wo;
    h.rowwise() += w.bo.row(0);
    h += L.x_in;
    L.h_mid = h;

    nn::layer_norm_forward(L.h_mid, w.ln2_g, w.ln2_b, L.ln2_hat, L.ln2_rstd, L.ln2_y);
    L.ffn_u.noalias() = L.ln2_y * w.w1;
    L.ffn_u.rowwise() += w.b1.row(0);
    nn::gelu_forward(L.ffn_u, L.ffn_g);
    h.noalias() = L.ffn_g * w.w2;
    h.rowwise() += w.b2.row(0);
    h += L.h_mid;
  }

  c.y_pre = std::move(h);
  nn::layer_norm_forward(c.y_pre, p.lnf_g, p.lnf_b, c.lnf_hat, c.lnf_rstd, c.y);
}

// Accumulates parameter gradients into `g` and returns the gradient with
// respect to the embedded input.
template <typename S>
Mat<S> core_backward(const TransformerParams<S>& p, const CoreCache<S>& c, const Mat<S>& dy,
                     TransformerParams<S>& g) {
  const auto& cfg = p.config;
  const int batch = c.batch, seq = c.seq;
  const int H = cfg.hidden, heads = cfg.heads, dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Mat<S> dh_stream;
  nn::layer_norm_backward(dy, c.lnf_hat, c.lnf_rstd, p.lnf_g, g.lnf_g, g.lnf_b, dh_stream);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& L = c.layers[static_cast<size_t>(l)];
    const auto& w = p.layers[static_cast<size_t>(l)];
    auto& gw = g.layers[static_cast<size_t>(l)];

    // feed-forward half
    g.layers[static_cast<size_t>(l)].w2.noalias() += L.ffn_g.transpose() * dh_stream;
    gw.b2.row(0).array() += dh_stream.array().colwise().sum();
    Mat<S> dgelu = dh_stream * w.w2.transpose();
    Mat<S> du;
    nn::gelu_backward(L.ffn_u, dgelu, du);
    gw.w1.noalias() += L.ln2_y.transpose() * du;
    gw.b1.row(0).array() += du.array().colwise().sum();
    Mat<S> dln2y = du * w.w1.transpose();
    Mat<S> dmid;
    nn::layer_norm_backward(dln2y, L.ln2_hat, L.ln2_rstd, w.ln2_g, gw.ln2_g, gw.ln2_b, dmid);
    dmid += dh_stream;  // residual path

    // attention half
    gw.wo.noalias() += L.attout.transpose() * dmid;
    gw.bo.row(0).array() += dmid.array().colwise().sum();
    Mat<S> dattout = dmid * w.wo.transpose();

    Mat<S> dq = Mat<S>::Zero(batch * seq, H);
    Mat<S> dk = Mat<S>::Zero(batch * seq, H);
    Mat<S> dv = Mat<S>::Zero(batch * seq, H);
    Mat<S> dW(seq, seq), dS(seq, seq);
    for (int b = 0; b < batch; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        auto Q = L.q.block(b * seq, hd * dh, seq, dh);
        auto K = L.k.block(b * seq, hd * dh, seq, dh);
        auto V = L.v.block(b * seq, hd * dh, seq, dh);
        auto W = L.attw.block((b * heads + hd) * seq, 0, seq, seq);
        auto dO = dattout.block(b * seq, hd * dh, seq, dh);

        dW.noalias() = dO * V.transpose();
        dv.block(b * seq, hd * dh, seq, dh).noalias() = W.transpose() * dO;
        for (int i = 0; i < seq; ++i) {
          S dot = (W.row(i).array() * dW.row(i).array()).sum();
          dS.row(i) = (W.row(i).array() * (dW.row(i).array() - dot)).matrix();
        }
        dq.block(b * seq, hd * dh, seq, dh).noalias() = dS * K * scale;
        dk.block(b * seq, hd * dh, seq, dh).noalias() = dS.transpose() * Q * scale;
      }
    }
    gw.wq.noalias() += L.ln1_y.transpose() * dq;
    gw.bq.row(0).array() += dq.array().colwise().sum();
    gw.wk.noalias() += L.ln1_y.transpose() * dk;
    gw.bk.row(0).array() += dk.array().colwise().sum();
    gw.wv.noalias() += L.ln1_y.transpose() * dv;
    gw.bv.row(0).array() += dv.array().colwise().sum();

    Mat<S> dln1y = dq * w.wq.transpose();
    dln1y.noalias() += dk * w.wk.transpose();
    dln1y.noalias() += dv * w.wv.transpose();
    Mat<S> dx;
    nn::layer_norm_backward(dln1y, L.ln1_hat, L.ln1_rstd, w.ln1_g, gw.ln1_g, gw.ln1_b, dx);
    dh_stream = dmid + dx;
  }
  return dh_stream;
}

// ---------------------------------------------------------------------------
// Embedding helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void add_state_embedding(const TransformerParams<S>& p, int32_t token, Eigen::Index row,
                         Mat<S>& x) {
  const auto& cfg = p.config;
  require(token >= 0 && token < cfg.state_tokens(), "state token out of range");
  if (cfg.state_factor > 0) {
    int agent = token / cfg.state_factor;
    int goal = token % cfg.state_factor;
    x.row(row) += p.agent_embed.row(agent);
    x.row(row) += p.goal_embed.row(goal);
  } else {
    x.row(row) += p.state_embed.row(token);
  }
}

template <typename S>
void scatter_state_gradient(const TransformerParams<S>& p, int32_t token,
                            const Mat<S>& dx, Eigen::Index row, TransformerParams<S>& g) {
  if (p.config.state_factor > 0) {
    g.agent_embed.row(token / p.config.state_factor) += dx.row(row);
    g.goal_embed.row(token % p.config.state_factor) += dx.row(row);
  } else {
    g.state_embed.row(token) += dx.row(row);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Inverse dynamics model: k+1 states in, k action predictions out
// ---------------------------------------------------------------------------

struct LossReport {
  double total = 0;
  double action = 0;
  double ret = 0;
  int64_t action_tokens = 0;
  int64_t return_tokens = 0;
};

template <typename S>
struct IdmOut {
  Mat<S> logits;  // [B*k, action_vocab]; row b*k+i predicts the action after state i
  CoreCache<S> cache;
  int batch = 0, k = 0;
};

template <typename S>
IdmOut<S> idm_forward(const TransformerParams<S>& p, const MatXi& states) {
  const auto& cfg = p.config;
  require(cfg.kind == ModelKind::Idm, "idm_forward requires an inverse dynamics model");
  const int B = static_cast<int>(states.rows());
  const int L = static_cast<int>(states.cols());
  require(B >= 1 && L >= 2, "window must hold at least two states");
  require(L <= cfg.context_tokens, "window exceeds configured context");
  const int k = L - 1, H = cfg.hidden;

  Mat<S> x = Mat<S>::Zero(static_cast<Eigen::Index>(B) * L, H);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < L; ++i) {
      Eigen::Index row = static_cast<Eigen::Index>(b) * L + i;
      detail::add_state_embedding(p, states(b, i), row, x);
      x.row(row) += p.pos_embed.row(i);
    }

  IdmOut<S> out;
  out.batch = B;
  out.k = k;
  core_forward(p, std::move(x), B, L, out.cache);
  out.logits.resize(static_cast<Eigen::Index>(B) * k, cfg.action_vocab);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < k; ++i)
      out.logits.row(static_cast<Eigen::Index>(b) * k + i).noalias() =
          out.cache.y.row(static_cast<Eigen::Index>(b) * L + i) * p.action_head_w +
          p.action_head_b.row(0);
  return out;
}

template <typename S>
LossReport idm_loss_from(const IdmOut<S>& out, const MatXi& actions) {
  const int B = out.batch, k = out.k;
  require(actions.rows() == B && actions.cols() == k, "action labels shape mismatch");
  LossReport report;
  report.action_tokens = static_cast<int64_t>(B) * k;
  double sum = 0;
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < k; ++i) {
      int32_t a = actions(b, i);
      require(a != kNoAction, "unlabelled action in an inverse-dynamics batch");
      require(a >= 0 && a < out.logits.cols(), "action label out of range");
      Eigen::Index r = static_cast<Eigen::Index>(b) * k + i;
      sum += static_cast<double>(nn::row_lse(out.logits, r) - out.logits(r, a));
    }
  report.action = sum / static_cast<double>(report.action_tokens);
  report.total = report.action;
  return report;
}

template <typename S>
LossReport idm_loss(const TransformerParams<S>& p, const IdmBatch& batch) {
  auto out = idm_forward(p, batch.states);
  return idm_loss_from(out, batch.actions);
}

// Loss plus gradient accumulation in one pass.
template <typename S>
LossReport idm_backward(const TransformerParams<S>& p, const IdmBatch& batch,
                        TransformerParams<S>& g) {
  auto out = idm_forward(p, batch.states);
  auto report = idm_loss_from(out, batch.actions);
  require(std::isfinite(report.total), ErrorCategory::Numeric, "non-finite loss");

  const auto& cfg = p.config;
  const int B = out.batch, k = out.k, L = k + 1, H = cfg.hidden;
  const S inv = S(1) / static_cast<S>(report.action_tokens);

  Mat<S> dy = Mat<S>::Zero(static_cast<Eigen::Index>(B) * L, H);
  Mat<S> prob(1, cfg.action_vocab);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < k; ++i) {
      Eigen::Index lr = static_cast<Eigen::Index>(b) * k + i;
      Eigen::Index yr = static_cast<Eigen::Index>(b) * L + i;
      S m = out.logits.row(lr).maxCoeff();
      prob.row(0) = (out.logits.row(lr).array() - m).exp().matrix();
      prob.row(0) /= prob.row(0).sum();
      prob(0, batch.actions(b, i)) -= S(1);
      prob.row(0) *= inv;
      g.action_head_w.noalias() += out.cache.y.row(yr).transpose() * prob.row(0);
      g.action_head_b.row(0) += prob.row(0);
      dy.row(yr).noalias() += prob.row(0) * p.action_head_w.transpose();
    }

  Mat<S> dx = core_backward(p, out.cache, dy, g);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < L; ++i) {
      Eigen::Index row = static_cast<Eigen::Index>(b) * L + i;
      detail::scatter_state_gradient(p, batch.states(b, i), dx, row, g);
      g.pos_embed.row(i) += dx.row(row);
    }
  return report;
}

// ---------------------------------------------------------------------------
// Decision transformer: (s, G, a, r) token stream, two read-out heads
// ---------------------------------------------------------------------------

template <typename S>
struct DtOut {
  Mat<S> return_logits;  // [B*T, return_bins] read at each s_t position
  Mat<S> action_logits;  // [B*T, action_vocab] read at each G_t position
  CoreCache<S> cache;
  int batch = 0, timesteps = 0;
};

template <typename S>
DtOut<S> dt_forward(const TransformerParams<S>& p, const MatXi& states, const MatXi& returns,
                    const MatXi& actions_in, const MatXi& rewards) {
  const auto& cfg = p.config;
  require(cfg.kind == ModelKind::Dt, "dt_forward requires a decision transformer");
  const int B = static_cast<int>(states.rows());
  const int T = static_cast<int>(states.cols());
  require(B >= 1 && T >= 1, "empty batch");
  require(returns.rows() == B && returns.cols() == T && actions_in.rows() == B &&
              actions_in.cols() == T && rewards.rows() == B && rewards.cols() == T,
          "token channel shapes disagree");
  const int L = 4 * T, H = cfg.hidden;
  require(L <= cfg.context_tokens, "window exceeds configured context");

  Mat<S> x = Mat<S>::Zero(static_cast<Eigen::Index>(B) * L, H);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      Eigen::Index base = static_cast<Eigen::Index>(b) * L + 4 * t;
      detail::add_state_embedding(p, states(b, t), base + 0, x);
      int32_t gg = returns(b, t);
      require(gg >= 0 && gg < cfg.return_bins, "return bin out of range");
      x.row(base + 1) += p.return_embed.row(gg);
      int32_t a = actions_in(b, t);
      require(a >= 0 && a < cfg.action_input_rows(), "action input id out of range");
      x.row(base + 2) += p.action_embed.row(a);
      int32_t rr = rewards(b, t);
      require(rr >= 0 && rr < cfg.reward_bins, "reward bin out of range");
      x.row(base + 3) += p.reward_embed.row(rr);
      for (int off = 0; off < 4; ++off) x.row(base + off) += p.pos_embed.row(4 * t + off);
    }

  DtOut<S> out;
  out.batch = B;
  out.timesteps = T;
  core_forward(p, std::move(x), B, L, out.cache);
  out.return_logits.resize(static_cast<Eigen::Index>(B) * T, cfg.return_bins);
  out.action_logits.resize(static_cast<Eigen::Index>(B) * T, cfg.action_vocab);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      Eigen::Index r = static_cast<Eigen::Index>(b) * T + t;
      Eigen::Index base = static_cast<Eigen::Index>(b) * L + 4 * t;
      out.return_logits.row(r).noalias() =
          out.cache.y.row(base + 0) * p.return_head_w + p.return_head_b.row(0);
      out.action_logits.row(r).noalias() =
          out.cache.y.row(base + 1) * p.action_head_w + p.action_head_b.row(0);
    }
  return out;
}

template <typename S>
DtOut<S> dt_forward(const TransformerParams<S>& p, const DtBatch& batch) {
  return dt_forward(p, batch.states, batch.returns, batch.action_inputs, batch.rewards);
}

// Return CE averaged over all timesteps; action CE averaged over positions
// with nonzero weight (0 when no position carries weight, e.g. return-only
// training on unlabelled data).
template <typename S>
LossReport dt_loss_from(const DtOut<S>& out, const MatXi& return_targets,
                        const MatXi& action_labels, const MatXi& action_weight) {
  const int B = out.batch, T = out.timesteps;
  require(B > 0 && T > 0, "empty batch");
  require(action_labels.rows() == B && action_labels.cols() == T &&
              action_weight.rows() == B && action_weight.cols() == T,
          "label shapes disagree");
  LossReport report;
  report.return_tokens = static_cast<int64_t>(B) * T;
  double ret_sum = 0, act_sum = 0;
  int64_t act_count = 0;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      Eigen::Index r = static_cast<Eigen::Index>(b) * T + t;
      int32_t gbin = return_targets(b, t);
      ret_sum += static_cast<double>(nn::row_lse(out.return_logits, r) -
                                     out.return_logits(r, gbin));
      if (action_weight(b, t) != 0) {
        int32_t a = action_labels(b, t);
        require(a != kNoAction, "missing action label at a weighted position");
        require(a >= 0 && a < out.action_logits.cols(), "action label out of range");
        act_sum += static_cast<double>(nn::row_lse(out.action_logits, r) -
                                       out.action_logits(r, a));
        ++act_count;
      }
    }
  report.ret = ret_sum / static_cast<double>(report.return_tokens);
  report.action_tokens = act_count;
  report.action = act_count > 0 ? act_sum / static_cast<double>(act_count) : 0.0;
  report.total = report.ret + report.action;
  return report;
}

template <typename S>
LossReport dt_loss(const TransformerParams<S>& p, const DtBatch& batch) {
  auto out = dt_forward(p, batch);
  return dt_loss_from(out, batch.returns, batch.action_labels, batch.label_present);
}

template <typename S>
LossReport dt_backward(const TransformerParams<S>& p, const DtBatch& batch,
                       TransformerParams<S>& g) {
  auto out = dt_forward(p, batch);
  auto report = dt_loss_from(out, batch.returns, batch.action_labels, batch.label_present);
  require(std::isfinite(report.total), ErrorCategory::Numeric, "non-finite loss");

  const auto& cfg = p.config;
  const int B = out.batch, T = out.timesteps, L = 4 * T, H = cfg.hidden;
  const S ret_inv = S(1) / static_cast<S>(report.return_tokens);
  const S act_inv =
      report.action_tokens > 0 ? S(1) / static_cast<S>(report.action_tokens) : S(0);

  Mat<S> dy = Mat<S>::Zero(static_cast<Eigen::Index>(B) * L, H);
  Mat<S> prob_r(1, cfg.return_bins), prob_a(1, cfg.action_vocab);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      Eigen::Index r = static_cast<Eigen::Index>(b) * T + t;
      Eigen::Index base = static_cast<Eigen::Index>(b) * L + 4 * t;

      S m = out.return_logits.row(r).maxCoeff();
      prob_r.row(0) = (out.return_logits.row(r).array() - m).exp().matrix();
      prob_r.row(0) /= prob_r.row(0).sum();
      prob_r(0, batch.returns(b, t)) -= S(1);
      prob_r.row(0) *= ret_inv;
      g.return_head_w.noalias() += out.cache.y.row(base + 0).transpose() * prob_r.row(0);
      g.return_head_b.row(0) += prob_r.row(0);
      dy.row(base + 0).noalias() += prob_r.row(0) * p.return_head_w.transpose();

      if (batch.label_present(b, t) != 0) {
        S ma = out.action_logits.row(r).maxCoeff();
        prob_a.row(0) = (out.action_logits.row(r).array() - ma).exp().matrix();
        prob_a.row(0) /= prob_a.row(0).sum();
        prob_a(0, batch.action_labels(b, t)) -= S(1);
        prob_a.row(0) *= act_inv;
        g.action_head_w.noalias() += out.cache.y.row(base + 1).transpose() * prob_a.row(0);
        g.action_head_b.row(0) += prob_a.row(0);
        dy.row(base + 1).noalias() += prob_a.row(0) * p.action_head_w.transpose();
      }
    }

  Mat<S> dx = core_backward(p, out.cache, dy, g);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      Eigen::Index base = static_cast<Eigen::Index>(b) * L + 4 * t;
      detail::scatter_state_gradient(p, batch.states(b, t), dx, base + 0, g);
      g.return_embed.row(batch.returns(b, t)) += dx.row(base + 1);
      g.action_embed.row(batch.action_inputs(b, t)) += dx.row(base + 2);
      g.reward_embed.row(batch.rewards(b, t)) += dx.row(base + 3);
      for (int off = 0; off < 4; ++off) g.pos_embed.row(4 * t + off) += dx.row(base + off);
    }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline void write_config(BinWriter& w, const TransformerConfig& cfg) {
  w.put_u8(static_cast<uint8_t>(cfg.kind));
  w.put_u8(static_cast<uint8_t>(cfg.mask));
  w.put_u32(static_cast<uint32_t>(cfg.layers));
  w.put_u32(static_cast<uint32_t>(cfg.heads));
  w.put_u32(static_cast<uint32_t>(cfg.hidden));
  w.put_u32(static_cast<uint32_t>(cfg.ffn_hidden));
  w.put_u32(static_cast<uint32_t>(cfg.context_tokens));
  w.put_u32(static_cast<uint32_t>(cfg.state_vocab));
  w.put_u32(static_cast<uint32_t>(cfg.state_factor));
  w.put_u32(static_cast<uint32_t>(cfg.action_vocab));
  w.put_u32(static_cast<uint32_t>(cfg.return_bins));
  w.put_u32(static_cast<uint32_t>(cfg.reward_bins));
  w.put_u64(cfg.seed);
}

inline TransformerConfig read_config(BinReader& r) {
  TransformerConfig cfg;
  cfg.kind = static_cast<ModelKind>(r.get_u8());
  cfg.mask = static_cast<MaskKind>(r.get_u8());
  cfg.layers = static_cast<int>(r.get_u32());
  cfg.heads = static_cast<int>(r.get_u32());
  cfg.hidden = static_cast<int>(r.get_u32());
  cfg.ffn_hidden = static_cast<int>(r.get_u32());
  cfg.context_tokens = static_cast<int>(r.get_u32());
  cfg.state_vocab = static_cast<int>(r.get_u32());
  cfg.state_factor = static_cast<int>(r.get_u32());
  cfg.action_vocab = static_cast<int>(r.get_u32());
  cfg.return_bins = static_cast<int>(r.get_u32());
  cfg.reward_bins = static_cast<int>(r.get_u32());
  cfg.seed = r.get_u64();
  return cfg;
}

template <typename S>
void save_checkpoint(const TransformerParams<S>& p, uint64_t step,
                     const std::filesystem::path& path) {
  BinWriter w;
  w.put_bytes("ALPC", 4);
  w.put_u32(kCheckpointVersion);
  write_config(w, p.config);
  w.put_u64(step);
  w.put_u8(sizeof(S));
  uint32_t count = 0;
  visit_params(p, [&](const std::string&, const Mat<S>&) { ++count; });
  w.put_u32(count);
  visit_params(p, [&](const std::string& name, const Mat<S>& t) {
    w.put_string(name);
    w.put_u32(static_cast<uint32_t>(t.rows()));
    w.put_u32(static_cast<uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) {
        if constexpr (sizeof(S) == 4)
          w.put_f32(static_cast<float>(t(i, j)));
        else
          w.put_f64(static_cast<double>(t(i, j)));
      }
  });
  w.write_file(path);
}

template <typename S>
struct Checkpoint {
  TransformerParams<S> params;
  uint64_t step = 0;
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  auto r = BinReader::from_file(path);
  char magic[4];
  r.get_bytes(magic, 4);
  require(std::string(magic, 4) == "ALPC", ErrorCategory::Format, "bad checkpoint magic");
  uint32_t version = r.get_u32();
  require(version == kCheckpointVersion, ErrorCategory::Format,
          "unsupported checkpoint version");
  TransformerConfig cfg = read_config(r);
  Checkpoint<S> ck;
  ck.step = r.get_u64();
  uint8_t width = r.get_u8();
  require(width == sizeof(S), ErrorCategory::Format,
          "checkpoint scalar width mismatch");
  ck.params = init_params<S>(cfg);
  uint32_t count = r.get_u32();
  uint32_t seen = 0;
  visit_params(ck.params, [&](const std::string& name, Mat<S>& t) {
    std::string got = r.get_string();
    require(got == name, ErrorCategory::Format,
            "checkpoint tensor order mismatch: expected " + name + ", found " + got);
    uint32_t rows = r.get_u32(), cols = r.get_u32();
    require(rows == static_cast<uint32_t>(t.rows()) &&
                cols == static_cast<uint32_t>(t.cols()),
            ErrorCategory::Format, "checkpoint tensor shape mismatch for " + name);
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) {
        if constexpr (sizeof(S) == 4)
          t(i, j) = static_cast<S>(r.get_f32());
        else
          t(i, j) = static_cast<S>(r.get_f64());
      }
    ++seen;
  });
  require(seen == count, ErrorCategory::Format, "checkpoint tensor count mismatch");
  return ck;
}

// Argmax with ties broken toward the lowest index.
template <typename S>
int argmax_lowest(const Mat<S>& logits, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index j = 1; j < logits.cols(); ++j)
    if (logits(row, j) > logits(row, best)) best = static_cast<int>(j);
  return best;
}

}  // namespace alpt
