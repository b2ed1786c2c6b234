#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "alpt/digest.hpp"
#include "alpt/model.hpp"
#include "model_test_util.hpp"

using namespace alpt;
using namespace alpt::testutil;

namespace {

template <typename S>
bool rows_bitwise_equal(const Mat<S>& a, const Mat<S>& b, Eigen::Index row) {
  return std::memcmp(a.row(row).data(), b.row(row).data(), sizeof(S) * a.cols()) == 0;
}

// independent cross-entropy oracle: long-double log-softmax + gather
template <typename S>
double ce_oracle(const Mat<S>& logits, Eigen::Index row, int label) {
  long double m = logits(row, 0);
  for (Eigen::Index j = 1; j < logits.cols(); ++j)
    m = std::max<long double>(m, logits(row, j));
  long double sum = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    sum += std::exp(static_cast<long double>(logits(row, j)) - m);
  return static_cast<double>(m + std::log(sum) - static_cast<long double>(logits(row, label)));
}

}  // namespace

TEST_CASE("attention masks match their definitions") {
  auto causal = build_attention_mask(MaskKind::Causal, 3);
  MatXi expect(3, 3);
  expect << 1, 0, 0, 1, 1, 0, 1, 1, 1;
  CHECK(causal == expect);
  auto full = build_attention_mask(MaskKind::Full, 3);
  CHECK(full.sum() == 9);
  auto one = build_attention_mask(MaskKind::Causal, 1);
  CHECK(one.rows() == 1);
  CHECK(one(0, 0) == 1);
  CHECK_THROWS_AS(build_attention_mask(MaskKind::Full, 0), Error);
}

TEST_CASE("config validation rejects inconsistent shapes") {
  auto cfg = small_dt_config();
  cfg.hidden = 15;  // not divisible by heads
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_dt_config();
  cfg.state_vocab = 0;  // no embedding scheme at all
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_dt_config();
  cfg.state_factor = 10;  // both schemes at once
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("initialization is deterministic in the seed") {
  auto cfg = small_dt_config(7);
  auto a = init_params<float>(cfg);
  auto b = init_params<float>(cfg);
  cfg.seed = 8;
  auto c = init_params<float>(cfg);
  bool same = true, differ = false;
  visit_params(a, [&](const std::string& name, const Mat<float>& t) {
    visit_params(b, [&](const std::string& name2, const Mat<float>& t2) {
      if (name == name2) same = same && (t == t2);
    });
    visit_params(c, [&](const std::string& name2, const Mat<float>& t2) {
      if (name == name2 && t.size() > 0 && t != t2) differ = true;
    });
  });
  CHECK(same);
  CHECK(differ);
}

TEST_CASE("biases, layer norms, and heads start at zero/identity") {
  auto p = init_params<double>(small_dt_config());
  CHECK(p.action_head_w.isZero(0));
  CHECK(p.action_head_b.isZero(0));
  CHECK(p.return_head_w.isZero(0));
  CHECK(p.layers[0].bq.isZero(0));
  CHECK(p.layers[0].ln1_g.isOnes(0));
  CHECK(p.layers[0].ln1_b.isZero(0));
  bool weights_nonzero = !p.layers[0].wq.isZero(0) && !p.state_embed.isZero(0) &&
                         !p.pos_embed.isZero(0);
  CHECK(weights_nonzero);
}

TEST_CASE("untrained idm emits exactly uniform action distributions") {
  auto cfg = small_idm_config();
  auto p = init_params<double>(cfg);
  auto batch = random_idm_batch(cfg, 4, 5, 3);
  auto out = idm_forward(p, batch.states);
  CHECK(out.logits.rows() == 4 * 5);
  CHECK(out.logits.cols() == 4);
  CHECK(out.logits.isZero(0));
  auto report = idm_loss(p, batch);
  CHECK(report.total == Catch::Approx(std::log(4.0)).epsilon(0).margin(1e-6));
  CHECK(report.action == report.total);
  CHECK(report.action_tokens == 20);
}

TEST_CASE("untrained dt loss equals ln|A| + ln(bins) per timestep") {
  auto cfg = small_dt_config();
  auto p = init_params<double>(cfg);
  auto batch = random_dt_batch(cfg, 3, 5, 4);
  auto report = dt_loss(p, batch);
  CHECK(report.total ==
        Catch::Approx(std::log(4.0) + std::log(2.0)).epsilon(0).margin(1e-6));
  CHECK(report.action == Catch::Approx(std::log(4.0)).epsilon(0).margin(1e-6));
  CHECK(report.ret == Catch::Approx(std::log(2.0)).epsilon(0).margin(1e-6));
  CHECK(report.total == report.action + report.ret);  // exact decomposition
}

TEST_CASE("losses match an independently coded cross-entropy oracle") {
  auto cfg = small_dt_config(11);
  auto p = init_params<double>(cfg);
  randomize_params(p, 21);
  auto batch = random_dt_batch(cfg, 4, 5, 5);
  auto out = dt_forward(p, batch);
  auto report = dt_loss_from(out, batch.returns, batch.action_labels, batch.label_present);

  double ret = 0, act = 0;
  for (int b = 0; b < 4; ++b)
    for (int t = 0; t < 5; ++t) {
      Eigen::Index r = b * 5 + t;
      ret += ce_oracle(out.return_logits, r, batch.returns(b, t));
      act += ce_oracle(out.action_logits, r, batch.action_labels(b, t));
    }
  CHECK(report.ret == Catch::Approx(ret / 20).epsilon(0).margin(1e-6));
  CHECK(report.action == Catch::Approx(act / 20).epsilon(0).margin(1e-6));

  auto icfg = small_idm_config(12);
  auto ip = init_params<double>(icfg);
  randomize_params(ip, 22);
  auto ibatch = random_idm_batch(icfg, 4, 5, 6);
  auto iout = idm_forward(ip, ibatch.states);
  auto ireport = idm_loss_from(iout, ibatch.actions);
  double isum = 0;
  for (int b = 0; b < 4; ++b)
    for (int i = 0; i < 5; ++i) isum += ce_oracle(iout.logits, b * 5 + i, ibatch.actions(b, i));
  CHECK(ireport.total == Catch::Approx(isum / 20).epsilon(0).margin(1e-6));
}

TEST_CASE("softmax of every logit row is normalized") {
  auto cfg = small_dt_config(13);
  auto p = init_params<float>(cfg);
  randomize_params(p, 31, 0.2);
  auto batch = random_dt_batch(cfg, 8, 5, 7);
  auto out = dt_forward(p, batch);
  for (Eigen::Index r = 0; r < out.action_logits.rows(); ++r) {
    float m = out.action_logits.row(r).maxCoeff();
    float sum = (out.action_logits.row(r).array() - m).exp().sum();
    float total = ((out.action_logits.row(r).array() - m).exp() / sum).sum();
    CHECK(std::abs(total - 1.0f) < 1e-6f);
  }
}

TEST_CASE("causal mask: logits are bitwise invariant to future-token edits") {
  auto cfg = small_dt_config(17);
  auto p = init_params<float>(cfg);
  randomize_params(p, 41, 0.1);
  Rng rng(55);
  int trials = 200, T = 5;
  for (int trial = 0; trial < trials; ++trial) {
    auto batch = random_dt_batch(cfg, 1, T, 1000 + static_cast<uint64_t>(trial));
    auto base = dt_forward(p, batch);

    // perturb one token channel at a random timestep
    int t = rng.next_int(0, T - 1);
    int channel = rng.next_int(0, 3);
    DtBatch mod = batch;
    auto bump = [&](MatXi& m, int hi) { m(0, t) = (m(0, t) + 1) % hi; };
    int token_pos = 4 * t + channel;
    switch (channel) {
      case 0: bump(mod.states, cfg.state_tokens()); break;
      case 1: bump(mod.returns, cfg.return_bins); break;
      case 2: bump(mod.action_inputs, cfg.action_vocab); break;
      case 3: bump(mod.rewards, cfg.reward_bins); break;
    }
    auto per = dt_forward(p, mod);

    // all read-outs strictly before the perturbed token position must be
    // bit-identical
    for (int tt = 0; tt < T; ++tt) {
      if (4 * tt + 0 < token_pos)
        REQUIRE(rows_bitwise_equal(base.return_logits, per.return_logits, tt));
      if (4 * tt + 1 < token_pos)
        REQUIRE(rows_bitwise_equal(base.action_logits, per.action_logits, tt));
    }
  }
}

TEST_CASE("editing an action token changes some later prediction") {
  auto cfg = small_dt_config(19);
  auto p = init_params<float>(cfg);
  randomize_params(p, 43, 0.1);
  auto batch = random_dt_batch(cfg, 1, 5, 77);
  auto base = dt_forward(p, batch);
  DtBatch mod = batch;
  mod.action_inputs(0, 1) = (mod.action_inputs(0, 1) + 1) % cfg.action_vocab;
  auto per = dt_forward(p, mod);
  // positions up to and including the action's own read-out are untouched...
  CHECK(rows_bitwise_equal(base.return_logits, per.return_logits, 0));
  CHECK(rows_bitwise_equal(base.action_logits, per.action_logits, 0));
  CHECK(rows_bitwise_equal(base.return_logits, per.return_logits, 1));
  CHECK(rows_bitwise_equal(base.action_logits, per.action_logits, 1));
  // ...while later timesteps see the edit
  double diff = 0;
  for (int t = 2; t < 5; ++t)
    diff += (base.return_logits.row(t) - per.return_logits.row(t)).cwiseAbs().sum() +
            (base.action_logits.row(t) - per.action_logits.row(t)).cwiseAbs().sum();
  CHECK(diff > 0);
}

TEST_CASE("full mask: perturbing the final state changes position-0 logits") {
  auto cfg = small_idm_config(23);
  auto p = init_params<float>(cfg);
  randomize_params(p, 47, 0.1);
  auto batch = random_idm_batch(cfg, 1, 5, 88);
  auto base = idm_forward(p, batch.states);
  MatXi states = batch.states;
  states(0, 5) = (states(0, 5) + 1) % cfg.state_tokens();
  auto per = idm_forward(p, states);
  CHECK_FALSE(rows_bitwise_equal(base.logits, per.logits, 0));
}

TEST_CASE("a single-timestep context yields one return and one action prediction") {
  auto cfg = small_dt_config(29);
  auto p = init_params<float>(cfg);
  auto batch = random_dt_batch(cfg, 1, 1, 9);
  auto out = dt_forward(p, batch);
  CHECK(out.return_logits.rows() == 1);
  CHECK(out.action_logits.rows() == 1);
}

TEST_CASE("shape and label errors are reported") {
  auto cfg = small_dt_config(31);
  auto p = init_params<float>(cfg);
  auto batch = random_dt_batch(cfg, 2, 5, 10);

  DtBatch bad = batch;
  bad.rewards = MatXi::Zero(2, 4);  // wrong width
  CHECK_THROWS_AS(dt_forward(p, bad), Error);

  DtBatch missing = batch;
  missing.action_labels(1, 3) = kNoAction;  // weighted but unlabelled
  CHECK_THROWS_AS(dt_loss(p, missing), Error);

  DtBatch wide = random_dt_batch(cfg, 1, 6, 11);  // 24 tokens > context 20
  CHECK_THROWS_AS(dt_forward(p, wide), Error);

  auto icfg = small_idm_config(32);
  auto ip = init_params<float>(icfg);
  auto ibatch = random_idm_batch(icfg, 2, 5, 12);
  ibatch.actions(0, 2) = kNoAction;
  CHECK_THROWS_AS(idm_loss(ip, ibatch), Error);

  auto iwide = random_idm_batch(icfg, 1, 6, 13);  // 7 states > context 6
  CHECK_THROWS_AS(idm_forward(ip, iwide.states), Error);
}

TEST_CASE("masked-out action terms contribute zero loss and zero head gradient") {
  auto cfg = small_dt_config(37);
  auto p = init_params<double>(cfg);
  randomize_params(p, 53);
  auto batch = random_dt_batch(cfg, 3, 5, 14);
  batch.label_present.setZero();
  batch.action_labels.setConstant(kNoAction);
  batch.action_inputs.setConstant(cfg.action_vocab);  // placeholder input id

  auto report = dt_loss(p, batch);
  CHECK(report.action == 0.0);
  CHECK(report.total == report.ret);

  auto g = zero_like(p);
  dt_backward(p, batch, g);
  CHECK(g.action_head_w.isZero(0));
  CHECK(g.action_head_b.isZero(0));
}

TEST_CASE("forward, loss, and gradient are deterministic") {
  auto cfg = small_dt_config(41);
  auto p = init_params<float>(cfg);
  randomize_params(p, 59, 0.1);
  auto batch = random_dt_batch(cfg, 4, 5, 15);
  auto g1 = zero_like(p);
  auto g2 = zero_like(p);
  auto r1 = dt_backward(p, batch, g1);
  auto r2 = dt_backward(p, batch, g2);
  CHECK(r1.total == r2.total);
  bool grads_equal = true;
  visit_params(g1, [&](const std::string& name, const Mat<float>& t) {
    visit_params(g2, [&](const std::string& name2, const Mat<float>& t2) {
      if (name == name2 && t != t2) grads_equal = false;
    });
  });
  CHECK(grads_equal);
}

TEST_CASE("factorized state embedding sums agent and goal rows") {
  auto cfg = small_dt_config(43);
  cfg.state_vocab = 0;
  cfg.state_factor = 6;  // 36 composite tokens
  auto p = init_params<double>(cfg);
  randomize_params(p, 61);

  // token 17 = agent 2, goal 5: forward must differ when either factor changes
  auto batch = random_dt_batch(cfg, 1, 2, 16);
  batch.states.setConstant(17);
  auto base = dt_forward(p, batch);
  DtBatch mod = batch;
  mod.states.setConstant(2 * 6 + 4);  // same agent, different goal
  auto per = dt_forward(p, mod);
  CHECK_FALSE(rows_bitwise_equal(base.return_logits, per.return_logits, 0));

  // gradient lands on both factor tables
  auto g = zero_like(p);
  dt_backward(p, batch, g);
  CHECK_FALSE(g.agent_embed.row(2).isZero(0));
  CHECK_FALSE(g.goal_embed.row(5).isZero(0));
  CHECK(g.agent_embed.row(0).isZero(0));  // untouched agent row
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto cfg = small_dt_config(47);
  auto p = init_params<float>(cfg);
  randomize_params(p, 67, 0.1);
  auto path = std::filesystem::temp_directory_path() / "alpt_ckpt_test.bin";
  save_checkpoint(p, 1234, path);
  auto ck = load_checkpoint<float>(path);
  CHECK(ck.step == 1234);
  CHECK(ck.params.config.hidden == cfg.hidden);
  bool equal = true;
  visit_params(p, [&](const std::string& name, const Mat<float>& t) {
    visit_params(ck.params, [&](const std::string& name2, const Mat<float>& t2) {
      if (name == name2 &&
          std::memcmp(t.data(), t2.data(), sizeof(float) * t.size()) != 0)
        equal = false;
    });
  });
  CHECK(equal);

  // saving the loaded copy reproduces the original bytes
  auto path2 = std::filesystem::temp_directory_path() / "alpt_ckpt_test2.bin";
  save_checkpoint(ck.params, 1234, path2);
  CHECK(file_digest(path) == file_digest(path2));

  // wrong scalar width is refused
  CHECK_THROWS_AS(load_checkpoint<double>(path), Error);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("argmax breaks ties toward the lowest id") {
  Mat<float> logits(2, 4);
  logits << 1.0f, 1.0f, 0.5f, 1.0f, 0.1f, 0.2f, 0.2f, 0.15f;
  CHECK(argmax_lowest(logits, 0) == 0);
  CHECK(argmax_lowest(logits, 1) == 1);
}
