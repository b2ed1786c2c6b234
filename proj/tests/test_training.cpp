#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "alpt/dataset.hpp"
#include "alpt/maze.hpp"
#include "alpt/model.hpp"
#include "alpt/training.hpp"

#include "model_test_util.hpp"

using namespace alpt;
using alpt::testutil::randomize_params;

namespace {

TrajectoryDataset tiny_maze_data(uint64_t seed, int count = 40, double eps = 0.0) {
  MazeSpec spec = generate_maze(seed, MazeStyle::Blocked, 6, 6, 0.2);
  return collect_trajectories(spec, eps, count, 60, seed + 1);
}

TrajectoryDataset strip_all(const TrajectoryDataset& ds) {
  TrajectoryDataset out = ds;
  for (Episode& ep : out.episodes)
    for (int32_t& a : ep.actions) a = kNoAction;
  out.label_budget_used = 0;
  return out;
}

TrajectoryDataset empty_like(const TrajectoryDataset& ds) {
  TrajectoryDataset out = ds;
  out.episodes.clear();
  out.label_budget_used = 0;
  return out;
}

ModelHP small_hp() {
  ModelHP hp;
  hp.layers = 2;
  hp.heads = 2;
  hp.hidden = 32;
  hp.context_timesteps = 5;
  hp.idm_k = 2;
  return hp;
}

OptimizerConfig small_opt(int warmup, int batch = 8) {
  OptimizerConfig cfg;
  cfg.warmup_steps = warmup;
  cfg.batch_size = batch;
  return cfg;
}

RunConfig maze_run(Regime regime, uint64_t seed, int pretrain, int finetune, int budget = 60) {
  TrajectoryDataset full = tiny_maze_data(1234);
  auto [plus, minus] = apply_action_budget(full, budget, 10, 7);
  RunConfig run;
  run.regime = regime;
  run.target_labelled = plus;
  run.target_unlabelled = minus;
  run.pretrain_steps = pretrain;
  run.finetune_steps = finetune;
  run.eval_every = 1;
  run.seed = seed;
  run.optimizer = small_opt(std::max(1, (pretrain + finetune) / 5));
  run.model = small_hp();
  return run;
}

template <typename S>
bool params_equal(const TransformerParams<S>& a, const TransformerParams<S>& b) {
  std::vector<const Mat<S>*> bs;
  visit_params(b, [&](const std::string&, const Mat<S>& t) { bs.push_back(&t); });
  bool same = true;
  std::size_t i = 0;
  visit_params(a, [&](const std::string&, const Mat<S>& t) {
    if (i >= bs.size() || t.rows() != bs[i]->rows() || t.cols() != bs[i]->cols() ||
        !(t.array() == bs[i]->array()).all())
      same = false;
    ++i;
  });
  return same && i == bs.size();
}

}  // namespace

TEST_CASE("regime names round-trip and classify correctly") {
  for (Regime r : {Regime::ALPT, Regime::ALPT_NoDTPretrain, Regime::DT1, Regime::DT1_IDM,
                   Regime::DT5, Regime::DT5_RET}) {
    CHECK(regime_from_name(regime_name(r)) == r);
  }
  CHECK_THROWS_AS(regime_from_name("dt9"), Error);

  CHECK(uses_idm(Regime::ALPT));
  CHECK(uses_idm(Regime::ALPT_NoDTPretrain));
  CHECK(uses_idm(Regime::DT1_IDM));
  CHECK_FALSE(uses_idm(Regime::DT1));
  CHECK_FALSE(uses_idm(Regime::DT5));
  CHECK_FALSE(uses_idm(Regime::DT5_RET));

  CHECK(uses_pretraining(Regime::ALPT));
  CHECK(uses_pretraining(Regime::ALPT_NoDTPretrain));
  CHECK(uses_pretraining(Regime::DT5));
  CHECK(uses_pretraining(Regime::DT5_RET));
  CHECK_FALSE(uses_pretraining(Regime::DT1));
  CHECK_FALSE(uses_pretraining(Regime::DT1_IDM));
}

TEST_CASE("run configuration validation") {
  RunConfig ok = maze_run(Regime::ALPT, 1, 10, 0);
  CHECK_NOTHROW(ok.validate());

  SECTION("warmup beyond the step budget") {
    RunConfig bad = ok;
    bad.optimizer.warmup_steps = 11;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad.optimizer.warmup_steps = 10;  // equality is allowed
    CHECK_NOTHROW(bad.validate());
  }
  SECTION("pretraining steps on a finetune-only regime") {
    RunConfig bad = maze_run(Regime::DT1, 1, 0, 10);
    CHECK_NOTHROW(bad.validate());
    bad.pretrain_steps = 5;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
  SECTION("labels hiding in the unlabelled dataset") {
    RunConfig bad = ok;
    bad.target_unlabelled.episodes[0].actions[0] = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
  SECTION("partially labelled source") {
    RunConfig bad = ok;
    bad.sources.push_back(bad.target_labelled);  // has stripped positions
    CHECK_THROWS_AS(bad.validate(), Error);
  }
  SECTION("context shorter than the IDM window") {
    RunConfig bad = ok;
    bad.model.idm_k = 6;
    bad.model.context_timesteps = 5;
    CHECK_THROWS_AS(bad.validate(), Error);
    RunConfig fine = bad;
    fine.regime = Regime::DT5;  // no IDM, no pseudo-labelling
    fine.pretrain_steps = 10;
    fine.finetune_steps = 0;
    CHECK_NOTHROW(fine.validate());
  }
  SECTION("empty labelled target") {
    RunConfig bad = ok;
    bad.target_labelled.episodes.clear();
    CHECK_THROWS_AS(bad.validate(), Error);
  }
  SECTION("emphasis weight count") {
    RunConfig bad = ok;
    bad.source_weights = {1.0};
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("untrained pseudo-labels break ties toward the lowest action id") {
  TransformerConfig cfg;
  cfg.kind = ModelKind::Idm;
  cfg.mask = MaskKind::Full;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.context_tokens = 3;  // k = 2
  cfg.state_vocab = 50;
  cfg.action_vocab = 4;
  cfg.seed = 5;
  TransformerParams<float> idm = init_params<float>(cfg);

  // Zero-initialized heads give exactly uniform logits at every position.
  std::vector<int32_t> labels = pseudo_label(idm, {3u, 17u, 42u});
  REQUIRE(labels.size() == 2);
  CHECK(labels[0] == 0);
  CHECK(labels[1] == 0);

  CHECK_THROWS_AS(pseudo_label(idm, {3u, 17u}), Error);
  CHECK_THROWS_AS(pseudo_label(idm, {3u, 17u, 42u, 1u}), Error);

  PseudoLabelPolicy sample;
  sample.mode = PseudoLabelMode::Sample;
  CHECK_THROWS_AS(pseudo_label(idm, {3u, 17u, 42u}, sample, nullptr), Error);

  // Sampling from uniform logits visits every action.
  Rng rng(77);
  std::set<int32_t> seen;
  for (int i = 0; i < 100; ++i) {
    auto l = pseudo_label(idm, {3u, 17u, 42u}, sample, &rng);
    seen.insert(l[0]);
    seen.insert(l[1]);
  }
  CHECK(seen == std::set<int32_t>{0, 1, 2, 3});
}

TEST_CASE("pseudo-labelling a batch fills gaps and never touches true labels") {
  TrajectoryDataset full = tiny_maze_data(55);
  auto [plus, minus] = apply_action_budget(full, 80, 6, 3);
  MergedDataset data = merge({plus, minus});

  const int ctx = 5, k = 2;
  DtSampler sampler(data, ctx, false, 2, 2, 99);
  DtBatch batch = sampler.draw(32);
  DtBatch before = batch;

  TransformerConfig cfg;
  cfg.kind = ModelKind::Idm;
  cfg.mask = MaskKind::Full;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.context_tokens = k + 1;
  cfg.state_factor = 36;
  cfg.action_vocab = 4;
  cfg.seed = 6;
  TransformerParams<float> idm = init_params<float>(cfg);
  randomize_params(idm, 11, 0.3);  // non-trivial logits

  pseudo_label_batch(idm, batch);

  for (int r = 0; r < batch.size; ++r) {
    for (int t = 0; t < ctx; ++t) {
      if (before.label_present(r, t) == 1) {
        CHECK(batch.action_labels(r, t) == before.action_labels(r, t));
        CHECK(batch.action_inputs(r, t) == before.action_inputs(r, t));
        CHECK(batch.label_present(r, t) == 1);
      } else if (t < ctx - 1 || before.next_states(r, ctx - 1) != kNoAction) {
        // Gap with a known successor chain: must now carry a label.
        CHECK(batch.label_present(r, t) == 1);
        CHECK(batch.action_labels(r, t) >= 0);
        CHECK(batch.action_labels(r, t) < 4);
        CHECK(batch.action_inputs(r, t) == batch.action_labels(r, t));
      } else {
        // Final position without a successor state stays unlabelled.
        CHECK(batch.label_present(r, t) == 0);
        CHECK(batch.action_labels(r, t) == kNoAction);
        CHECK(batch.action_inputs(r, t) == static_cast<int32_t>(data.placeholder_action_id()));
      }
    }
  }
}

TEST_CASE("batched pseudo-labels agree with the single-window operation") {
  TransformerConfig cfg;
  cfg.kind = ModelKind::Idm;
  cfg.mask = MaskKind::Full;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.context_tokens = 3;  // k = 2
  cfg.state_vocab = 60;
  cfg.action_vocab = 4;
  cfg.seed = 9;
  TransformerParams<float> idm = init_params<float>(cfg);
  randomize_params(idm, 21, 0.3);

  // One hand-built row of exactly k timesteps.
  DtBatch b;
  b.size = 1;
  b.timesteps = 2;
  b.states = MatXi(1, 2);
  b.states << 10, 20;
  b.next_states = MatXi(1, 2);
  b.next_states << 20, 30;
  b.returns = MatXi::Zero(1, 2);
  b.rewards = MatXi::Zero(1, 2);
  b.action_inputs = MatXi::Constant(1, 2, 4);  // placeholder
  b.action_labels = MatXi::Constant(1, 2, kNoAction);
  b.label_present = MatXi::Zero(1, 2);

  pseudo_label_batch(idm, b);
  std::vector<int32_t> direct = pseudo_label(idm, {10u, 20u, 30u});
  CHECK(b.action_labels(0, 0) == direct[0]);
  CHECK(b.action_labels(0, 1) == direct[1]);
}

TEST_CASE("trainer wires the model to the data") {
  RunConfig run = maze_run(Regime::ALPT, 3, 10, 0);
  Trainer<float> tr(run);
  CHECK(tr.has_idm());
  CHECK(tr.dt_config().action_vocab == 4);
  CHECK(tr.dt_config().state_factor == 36);
  CHECK(tr.dt_config().return_bins == 2);
  CHECK(tr.dt_config().reward_bins == 2);
  CHECK(tr.dt_config().context_tokens == 20);
  CHECK(tr.idm_config().context_tokens == 3);
  CHECK(tr.data().sources.size() == 2);  // target labelled + unlabelled

  Trainer<float> dt5(maze_run(Regime::DT5, 3, 10, 0));
  CHECK_FALSE(dt5.has_idm());
  CHECK_THROWS_AS(dt5.idm_params(), Error);
}

TEST_CASE("stage plans route each regime to its data") {
  RunConfig run = maze_run(Regime::ALPT, 3, 5, 5);
  TrajectoryDataset src = tiny_maze_data(77, 10);
  run.sources = {src};
  run.optimizer.warmup_steps = 2;

  auto flags = [](const StagePlan& p) {
    return std::vector<int>{p.train_idm, p.train_dt, p.pseudo_labels, p.dt_labelled_only};
  };

  SECTION("alpt") {
    Trainer<float> tr(run);
    StagePlan pre = tr.plan(true);
    CHECK(flags(pre) == std::vector<int>{1, 1, 1, 0});
    CHECK(pre.idm_include == std::vector<char>{1, 1, 0});  // sources + D+, not D-
    CHECK(pre.dt_include == std::vector<char>{1, 1, 1});
    StagePlan fin = tr.plan(false);
    CHECK(flags(fin) == std::vector<int>{1, 1, 1, 0});
    CHECK(fin.idm_include == std::vector<char>{0, 1, 0});  // D+ only
    CHECK(fin.dt_include == std::vector<char>{0, 1, 1});
  }
  SECTION("alpt without dt pretraining") {
    run.regime = Regime::ALPT_NoDTPretrain;
    Trainer<float> tr(run);
    StagePlan pre = tr.plan(true);
    CHECK(flags(pre) == std::vector<int>{1, 0, 0, 0});
    StagePlan fin = tr.plan(false);
    CHECK(flags(fin) == std::vector<int>{1, 1, 1, 0});
  }
  SECTION("dt1 trains only on the labelled target") {
    run.regime = Regime::DT1;
    run.pretrain_steps = 0;
    Trainer<float> tr(run);
    CHECK_THROWS_AS(tr.plan(true), Error);
    StagePlan fin = tr.plan(false);
    CHECK(flags(fin) == std::vector<int>{0, 1, 0, 1});
    CHECK(fin.dt_include == std::vector<char>{0, 1, 0});
  }
  SECTION("dt1 with idm stays on target data") {
    run.regime = Regime::DT1_IDM;
    run.pretrain_steps = 0;
    Trainer<float> tr(run);
    StagePlan fin = tr.plan(false);
    CHECK(flags(fin) == std::vector<int>{1, 1, 1, 0});
    CHECK(fin.idm_include == std::vector<char>{0, 1, 0});
    CHECK(fin.dt_include == std::vector<char>{0, 1, 1});
  }
  SECTION("dt5 ignores unlabelled data entirely") {
    run.regime = Regime::DT5;
    Trainer<float> tr(run);
    StagePlan pre = tr.plan(true);
    CHECK(flags(pre) == std::vector<int>{0, 1, 0, 1});
    CHECK(pre.dt_include == std::vector<char>{1, 1, 0});
    StagePlan fin = tr.plan(false);
    CHECK(fin.dt_include == std::vector<char>{0, 1, 0});
  }
  SECTION("dt5-ret adds the unlabelled data without pseudo-labels") {
    run.regime = Regime::DT5_RET;
    Trainer<float> tr(run);
    StagePlan pre = tr.plan(true);
    CHECK(flags(pre) == std::vector<int>{0, 1, 0, 0});
    CHECK(pre.dt_include == std::vector<char>{1, 1, 1});
    StagePlan fin = tr.plan(false);
    CHECK(flags(fin) == std::vector<int>{0, 1, 0, 0});
    CHECK(fin.dt_include == std::vector<char>{0, 1, 1});
  }
}

TEST_CASE("zero pretraining steps leave the parameters at initialization") {
  RunConfig run = maze_run(Regime::ALPT, 12, 0, 10);
  run.optimizer.warmup_steps = 2;
  Trainer<float> stepped(run);
  std::vector<MetricRow> rows = stepped.pretrain();
  CHECK(rows.empty());

  Trainer<float> fresh(run);
  CHECK(params_equal(stepped.dt_params(), fresh.dt_params()));
  CHECK(params_equal(stepped.idm_params(), fresh.idm_params()));
}

TEST_CASE("pretraining is refused for finetune-only regimes") {
  RunConfig run = maze_run(Regime::DT1, 12, 0, 10);
  run.optimizer.warmup_steps = 2;
  Trainer<float> tr(run);
  CHECK_THROWS_AS(tr.pretrain(), Error);
}

TEST_CASE("metrics and hooks follow the eval cadence") {
  RunConfig run = maze_run(Regime::ALPT, 8, 12, 0);
  run.eval_every = 5;
  run.optimizer.warmup_steps = 4;
  Trainer<float> tr(run);

  std::vector<int> sink_steps;
  std::vector<int> hook_steps;
  tr.metric_sink = [&](const MetricRow& r) { sink_steps.push_back(r.step); };
  tr.eval_hook = [&](const std::string& stage, int step) {
    CHECK(stage == "pretrain");
    hook_steps.push_back(step);
  };
  std::vector<MetricRow> rows = tr.pretrain();

  std::vector<int> want = {5, 10, 12};
  REQUIRE(rows.size() == want.size());
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(rows[i].step == want[i]);
    CHECK(rows[i].stage == "pretrain");
    CHECK(std::isfinite(rows[i].idm_loss));
    CHECK(std::isfinite(rows[i].dt_loss));
    CHECK(rows[i].dt_loss ==
          Catch::Approx(rows[i].dt_return_loss + rows[i].dt_action_loss).margin(1e-6));
    CHECK(rows[i].lr > 0);
    CHECK(rows[i].wall_seconds >= 0);
  }
  CHECK(sink_steps == want);
  CHECK(hook_steps == want);
}

TEST_CASE("identical seeds reproduce the run bitwise") {
  auto make = [] {
    RunConfig run = maze_run(Regime::ALPT, 404, 6, 4);
    run.optimizer.warmup_steps = 3;
    return run;
  };
  Trainer<float> a(make());
  Trainer<float> b(make());
  std::vector<MetricRow> ra = a.run_all();
  std::vector<MetricRow> rb = b.run_all();
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].idm_loss == rb[i].idm_loss);
    CHECK(ra[i].dt_loss == rb[i].dt_loss);
  }
  CHECK(params_equal(a.dt_params(), b.dt_params()));
  CHECK(params_equal(a.idm_params(), b.idm_params()));
}

TEST_CASE("seed changes the trajectory") {
  RunConfig run = maze_run(Regime::ALPT, 404, 6, 0);
  run.optimizer.warmup_steps = 3;
  Trainer<float> a(run);
  run.seed = 405;
  Trainer<float> b(run);
  a.pretrain();
  b.pretrain();
  CHECK_FALSE(params_equal(a.dt_params(), b.dt_params()));
}

TEST_CASE("training with an oracle labeller matches training on true labels") {
  // Epsilon-zero maze data: the optimal policy always moves, so the action is
  // always recoverable from the displacement between consecutive agent cells.
  // Two trainers on identical datasets, seeds, and schedules; one fills label
  // gaps from displacements, the other restores the original labels.  Their
  // decision-transformer loss sequences must agree.
  TrajectoryDataset full = tiny_maze_data(2024, 30);
  auto [plus, minus_unused] = apply_action_budget(full, 50, 8, 5);
  TrajectoryDataset minus = strip_all(full);

  auto make_run = [&] {
    RunConfig run;
    run.regime = Regime::ALPT;
    run.target_labelled = plus;
    run.target_unlabelled = minus;
    run.pretrain_steps = 25;
    run.finetune_steps = 0;
    run.eval_every = 1;
    run.seed = 31337;
    run.optimizer = small_opt(5);
    run.model = small_hp();
    return run;
  };

  const int cells = 36, width = 6;
  auto oracle_hook = [&](DtBatch& b) {
    for (int r = 0; r < b.size; ++r) {
      for (int t = 0; t < b.timesteps; ++t) {
        if (b.label_present(r, t) == 1) continue;
        int32_t next = b.next_states(r, t);
        REQUIRE(next != kNoAction);  // every episode here ends in success
        auto a = displacement_action(token_agent(b.states(r, t), cells),
                                     token_agent(next, cells), width);
        REQUIRE(a.has_value());
        b.action_labels(r, t) = static_cast<int32_t>(*a);
        b.action_inputs(r, t) = static_cast<int32_t>(*a);
        b.label_present(r, t) = 1;
      }
    }
  };
  auto truth_hook = [&](DtBatch& b) {
    for (int r = 0; r < b.size; ++r) {
      const WindowRef& w = b.window_of_row[static_cast<size_t>(r)];
      // Both merged sources keep the original episode order.
      const Episode& orig = full.episodes[static_cast<size_t>(w.episode)];
      for (int t = 0; t < b.timesteps; ++t) {
        if (b.label_present(r, t) == 1) continue;
        int32_t a = orig.actions[static_cast<size_t>(w.start + t)];
        REQUIRE(a != kNoAction);
        b.action_labels(r, t) = a;
        b.action_inputs(r, t) = a;
        b.label_present(r, t) = 1;
      }
    }
  };

  Trainer<float> with_oracle(make_run());
  with_oracle.label_hook = oracle_hook;
  Trainer<float> with_truth(make_run());
  with_truth.label_hook = truth_hook;

  std::vector<MetricRow> ra = with_oracle.pretrain();
  std::vector<MetricRow> rb = with_truth.pretrain();
  REQUIRE(ra.size() == 25);
  REQUIRE(rb.size() == 25);
  for (size_t i = 0; i < ra.size(); ++i) {
    INFO("step " << i + 1);
    CHECK(std::abs(ra[i].dt_loss - rb[i].dt_loss) < 1e-6);
    CHECK(std::abs(ra[i].dt_action_loss - rb[i].dt_action_loss) < 1e-6);
  }
  CHECK(params_equal(with_oracle.dt_params(), with_truth.dt_params()));
}

TEST_CASE("the idm learns the maze inverse dynamics to high accuracy") {
  // Fully labelled target, IDM-only pretraining; afterwards the pseudo-labels
  // must reproduce the true actions nearly everywhere (every transition in
  // epsilon-zero data is displacement-unambiguous).
  TrajectoryDataset full = tiny_maze_data(6000, 50);
  RunConfig run;
  run.regime = Regime::ALPT_NoDTPretrain;
  run.target_labelled = full;
  run.target_unlabelled = empty_like(full);
  run.pretrain_steps = 2000;
  run.finetune_steps = 0;
  run.eval_every = 100;
  run.seed = 9001;
  run.optimizer = small_opt(100, 16);
  run.optimizer.learning_rate = 1e-2;
  run.model = small_hp();
  Trainer<float> tr(run);
  std::vector<MetricRow> rows = tr.pretrain();

  REQUIRE(rows.size() >= 2);
  CHECK(rows.back().idm_loss < rows.front().idm_loss);
  CHECK(rows.back().idm_loss < 0.1);

  // Accuracy over fresh windows drawn from the same data.
  MergedDataset data = tr.data();
  IdmSampler sampler(data, run.model.idm_k, true, 5150);
  int correct = 0, total = 0;
  for (int rep = 0; rep < 8; ++rep) {
    IdmBatch batch = sampler.draw(64);
    IdmOut<float> out = idm_forward(tr.idm_params(), batch.states);
    for (int r = 0; r < batch.size; ++r)
      for (int i = 0; i < batch.k; ++i) {
        int32_t pick = argmax_lowest(out.logits, static_cast<Eigen::Index>(r) * batch.k + i);
        correct += pick == batch.actions(r, i) ? 1 : 0;
        ++total;
      }
  }
  INFO("accuracy " << static_cast<double>(correct) / total);
  CHECK(static_cast<double>(correct) / total >= 0.99);
}

TEST_CASE("finetune-only baselines train and improve") {
  RunConfig run = maze_run(Regime::DT1, 77, 0, 60, 120);
  run.optimizer.warmup_steps = 10;
  Trainer<float> tr(run);
  std::vector<MetricRow> rows = tr.finetune();
  REQUIRE(rows.size() == 60);
  for (const MetricRow& r : rows) {
    CHECK(std::isnan(r.idm_loss));  // no IDM anywhere in this regime
    CHECK(std::isfinite(r.dt_loss));
  }
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += rows[static_cast<size_t>(i)].dt_loss;
    last += rows[rows.size() - 1 - static_cast<size_t>(i)].dt_loss;
  }
  CHECK(last < first);
}

TEST_CASE("dt5-ret consumes unlabelled windows with the action term masked") {
  RunConfig run = maze_run(Regime::DT5_RET, 21, 8, 8, 40);
  run.optimizer.warmup_steps = 4;
  Trainer<float> tr(run);
  std::vector<MetricRow> rows = tr.run_all();
  REQUIRE(rows.size() == 16);
  for (const MetricRow& r : rows) {
    CHECK(std::isnan(r.idm_loss));
    CHECK(std::isfinite(r.dt_return_loss));
    // Mixed batches keep a finite action term from the labelled positions.
    CHECK(r.dt_action_loss >= 0.0);
  }
}
