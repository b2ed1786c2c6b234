#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "alpt/dataset.hpp"
#include "alpt/error.hpp"
#include "alpt/evaluation.hpp"
#include "alpt/harness.hpp"
#include "alpt/maze.hpp"
#include "alpt/model.hpp"
#include "alpt/training.hpp"

namespace alpt {
namespace cli_detail {

namespace fs = std::filesystem;
using nlohmann::json;

// Training scalar for the command-line tool.
using Scalar = float;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCategory::Io, "cannot open " + path.string());
  out << text;
  require(out.good(), ErrorCategory::Io, "write failed for " + path.string());
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::Io, "cannot open " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::Format, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateOpts {
  std::string name = "maze";
  std::string style = "blocked";
  int width = 20;
  int height = 20;
  double density = 0.15;
  int corridor = 0;  // > 0 builds a corridor of this length instead of a maze
  bool vertical = false;
  uint64_t seed = 0;
};

inline void cmd_generate(const fs::path& dir, const GenerateOpts& o) {
  MazeSpec spec;
  if (o.corridor > 0) {
    spec = make_corridor(o.corridor, o.vertical, o.seed);
  } else {
    auto style = style_from_name(o.style);
    require(style.has_value(), ErrorCategory::Usage, "unknown maze style: " + o.style);
    spec = generate_maze(o.seed, *style, o.width, o.height, o.density);
  }
  std::string maze_rel = o.name + ".json";
  std::string svg_rel = o.name + ".svg";
  save_maze(spec, dir / maze_rel);
  write_text(dir / svg_rel, maze_svg(spec));

  json args{{"name", o.name},       {"style", o.style},       {"width", o.width},
            {"height", o.height},   {"density", o.density},   {"corridor", o.corridor},
            {"vertical", o.vertical}, {"seed", o.seed}};
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "generate"},
                            {"args", args},
                            {"inputs", json::array()},
                            {"outputs", json::array({output_entry(dir, maze_rel,
                                                                  json{{"env_id", spec.env_id}}),
                                                     output_entry(dir, svg_rel)})}});
  std::printf("wrote %s (%s)\n", maze_rel.c_str(), file_digest(dir / maze_rel).c_str());
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

struct CollectOpts {
  std::string maze;
  std::string name = "data";
  int episodes = 500;
  int max_steps = 500;
  double epsilon = 0.5;
  uint64_t seed = 0;
};

inline void cmd_collect(const fs::path& dir, const CollectOpts& o) {
  auto records = load_manifest(dir);
  fs::path maze_path = verify_artifact(dir, o.maze, records);
  MazeSpec spec = load_maze(maze_path);
  TrajectoryDataset ds = collect_trajectories(spec, o.epsilon, o.episodes, o.max_steps, o.seed);
  std::string data_rel = o.name + ".bin";
  save_dataset(ds, dir / data_rel);

  json args{{"maze", o.maze},           {"name", o.name},       {"episodes", o.episodes},
            {"max_steps", o.max_steps}, {"epsilon", o.epsilon}, {"seed", o.seed}};
  json meta{{"episodes", ds.episodes.size()},
            {"transitions", ds.total_transitions()},
            {"labelled", ds.labelled_transitions()}};
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "collect"},
                            {"args", args},
                            {"inputs", json::array({input_entry(dir, o.maze)})},
                            {"outputs", json::array({output_entry(dir, data_rel, meta)})}});
  std::printf("wrote %s: %zu episodes, %lld transitions\n", data_rel.c_str(),
              ds.episodes.size(), static_cast<long long>(ds.total_transitions()));
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

struct MaskOpts {
  std::string data;
  int64_t budget = 0;
  int segment = 10;
  uint64_t seed = 0;
};

inline void cmd_mask(const fs::path& dir, const MaskOpts& o) {
  auto records = load_manifest(dir);
  fs::path data_path = verify_artifact(dir, o.data, records);
  TrajectoryDataset ds = load_dataset(data_path);
  auto [plus, minus] = apply_action_budget(ds, o.budget, o.segment, o.seed);

  fs::path rel(o.data);
  std::string stem = rel.stem().string();
  std::string plus_rel = (rel.parent_path() / (stem + "-plus.bin")).generic_string();
  std::string minus_rel = (rel.parent_path() / (stem + "-minus.bin")).generic_string();
  save_dataset(plus, dir / plus_rel);
  save_dataset(minus, dir / minus_rel);

  json args{{"data", o.data}, {"budget", o.budget}, {"segment", o.segment}, {"seed", o.seed}};
  json plus_meta{{"labelled", plus.labelled_transitions()},
                 {"transitions", plus.total_transitions()},
                 {"budget", o.budget}};
  json minus_meta{{"episodes", minus.episodes.size()},
                  {"transitions", minus.total_transitions()}};
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "mask"},
                            {"args", args},
                            {"inputs", json::array({input_entry(dir, o.data)})},
                            {"outputs", json::array({output_entry(dir, plus_rel, plus_meta),
                                                     output_entry(dir, minus_rel, minus_meta)})}});
  std::printf("wrote %s (%lld labels kept) and %s (%zu unlabelled episodes)\n", plus_rel.c_str(),
              static_cast<long long>(plus.labelled_transitions()), minus_rel.c_str(),
              minus.episodes.size());
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string regime = "alpt";
  std::vector<std::string> sources;
  std::string target_plus;
  std::string target_minus;
  std::string name;  // run directory; empty derives run-<regime>-s<seed>
  int pretrain_steps = 3000;
  int finetune_steps = 0;
  int eval_every = 500;
  double lr = 3e-4;
  double weight_decay = 5e-5;
  double clip = 1.0;
  int warmup = 300;
  int batch = 64;
  int layers = 2;
  int heads = 4;
  int hidden = 128;
  int ffn = 0;
  int context = 5;
  int idm_k = 5;
  int return_bins = 0;
  int reward_bins = 0;
  std::string pseudo = "argmax";
  std::string eval_maze;
  int eval_episodes = 50;
  int eval_max_steps = 100;
  double eval_quantile = 0.85;
  int fixed_return_bin = -1;
  uint64_t seed = 0;
};

inline void cmd_train(const fs::path& dir, const TrainOpts& o) {
  auto records = load_manifest(dir);

  RunConfig run;
  run.regime = regime_from_name(o.regime);
  for (const auto& src : o.sources)
    run.sources.push_back(load_dataset(verify_artifact(dir, src, records)));

  // The target must come out of the masking step, so the label budget is the
  // one the manifest records rather than whatever a stray file contains.
  auto produced = producing_record(records, o.target_plus);
  require(produced.has_value() && produced->value("command", "") == "mask", ErrorCategory::Usage,
          "target " + o.target_plus +
              " was not produced by the mask command; apply an action budget first");
  run.target_labelled = load_dataset(verify_artifact(dir, o.target_plus, records));
  if (!o.target_minus.empty()) {
    run.target_unlabelled = load_dataset(verify_artifact(dir, o.target_minus, records));
  } else {
    run.target_unlabelled.env_id = run.target_labelled.env_id;
    run.target_unlabelled.env_width = run.target_labelled.env_width;
    run.target_unlabelled.env_height = run.target_labelled.env_height;
    run.target_unlabelled.action_vocab = run.target_labelled.action_vocab;
  }

  run.pretrain_steps = o.pretrain_steps;
  run.finetune_steps = o.finetune_steps;
  run.eval_every = o.eval_every;
  run.seed = o.seed;
  run.optimizer.learning_rate = o.lr;
  run.optimizer.weight_decay = o.weight_decay;
  run.optimizer.gradient_clip = o.clip;
  run.optimizer.warmup_steps = o.warmup;
  run.optimizer.batch_size = o.batch;
  run.model.layers = o.layers;
  run.model.heads = o.heads;
  run.model.hidden = o.hidden;
  run.model.ffn_hidden = o.ffn;
  run.model.context_timesteps = o.context;
  run.model.idm_k = o.idm_k;
  run.return_bins = o.return_bins;
  run.reward_bins = o.reward_bins;
  if (o.pseudo == "argmax") {
    run.pseudo.mode = PseudoLabelMode::Argmax;
  } else if (o.pseudo == "sample") {
    run.pseudo.mode = PseudoLabelMode::Sample;
  } else {
    throw Error(ErrorCategory::Usage, "unknown pseudo-label mode: " + o.pseudo);
  }

  std::string run_name =
      o.name.empty() ? "run-" + o.regime + "-s" + std::to_string(o.seed) : o.name;
  fs::path run_dir = dir / run_name;
  require(!fs::exists(run_dir), ErrorCategory::Precondition,
          "run directory already exists: " + run_dir.string());
  fs::create_directories(run_dir);

  std::optional<MazeSpec> eval_spec;
  std::string eval_maze_digest;
  if (!o.eval_maze.empty()) {
    fs::path p = verify_artifact(dir, o.eval_maze, records);
    eval_spec = load_maze(p);
    eval_maze_digest = file_digest(p);
  }

  Trainer<Scalar> trainer(std::move(run));
  const RunConfig& rc = trainer.run();

  // Echo the effective configuration before training so a crashed run still
  // shows what it was doing, and so downstream commands can recover the
  // action vocabulary that the checkpoints were trained with.
  json inputs_echo{{"sources", json::array()},
                   {"target_plus", json{{"path", o.target_plus}}},
                   {"target_minus", o.target_minus.empty()
                                        ? json(nullptr)
                                        : json{{"path", o.target_minus}}},
                   {"eval_maze", o.eval_maze.empty() ? json(nullptr)
                                                     : json{{"path", o.eval_maze},
                                                            {"digest", eval_maze_digest}}}};
  for (const auto& src : o.sources) inputs_echo["sources"].push_back(json{{"path", src}});
  json cfg_echo{{"tool", kToolVersion},
                {"regime", o.regime},
                {"seed", o.seed},
                {"pretrain_steps", rc.pretrain_steps},
                {"finetune_steps", rc.finetune_steps},
                {"eval_every", rc.eval_every},
                {"optimizer",
                 json{{"learning_rate", rc.optimizer.learning_rate},
                      {"weight_decay", rc.optimizer.weight_decay},
                      {"gradient_clip", rc.optimizer.gradient_clip},
                      {"warmup_steps", rc.optimizer.warmup_steps},
                      {"batch_size", rc.optimizer.batch_size}}},
                {"model",
                 json{{"layers", rc.model.layers},
                      {"heads", rc.model.heads},
                      {"hidden", rc.model.hidden},
                      {"ffn_hidden", rc.model.ffn_hidden},
                      {"context_timesteps", rc.model.context_timesteps},
                      {"idm_k", rc.model.idm_k}}},
                {"pseudo", o.pseudo},
                {"return_bins", trainer.dt_config().return_bins},
                {"reward_bins", trainer.dt_config().reward_bins},
                {"action_vocab", trainer.data().global_action_vocab},
                {"inputs", inputs_echo}};
  write_text(run_dir / "config.json", cfg_echo.dump(2) + "\n");

  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  require(metrics.good(), ErrorCategory::Io, "cannot open metrics log in " + run_dir.string());

  trainer.metric_sink = [&](const MetricRow& row) {
    json j{{"type", "train"},
           {"stage", row.stage},
           {"step", row.step},
           {"idm_loss", row.idm_loss},
           {"dt_loss", row.dt_loss},
           {"dt_return_loss", row.dt_return_loss},
           {"dt_action_loss", row.dt_action_loss},
           {"lr", row.lr},
           {"wall_seconds", row.wall_seconds}};
    metrics << j.dump() << "\n" << std::flush;
  };

  std::vector<std::string> ckpt_rels;
  trainer.eval_hook = [&](const std::string& stage, int step) {
    char tag[16];
    std::snprintf(tag, sizeof(tag), "%06d", step);
    std::string rel = run_name + "/checkpoint-" + stage + "-" + tag + ".bin";
    save_checkpoint(trainer.dt_params(), static_cast<uint64_t>(step), dir / rel);
    ckpt_rels.push_back(rel);
    if (eval_spec) {
      EvalConfig ec;
      ec.episodes = o.eval_episodes;
      ec.max_steps = o.eval_max_steps;
      ec.return_quantile = o.eval_quantile;
      ec.fixed_return_bin = o.fixed_return_bin;
      ec.seed = derive_seed(rc.seed, 0x6576616cull);
      EvalReport rep = evaluate(trainer.dt_params(), *eval_spec,
                                trainer.data().global_action_vocab, ec,
                                static_cast<uint64_t>(step));
      EvalLine line{stage,       static_cast<uint64_t>(step), ec.seed,         ec.episodes,
                    rep.mean_return, rep.success_rate,        eval_maze_digest};
      metrics << eval_line_to_json(line).dump() << "\n" << std::flush;
    }
  };

  trainer.run_all();

  uint64_t final_step =
      static_cast<uint64_t>(rc.finetune_steps > 0 ? rc.finetune_steps : rc.pretrain_steps);
  std::string final_rel = run_name + "/checkpoint-final.bin";
  save_checkpoint(trainer.dt_params(), final_step, dir / final_rel);
  std::vector<std::string> out_rels = {run_name + "/config.json", run_name + "/metrics.jsonl",
                                       final_rel};
  if (trainer.has_idm()) {
    std::string idm_rel = run_name + "/idm-final.bin";
    save_checkpoint(trainer.idm_params(), final_step, dir / idm_rel);
    out_rels.push_back(idm_rel);
  }
  out_rels.insert(out_rels.end(), ckpt_rels.begin(), ckpt_rels.end());
  metrics.close();

  json args{{"regime", o.regime},
            {"sources", o.sources},
            {"target_plus", o.target_plus},
            {"target_minus", o.target_minus},
            {"name", run_name},
            {"pretrain_steps", o.pretrain_steps},
            {"finetune_steps", o.finetune_steps},
            {"eval_every", o.eval_every},
            {"lr", o.lr},
            {"weight_decay", o.weight_decay},
            {"warmup", o.warmup},
            {"batch", o.batch},
            {"layers", o.layers},
            {"heads", o.heads},
            {"hidden", o.hidden},
            {"context", o.context},
            {"idm_k", o.idm_k},
            {"pseudo", o.pseudo},
            {"eval_maze", o.eval_maze},
            {"seed", o.seed}};
  json inputs = json::array();
  for (const auto& src : o.sources) inputs.push_back(input_entry(dir, src));
  inputs.push_back(input_entry(dir, o.target_plus));
  if (!o.target_minus.empty()) inputs.push_back(input_entry(dir, o.target_minus));
  if (!o.eval_maze.empty()) inputs.push_back(input_entry(dir, o.eval_maze));
  json outputs = json::array();
  for (const auto& rel : out_rels) outputs.push_back(output_entry(dir, rel));
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "train"},
                            {"args", args},
                            {"inputs", inputs},
                            {"outputs", outputs}});
  std::printf("run %s finished: %zu checkpoints under %s\n", run_name.c_str(),
              ckpt_rels.size() + 1, run_dir.string().c_str());
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string run;
  std::string maze;
  std::vector<uint64_t> seeds = {0, 1, 2};
  std::string stage = "auto";
  int episodes = 100;
  int max_steps = 500;
  double quantile = 0.85;
  int fixed_return_bin = -1;
  std::string mode = "greedy";
};

// Stage checkpoints in a run directory, ordered by step.
inline std::vector<std::pair<uint64_t, std::string>> find_checkpoints(const fs::path& dir,
                                                                      const std::string& run,
                                                                      const std::string& stage) {
  std::vector<std::pair<uint64_t, std::string>> found;
  std::string prefix = "checkpoint-" + stage + "-";
  if (!fs::is_directory(dir / run)) return found;
  for (const auto& entry : fs::directory_iterator(dir / run)) {
    std::string fn = entry.path().filename().string();
    if (fn.size() <= prefix.size() + 4 || fn.rfind(prefix, 0) != 0 ||
        fn.substr(fn.size() - 4) != ".bin")
      continue;
    std::string digits = fn.substr(prefix.size(), fn.size() - prefix.size() - 4);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos)
      continue;
    found.emplace_back(std::stoull(digits), run + "/" + fn);
  }
  std::sort(found.begin(), found.end());
  return found;
}

inline void cmd_eval(const fs::path& dir, const EvalOpts& o) {
  auto records = load_manifest(dir);
  require(!o.seeds.empty(), ErrorCategory::Usage, "at least one seed is required");
  ActionMode mode = action_mode_from_name(o.mode);

  fs::path maze_path = verify_artifact(dir, o.maze, records);
  MazeSpec spec = load_maze(maze_path);
  std::string maze_digest = file_digest(maze_path);

  json cfg = read_json_file(verify_artifact(dir, o.run + "/config.json", records));
  std::vector<std::string> names;
  try {
    names = cfg.at("action_vocab").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::Format,
                "run config lacks an action vocabulary: " + std::string(e.what()));
  }

  std::string stage = o.stage;
  if (stage == "auto")
    stage = find_checkpoints(dir, o.run, "finetune").empty() ? "pretrain" : "finetune";
  require(stage == "pretrain" || stage == "finetune", ErrorCategory::Usage,
          "stage must be auto, pretrain, or finetune");
  auto ckpts = find_checkpoints(dir, o.run, stage);
  require(!ckpts.empty(), ErrorCategory::Precondition,
          "no " + stage + " checkpoints under " + o.run);

  std::vector<std::vector<EvalLine>> lines(o.seeds.size());
  for (const auto& [step, rel] : ckpts) {
    auto ck = load_checkpoint<Scalar>(verify_artifact(dir, rel, records));
    for (size_t i = 0; i < o.seeds.size(); ++i) {
      EvalConfig ec;
      ec.episodes = o.episodes;
      ec.max_steps = o.max_steps;
      ec.return_quantile = o.quantile;
      ec.fixed_return_bin = o.fixed_return_bin;
      ec.action_mode = mode;
      ec.seed = o.seeds[i];
      EvalReport rep = evaluate(ck.params, spec, names, ec, step);
      lines[i].push_back(
          EvalLine{stage, step, o.seeds[i], o.episodes, rep.mean_return, rep.success_rate,
                   maze_digest});
    }
  }

  std::string maze_stem = fs::path(o.maze).stem().string();
  std::vector<std::string> out_rels;
  std::vector<SeedCurve> seed_curves;
  for (size_t i = 0; i < o.seeds.size(); ++i) {
    std::string rel = o.run + "/eval-" + maze_stem + "-s" + std::to_string(o.seeds[i]) + ".jsonl";
    std::string body;
    SeedCurve sc;
    for (const auto& line : lines[i]) {
      body += eval_line_to_json(line).dump() + "\n";
      sc.steps.push_back(line.step);
      sc.values.push_back(line.success_rate);
    }
    write_text(dir / rel, body);
    out_rels.push_back(rel);
    seed_curves.push_back(std::move(sc));
  }

  LearningCurve curve = curve_from_seeds(o.run, seed_curves);
  std::string svg_rel = o.run + "/eval-" + maze_stem + ".svg";
  std::string tsv_rel = o.run + "/eval-" + maze_stem + ".tsv";
  write_text(dir / svg_rel, curve_svg({curve}, spec.env_id, "step", "success rate"));
  write_text(dir / tsv_rel, curve_table({curve}));
  out_rels.push_back(svg_rel);
  out_rels.push_back(tsv_rel);

  json args{{"run", o.run},           {"maze", o.maze},       {"seeds", o.seeds},
            {"stage", stage},         {"episodes", o.episodes}, {"max_steps", o.max_steps},
            {"quantile", o.quantile}, {"fixed_return_bin", o.fixed_return_bin},
            {"mode", o.mode}};
  json inputs = json::array({input_entry(dir, o.maze), input_entry(dir, o.run + "/config.json")});
  for (const auto& [step, rel] : ckpts) inputs.push_back(input_entry(dir, rel));
  json outputs = json::array();
  for (const auto& rel : out_rels) outputs.push_back(output_entry(dir, rel));
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "eval"},
                            {"args", args},
                            {"inputs", inputs},
                            {"outputs", outputs}});
  std::printf("evaluated %zu checkpoints over %zu seeds; final success rate %.3f\n", ckpts.size(),
              o.seeds.size(), curve.points.back().mean);
}

// ---------------------------------------------------------------------------
// plot / compare
// ---------------------------------------------------------------------------

struct CurveGroup {
  std::string label;
  std::vector<std::string> paths;
};

inline std::vector<CurveGroup> parse_curve_specs(const std::vector<std::string>& specs) {
  require(!specs.empty(), ErrorCategory::Usage,
          "at least one --curve label=path[,path...] is required");
  std::vector<CurveGroup> groups;
  for (const auto& s : specs) {
    auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0 && eq + 1 < s.size(), ErrorCategory::Usage,
            "curve spec must look like label=path[,path...]: " + s);
    CurveGroup g;
    g.label = s.substr(0, eq);
    std::string rest = s.substr(eq + 1);
    size_t pos = 0;
    while (pos <= rest.size()) {
      size_t comma = rest.find(',', pos);
      std::string piece = rest.substr(pos, comma == std::string::npos ? comma : comma - pos);
      require(!piece.empty(), ErrorCategory::Usage, "empty path in curve spec: " + s);
      g.paths.push_back(piece);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

inline double metric_value(const EvalLine& line, const std::string& metric) {
  if (metric == "success_rate") return line.success_rate;
  if (metric == "mean_return") return line.mean_return;
  throw Error(ErrorCategory::Usage,
              "unknown metric: " + metric + " (use success_rate or mean_return)");
}

// Picks the requested stage's records; "auto" prefers finetune when the file
// has any, since step counters restart at each stage boundary.
inline std::vector<EvalLine> stage_lines(std::vector<EvalLine> lines, const std::string& stage,
                                         const std::string& where) {
  require(!lines.empty(), ErrorCategory::Precondition, "no evaluation records in " + where);
  std::string want = stage;
  if (want == "auto") {
    want = "pretrain";
    for (const auto& l : lines)
      if (l.stage == "finetune") {
        want = "finetune";
        break;
      }
  }
  require(want == "pretrain" || want == "finetune", ErrorCategory::Usage,
          "stage must be auto, pretrain, or finetune");
  std::vector<EvalLine> kept;
  for (auto& l : lines)
    if (l.stage == want) kept.push_back(std::move(l));
  require(!kept.empty(), ErrorCategory::Precondition,
          "no " + want + " evaluation records in " + where);
  return kept;
}

inline std::vector<LearningCurve> build_curves(const fs::path& dir,
                                               const std::vector<CurveGroup>& groups,
                                               const std::string& metric,
                                               const std::string& stage,
                                               std::set<std::string>* maze_digests) {
  std::vector<LearningCurve> curves;
  for (const auto& g : groups) {
    std::vector<SeedCurve> seeds;
    for (const auto& p : g.paths) {
      auto lines = stage_lines(read_eval_lines(dir / p), stage, p);
      SeedCurve sc;
      for (const auto& l : lines) {
        sc.steps.push_back(l.step);
        sc.values.push_back(metric_value(l, metric));
        if (maze_digests) maze_digests->insert(l.maze_digest);
      }
      seeds.push_back(std::move(sc));
    }
    curves.push_back(curve_from_seeds(g.label, seeds));
  }
  return curves;
}

struct PlotOpts {
  std::vector<std::string> curves;
  std::string name = "curves";
  std::string metric = "success_rate";
  std::string stage = "auto";
  std::string title = "learning curves";
};

inline void cmd_plot(const fs::path& dir, const PlotOpts& o) {
  auto groups = parse_curve_specs(o.curves);
  auto curves = build_curves(dir, groups, o.metric, o.stage, nullptr);
  std::string svg_rel = o.name + ".svg";
  std::string tsv_rel = o.name + ".tsv";
  write_text(dir / svg_rel, curve_svg(curves, o.title, "step", o.metric));
  write_text(dir / tsv_rel, curve_table(curves));

  json args{{"curve", o.curves}, {"name", o.name}, {"metric", o.metric}, {"stage", o.stage}};
  json inputs = json::array();
  for (const auto& g : groups)
    for (const auto& p : g.paths) inputs.push_back(input_entry(dir, p));
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "plot"},
                            {"args", args},
                            {"inputs", inputs},
                            {"outputs", json::array({output_entry(dir, svg_rel),
                                                     output_entry(dir, tsv_rel)})}});
  std::printf("wrote %s and %s\n", svg_rel.c_str(), tsv_rel.c_str());
}

struct CompareOpts {
  std::vector<std::string> curves;
  double threshold = 0.8;
  std::string metric = "success_rate";
  std::string stage = "auto";
  std::string name = "comparison";
};

inline void cmd_compare(const fs::path& dir, const CompareOpts& o) {
  auto groups = parse_curve_specs(o.curves);
  require(groups.size() >= 2, ErrorCategory::Usage, "compare needs at least two --curve groups");
  std::set<std::string> digests;
  auto curves = build_curves(dir, groups, o.metric, o.stage, &digests);
  require(digests.size() == 1, ErrorCategory::Precondition,
          "evaluation records target different mazes; compare needs a single target");

  std::vector<std::optional<uint64_t>> steps;
  json steps_json = json::object();
  for (const auto& c : curves) {
    auto s = steps_to_threshold(c, o.threshold);
    steps.push_back(s);
    steps_json[c.label] = s ? json(*s) : json(nullptr);
  }
  // speedup[a][b] = steps(b) / steps(a): how many times faster `a` reaches
  // the threshold than `b`. Censored curves yield null, never an error.
  json speedup = json::object();
  for (size_t i = 0; i < curves.size(); ++i) {
    json row = json::object();
    for (size_t j = 0; j < curves.size(); ++j) {
      row[curves[j].label] = (steps[i] && steps[j] && *steps[i] > 0)
                                 ? json(static_cast<double>(*steps[j]) /
                                        static_cast<double>(*steps[i]))
                                 : json(nullptr);
    }
    speedup[curves[i].label] = row;
  }
  json labels = json::array();
  for (const auto& c : curves) labels.push_back(c.label);
  json out{{"metric", o.metric},       {"threshold", o.threshold},
           {"maze", *digests.begin()}, {"labels", labels},
           {"steps_to_threshold", steps_json}, {"speedup", speedup}};
  std::string out_rel = o.name + ".json";
  write_text(dir / out_rel, out.dump(2) + "\n");

  json args{{"curve", o.curves},
            {"threshold", o.threshold},
            {"metric", o.metric},
            {"stage", o.stage},
            {"name", o.name}};
  json inputs = json::array();
  for (const auto& g : groups)
    for (const auto& p : g.paths) inputs.push_back(input_entry(dir, p));
  append_manifest(dir, json{{"tool", kToolVersion},
                            {"command", "compare"},
                            {"args", args},
                            {"inputs", inputs},
                            {"outputs", json::array({output_entry(dir, out_rel)})}});

  std::printf("steps to %s >= %g\n", o.metric.c_str(), o.threshold);
  for (size_t i = 0; i < curves.size(); ++i) {
    if (steps[i])
      std::printf("  %-24s %llu\n", curves[i].label.c_str(),
                  static_cast<unsigned long long>(*steps[i]));
    else
      std::printf("  %-24s censored\n", curves[i].label.c_str());
  }
  for (size_t i = 0; i < curves.size(); ++i)
    for (size_t j = 0; j < curves.size(); ++j) {
      if (i == j || !speedup[curves[i].label][curves[j].label].is_number()) continue;
      std::printf("  speedup %s vs %s = %.3f\n", curves[i].label.c_str(),
                  curves[j].label.c_str(),
                  speedup[curves[i].label][curves[j].label].get<double>());
    }
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Entry point: parses everything after the program name. Defined here so the
// test suite can drive the tool in-process.
// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args) {
  namespace fs = std::filesystem;
  using namespace cli_detail;

  CLI::App app{"gridworld pretraining workbench"};
  app.fallthrough();  // global flags may also follow the subcommand name
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  app.set_config("--config", "", "read options from a TOML/INI file");

  std::string out = ".";
  uint64_t seed = 0;
  app.add_option("--out", out, "experiment directory")
      ->envname("ALPT_OUT")
      ->capture_default_str();
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  auto open_dir = [&]() -> fs::path {
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec && fs::is_directory(dir), ErrorCategory::Io,
            "cannot create experiment directory " + dir.string());
    return dir;
  };

  GenerateOpts g;
  auto* cg = app.add_subcommand("generate", "generate a maze and its picture");
  cg->add_option("--name", g.name, "artifact stem")->capture_default_str();
  cg->add_option("--style", g.style, "blocked or tunneled")->capture_default_str();
  cg->add_option("--width", g.width, "grid width")->capture_default_str();
  cg->add_option("--height", g.height, "grid height")->capture_default_str();
  cg->add_option("--density", g.density, "obstacle density in [0,1)")->capture_default_str();
  cg->add_option("--corridor", g.corridor, "build a corridor of this length instead")
      ->capture_default_str();
  cg->add_flag("--vertical", g.vertical, "corridor runs north-south");
  cg->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    g.seed = seed;
    cmd_generate(dir, g);
  });

  CollectOpts c;
  auto* cc = app.add_subcommand("collect", "roll out a noisy optimal policy into a dataset");
  cc->add_option("--maze", c.maze, "maze artifact (experiment-relative)")->required();
  cc->add_option("--name", c.name, "artifact stem")->capture_default_str();
  cc->add_option("--episodes", c.episodes, "episode count")->capture_default_str();
  cc->add_option("--max-steps", c.max_steps, "per-episode step cap")->capture_default_str();
  cc->add_option("--epsilon", c.epsilon, "random-action probability")->capture_default_str();
  cc->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    c.seed = seed;
    cmd_collect(dir, c);
  });

  MaskOpts m;
  auto* cm = app.add_subcommand("mask", "apply an action-label budget to a dataset");
  cm->add_option("--data", m.data, "dataset artifact")->required();
  cm->add_option("--budget", m.budget, "number of action labels to keep")->required();
  cm->add_option("--segment", m.segment, "contiguous labelled segment length")
      ->capture_default_str();
  cm->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    m.seed = seed;
    cmd_mask(dir, m);
  });

  TrainOpts t;
  auto* ct = app.add_subcommand("train", "train a training regime end to end");
  ct->add_option("--regime", t.regime, "alpt, alpt-no-dt-pretrain, dt1, dt1-idm, dt5, dt5-ret")
      ->required();
  ct->add_option("--sources", t.sources, "fully labelled source datasets");
  ct->add_option("--target-plus", t.target_plus, "labelled slice of the target dataset")
      ->required();
  ct->add_option("--target-minus", t.target_minus, "unlabelled slice of the target dataset");
  ct->add_option("--name", t.name, "run directory name (default run-<regime>-s<seed>)");
  auto* pretrain_opt = ct->add_option("--pretrain-steps", t.pretrain_steps,
                                      "ignored default for finetune-only regimes")
                           ->capture_default_str();
  ct->add_option("--finetune-steps", t.finetune_steps)->capture_default_str();
  ct->add_option("--eval-every", t.eval_every)->capture_default_str();
  ct->add_option("--lr", t.lr, "peak learning rate")->capture_default_str();
  ct->add_option("--weight-decay", t.weight_decay)->capture_default_str();
  ct->add_option("--clip", t.clip, "gradient norm clip")->capture_default_str();
  ct->add_option("--warmup", t.warmup, "linear warmup steps")->capture_default_str();
  ct->add_option("--batch", t.batch, "batch size")->capture_default_str();
  ct->add_option("--layers", t.layers)->capture_default_str();
  ct->add_option("--heads", t.heads)->capture_default_str();
  ct->add_option("--hidden", t.hidden)->capture_default_str();
  ct->add_option("--ffn", t.ffn, "feed-forward width (0 = 4x hidden)")->capture_default_str();
  ct->add_option("--context", t.context, "decision-transformer context timesteps")
      ->capture_default_str();
  ct->add_option("--idm-k", t.idm_k, "inverse-dynamics window length")->capture_default_str();
  ct->add_option("--return-bins", t.return_bins, "0 = derive from data")->capture_default_str();
  ct->add_option("--reward-bins", t.reward_bins, "0 = derive from data")->capture_default_str();
  ct->add_option("--pseudo", t.pseudo, "pseudo-label mode: argmax or sample")
      ->capture_default_str();
  ct->add_option("--eval-maze", t.eval_maze, "maze to evaluate on at every checkpoint");
  ct->add_option("--eval-episodes", t.eval_episodes)->capture_default_str();
  ct->add_option("--eval-max-steps", t.eval_max_steps)->capture_default_str();
  ct->add_option("--eval-quantile", t.eval_quantile)->capture_default_str();
  ct->add_option("--fixed-return-bin", t.fixed_return_bin, "-1 = use the quantile rule")
      ->capture_default_str();
  ct->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    t.seed = seed;
    // The stock default only makes sense for regimes with a pretraining
    // stage; an untouched flag should not invalidate the others.
    if (pretrain_opt->count() == 0 && !uses_pretraining(regime_from_name(t.regime)))
      t.pretrain_steps = 0;
    cmd_train(dir, t);
  });

  EvalOpts e;
  auto* ce = app.add_subcommand("eval", "evaluate a run's checkpoints on a maze");
  ce->add_option("--run", e.run, "run directory name")->required();
  ce->add_option("--maze", e.maze, "maze artifact")->required();
  ce->add_option("--seeds", e.seeds, "evaluation seeds")->delimiter(',')->capture_default_str();
  ce->add_option("--stage", e.stage, "auto, pretrain, or finetune")->capture_default_str();
  ce->add_option("--episodes", e.episodes)->capture_default_str();
  ce->add_option("--max-steps", e.max_steps)->capture_default_str();
  ce->add_option("--quantile", e.quantile, "return-conditioning quantile")
      ->capture_default_str();
  ce->add_option("--fixed-return-bin", e.fixed_return_bin, "-1 = use the quantile rule")
      ->capture_default_str();
  ce->add_option("--mode", e.mode, "greedy or sample")->capture_default_str();
  ce->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    cmd_eval(dir, e);
  });

  PlotOpts p;
  auto* cp = app.add_subcommand("plot", "draw learning curves from evaluation records");
  cp->add_option("--curve", p.curves, "label=path[,path...] (repeat per curve)")->required();
  cp->add_option("--name", p.name, "output stem")->capture_default_str();
  cp->add_option("--metric", p.metric, "success_rate or mean_return")->capture_default_str();
  cp->add_option("--stage", p.stage, "auto, pretrain, or finetune")->capture_default_str();
  cp->add_option("--title", p.title)->capture_default_str();
  cp->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    cmd_plot(dir, p);
  });

  CompareOpts q;
  auto* cq = app.add_subcommand("compare", "steps-to-threshold comparison between curves");
  cq->add_option("--curve", q.curves, "label=path[,path...] (repeat per curve)")->required();
  cq->add_option("--threshold", q.threshold, "metric threshold")->capture_default_str();
  cq->add_option("--metric", q.metric, "success_rate or mean_return")->capture_default_str();
  cq->add_option("--stage", q.stage, "auto, pretrain, or finetune")->capture_default_str();
  cq->add_option("--name", q.name, "output stem")->capture_default_str();
  cq->callback([&] {
    fs::path dir = open_dir();
    DirLock lock(dir);
    cmd_compare(dir, q);
  });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::Usage);
  } catch (const Error& err) {
    std::fprintf(stderr, "alpt error [%s]: %s\n", err.category_name(), err.what());
    return static_cast<int>(err.category());
  } catch (const std::exception& err) {
    std::fprintf(stderr, "alpt error: %s\n", err.what());
    return static_cast<int>(ErrorCategory::Generic);
  }
  return 0;
}

}  // namespace alpt
