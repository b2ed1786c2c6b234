#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "alpt/digest.hpp"
#include "alpt/error.hpp"
#include "alpt/evaluation.hpp"
#include "alpt/maze.hpp"

namespace alpt {

inline constexpr const char* kToolVersion = "alpt 0.1.0";

// ---------------------------------------------------------------------------
// Maze files
// ---------------------------------------------------------------------------

inline nlohmann::json maze_to_json(const MazeSpec& spec) {
  std::string walls;
  walls.reserve(spec.walls.size());
  for (uint8_t w : spec.walls) walls.push_back(w ? '1' : '0');
  return nlohmann::json{{"env_id", spec.env_id},
                        {"width", spec.width},
                        {"height", spec.height},
                        {"style", style_name(spec.style)},
                        {"seed", spec.seed},
                        {"actions", spec.action_vocab()},
                        {"walls", walls}};
}

inline MazeSpec maze_from_json(const nlohmann::json& j) {
  MazeSpec spec;
  try {
    spec.env_id = j.at("env_id").get<std::string>();
    spec.width = j.at("width").get<int>();
    spec.height = j.at("height").get<int>();
    spec.seed = j.at("seed").get<uint64_t>();
    auto style = style_from_name(j.at("style").get<std::string>());
    require(style.has_value(), ErrorCategory::Format, "unknown maze style in file");
    spec.style = *style;
    spec.action_set.clear();
    for (const auto& name : j.at("actions")) {
      auto a = action_from_name(name.get<std::string>());
      require(a.has_value(), ErrorCategory::Format, "unknown action name in maze file");
      spec.action_set.push_back(*a);
    }
    std::string walls = j.at("walls").get<std::string>();
    require(static_cast<int>(walls.size()) == spec.width * spec.height, ErrorCategory::Format,
            "wall grid does not match the maze dimensions");
    spec.walls.clear();
    for (char c : walls) {
      require(c == '0' || c == '1', ErrorCategory::Format, "wall grid must be 0/1");
      spec.walls.push_back(c == '1' ? 1 : 0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::Format, std::string("malformed maze file: ") + e.what());
  }
  require(spec.width >= 1 && spec.height >= 1, ErrorCategory::Format,
          "maze dimensions must be positive");
  require(!spec.action_set.empty(), ErrorCategory::Format, "maze needs at least one action");
  return spec;
}

inline void save_maze(const MazeSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCategory::Io, "cannot open " + path.string());
  out << maze_to_json(spec).dump(2) << "\n";
  require(out.good(), ErrorCategory::Io, "write failed for " + path.string());
}

inline MazeSpec load_maze(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::Format, "malformed maze file " + path.string() + ": " + e.what());
  }
  return maze_from_json(j);
}

// ---------------------------------------------------------------------------
// Experiment manifest
//
// One experiment lives in one directory. Every command appends one record to
// manifest.jsonl naming its inputs and outputs with content digests, so any
// artifact can be traced to the invocation that produced it and stale files
// are caught before they poison a run.
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestName = "manifest.jsonl";

inline void append_manifest(const std::filesystem::path& dir, const nlohmann::json& record) {
  std::ofstream out(dir / kManifestName, std::ios::app);
  require(out.good(), ErrorCategory::Io, "cannot open manifest in " + dir.string());
  out << record.dump() << "\n";
  require(out.good(), ErrorCategory::Io, "manifest write failed in " + dir.string());
}

inline std::vector<nlohmann::json> load_manifest(const std::filesystem::path& dir) {
  std::vector<nlohmann::json> records;
  std::ifstream in(dir / kManifestName);
  if (!in.good()) return records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::Format, std::string("malformed manifest line: ") + e.what());
    }
  }
  return records;
}

// Most recent record that lists `rel` among its outputs.
inline std::optional<nlohmann::json> producing_record(const std::vector<nlohmann::json>& records,
                                                      const std::string& rel) {
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (!it->contains("outputs")) continue;
    for (const auto& out : (*it)["outputs"])
      if (out.value("path", "") == rel) return *it;
  }
  return std::nullopt;
}

inline std::optional<std::string> recorded_digest(const std::vector<nlohmann::json>& records,
                                                  const std::string& rel) {
  auto rec = producing_record(records, rel);
  if (!rec) return std::nullopt;
  for (const auto& out : (*rec)["outputs"])
    if (out.value("path", "") == rel) return out.value("digest", "");
  return std::nullopt;
}

// Resolves a manifest-recorded artifact to its absolute path, refusing to
// hand out files that were never recorded or have changed since.
inline std::filesystem::path verify_artifact(const std::filesystem::path& dir,
                                             const std::string& rel,
                                             const std::vector<nlohmann::json>& records) {
  auto expected = recorded_digest(records, rel);
  require(expected.has_value(), ErrorCategory::Precondition,
          "artifact " + rel + " is not recorded in the experiment manifest");
  std::filesystem::path path = dir / rel;
  require(std::filesystem::exists(path), ErrorCategory::Io, "missing artifact: " + path.string());
  std::string actual = file_digest(path);
  require(actual == *expected, ErrorCategory::DigestMismatch,
          "artifact " + rel + " changed since it was recorded (" + actual + " vs " + *expected +
              "); refusing to run");
  return path;
}

inline nlohmann::json output_entry(const std::filesystem::path& dir, const std::string& rel,
                                   nlohmann::json meta = nlohmann::json::object()) {
  nlohmann::json j{{"path", rel}, {"digest", file_digest(dir / rel)}};
  if (!meta.empty()) j["meta"] = std::move(meta);
  return j;
}

inline nlohmann::json input_entry(const std::filesystem::path& dir, const std::string& rel) {
  return nlohmann::json{{"path", rel}, {"digest", file_digest(dir / rel)}};
}

// ---------------------------------------------------------------------------
// Directory lock
// ---------------------------------------------------------------------------

// Guards an experiment directory against concurrent commands. The lock file
// is created exclusively and removed on destruction; a crash leaves it
// behind, which the next command reports rather than silently stealing.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    require(f != nullptr, ErrorCategory::Locked,
            "experiment directory is locked (" + path_.string() +
                " exists); another command may be running");
    std::fputs(kToolVersion, f);
    std::fclose(f);
  }

  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Evaluation records
// ---------------------------------------------------------------------------

// One line-delimited record per evaluation point, shared between train-time
// evaluation and the standalone eval command so plot/compare can consume
// either.
struct EvalLine {
  std::string stage;
  uint64_t step = 0;
  uint64_t seed = 0;
  int episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  std::string maze_digest;
};

inline nlohmann::json eval_line_to_json(const EvalLine& line) {
  return nlohmann::json{{"type", "eval"},         {"stage", line.stage},
                        {"step", line.step},      {"seed", line.seed},
                        {"episodes", line.episodes}, {"mean_return", line.mean_return},
                        {"success_rate", line.success_rate}, {"maze", line.maze_digest}};
}

inline std::vector<EvalLine> read_eval_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::Io, "cannot open " + path.string());
  std::vector<EvalLine> lines;
  std::string raw;
  while (std::getline(in, raw)) {
    if (raw.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::Format,
                  "malformed record in " + path.string() + ": " + e.what());
    }
    if (j.value("type", "") != "eval") continue;
    EvalLine line;
    line.stage = j.value("stage", "");
    line.step = j.value("step", uint64_t{0});
    line.seed = j.value("seed", uint64_t{0});
    line.episodes = j.value("episodes", 0);
    line.mean_return = j.value("mean_return", 0.0);
    line.success_rate = j.value("success_rate", 0.0);
    line.maze_digest = j.value("maze", "");
    lines.push_back(std::move(line));
  }
  return lines;
}

// First step at which the aggregated curve reaches the threshold.
inline std::optional<uint64_t> steps_to_threshold(const LearningCurve& curve, double threshold) {
  for (const auto& pt : curve.points)
    if (pt.mean >= threshold - 1e-12) return pt.step;
  return std::nullopt;
}

}  // namespace alpt
