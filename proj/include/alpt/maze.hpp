#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "alpt/dataset.hpp"
#include "alpt/error.hpp"
#include "alpt/rng.hpp"
#include "alpt/svg.hpp"

namespace alpt {

// Canonical action order; also the tie-break order for the optimal policy.
enum class Action : int32_t { Up = 0, Down = 1, Left = 2, Right = 3 };

inline constexpr std::array<const char*, 4> kActionNames = {"up", "down", "left", "right"};
inline constexpr int kNumActions = 4;

inline const char* action_name(Action a) { return kActionNames[static_cast<size_t>(a)]; }

inline std::optional<Action> action_from_name(const std::string& name) {
  for (int i = 0; i < kNumActions; ++i)
    if (name == kActionNames[static_cast<size_t>(i)]) return static_cast<Action>(i);
  return std::nullopt;
}

// Row/col deltas indexed by Action. Cells are row-major: cell = row*width + col.
inline constexpr std::array<int, 4> kRowDelta = {-1, 1, 0, 0};
inline constexpr std::array<int, 4> kColDelta = {0, 0, -1, 1};

enum class MazeStyle { Blocked, Tunneled };

inline const char* style_name(MazeStyle s) {
  return s == MazeStyle::Blocked ? "blocked" : "tunneled";
}

inline std::optional<MazeStyle> style_from_name(const std::string& name) {
  if (name == "blocked") return MazeStyle::Blocked;
  if (name == "tunneled") return MazeStyle::Tunneled;
  return std::nullopt;
}

struct MazeSpec {
  int width = 20;
  int height = 20;
  std::vector<uint8_t> walls;  // row-major; 1 = wall
  MazeStyle style = MazeStyle::Blocked;
  uint64_t seed = 0;
  std::string env_id;
  // The environment's action set. Gridworld mazes use all four directions;
  // restricted variants (e.g. corridors) may use a subset.
  std::vector<Action> action_set = {Action::Up, Action::Down, Action::Left, Action::Right};

  int cells() const { return width * height; }
  bool in_bounds(int row, int col) const {
    return row >= 0 && row < height && col >= 0 && col < width;
  }
  bool is_wall(int cell) const { return walls[static_cast<size_t>(cell)] != 0; }
  int row_of(int cell) const { return cell / width; }
  int col_of(int cell) const { return cell % width; }
  int cell_at(int row, int col) const { return row * width + col; }

  // Off-grid moves behave like walls: the move is a no-op.
  int neighbour(int cell, Action a) const {
    int r = row_of(cell) + kRowDelta[static_cast<size_t>(a)];
    int c = col_of(cell) + kColDelta[static_cast<size_t>(a)];
    if (!in_bounds(r, c)) return cell;
    int n = cell_at(r, c);
    return is_wall(n) ? cell : n;
  }

  int local_action_id(Action a) const {
    for (size_t i = 0; i < action_set.size(); ++i)
      if (action_set[i] == a) return static_cast<int>(i);
    return -1;
  }

  std::vector<std::string> action_vocab() const {
    std::vector<std::string> v;
    for (Action a : action_set) v.push_back(action_name(a));
    return v;
  }

  std::vector<int> open_cells() const {
    std::vector<int> open;
    for (int c = 0; c < cells(); ++c)
      if (!is_wall(c)) open.push_back(c);
    return open;
  }
};

struct EnvState {
  int agent = 0;
  int goal = 0;
};

struct StepOutcome {
  EnvState next;
  float reward = 0.0f;
  bool done = false;
};

// State token shared by all gridworlds of the same size: agent cell paired
// with goal cell. The terminal (goal, goal) configuration is representable.
inline uint32_t state_token(int agent, int goal, int cells) {
  return static_cast<uint32_t>(agent) * static_cast<uint32_t>(cells) +
         static_cast<uint32_t>(goal);
}

inline int token_agent(uint32_t token, int cells) {
  return static_cast<int>(token / static_cast<uint32_t>(cells));
}

inline int token_goal(uint32_t token, int cells) {
  return static_cast<int>(token % static_cast<uint32_t>(cells));
}

inline StepOutcome step(const MazeSpec& spec, const EnvState& state, Action action) {
  int a = static_cast<int>(action);
  require(a >= 0 && a < kNumActions && spec.local_action_id(action) >= 0,
          "invalid action id for this environment");
  StepOutcome out;
  out.next.agent = spec.neighbour(state.agent, action);
  out.next.goal = state.goal;
  out.reward = (out.next.agent == state.goal) ? 1.0f : 0.0f;
  out.done = out.reward > 0.5f;
  return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

// Flood fill restricted to the environment's action set; returns the number
// of open cells reachable from `start`.
inline int reachable_count(const MazeSpec& spec, int start) {
  std::vector<uint8_t> seen(static_cast<size_t>(spec.cells()), 0);
  std::queue<int> q;
  q.push(start);
  seen[static_cast<size_t>(start)] = 1;
  int count = 0;
  while (!q.empty()) {
    int c = q.front();
    q.pop();
    ++count;
    for (Action a : spec.action_set) {
      int n = spec.neighbour(c, a);
      if (n != c && !seen[static_cast<size_t>(n)]) {
        seen[static_cast<size_t>(n)] = 1;
        q.push(n);
      }
    }
  }
  return count;
}

inline bool is_connected(const MazeSpec& spec) {
  auto open = spec.open_cells();
  if (open.size() < 2) return false;
  return reachable_count(spec, open.front()) == static_cast<int>(open.size());
}

inline void place_blocked_obstacles(MazeSpec& spec, double density, Rng& rng) {
  int target = static_cast<int>(std::lround(density * spec.cells()));
  int walls = 0;
  int placements = 0;
  while (walls < target && placements < 1000) {
    ++placements;
    int h = rng.next_int(1, 3);
    int w = rng.next_int(1, 3);
    int r0 = rng.next_int(0, spec.height - 1);
    int c0 = rng.next_int(0, spec.width - 1);
    for (int r = r0; r < std::min(r0 + h, spec.height); ++r) {
      for (int c = c0; c < std::min(c0 + w, spec.width); ++c) {
        uint8_t& cell = spec.walls[static_cast<size_t>(spec.cell_at(r, c))];
        if (!cell) {
          cell = 1;
          ++walls;
        }
      }
    }
  }
}

inline void place_tunneled_obstacles(MazeSpec& spec, double density, Rng& rng) {
  int lines = static_cast<int>(std::lround(density * std::min(spec.width, spec.height)));
  std::vector<uint8_t> used_row(static_cast<size_t>(spec.height), 0);
  std::vector<uint8_t> used_col(static_cast<size_t>(spec.width), 0);
  std::vector<int> gaps;  // carved after all lines so crossings cannot seal a gap
  for (int i = 0; i < lines; ++i) {
    bool horizontal = rng.next_bool(0.5);
    if (horizontal) {
      int row = rng.next_int(0, spec.height - 1);
      if (used_row[static_cast<size_t>(row)]) continue;
      used_row[static_cast<size_t>(row)] = 1;
      for (int c = 0; c < spec.width; ++c)
        spec.walls[static_cast<size_t>(spec.cell_at(row, c))] = 1;
      int gap_count = rng.next_int(1, 2);
      int g0 = rng.next_int(0, spec.width - 1);
      gaps.push_back(spec.cell_at(row, g0));
      if (gap_count == 2) {
        int g1 = rng.next_int(0, spec.width - 1);
        gaps.push_back(spec.cell_at(row, g1));
      }
    } else {
      int col = rng.next_int(0, spec.width - 1);
      if (used_col[static_cast<size_t>(col)]) continue;
      used_col[static_cast<size_t>(col)] = 1;
      for (int r = 0; r < spec.height; ++r)
        spec.walls[static_cast<size_t>(spec.cell_at(r, col))] = 1;
      int gap_count = rng.next_int(1, 2);
      int g0 = rng.next_int(0, spec.height - 1);
      gaps.push_back(spec.cell_at(g0, col));
      if (gap_count == 2) {
        int g1 = rng.next_int(0, spec.height - 1);
        gaps.push_back(spec.cell_at(g1, col));
      }
    }
  }
  for (int g : gaps) spec.walls[static_cast<size_t>(g)] = 0;
}

}  // namespace detail

inline MazeSpec generate_maze(uint64_t seed, MazeStyle style, int width, int height,
                              double obstacle_density) {
  require(width >= 4 && height >= 4, "maze must be at least 4x4");
  require(obstacle_density >= 0.0 && obstacle_density < 1.0,
          "obstacle density must lie in [0,1)");
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    MazeSpec spec;
    spec.width = width;
    spec.height = height;
    spec.style = style;
    spec.seed = seed;
    spec.walls.assign(static_cast<size_t>(width * height), 0);
    spec.env_id = std::string("maze-") + style_name(style) + "-" + std::to_string(width) +
                  "x" + std::to_string(height) + "-seed" + std::to_string(seed);
    Rng rng(derive_seed(seed, 0x6d617a65ull + static_cast<uint64_t>(attempt)));  // "maze"
    if (style == MazeStyle::Blocked)
      detail::place_blocked_obstacles(spec, obstacle_density, rng);
    else
      detail::place_tunneled_obstacles(spec, obstacle_density, rng);
    if (detail::is_connected(spec)) return spec;
  }
  throw Error(ErrorCategory::Precondition,
              "maze generation failed to produce a connected layout after " +
                  std::to_string(kMaxAttempts) + " attempts (density too high?)");
}

// Single open row or column; the action set is restricted to the two
// directions of travel, so two such environments can have disjoint vocabularies.
inline MazeSpec make_corridor(int length, bool vertical, uint64_t seed) {
  require(length >= 4, "corridor must be at least 4 cells long");
  MazeSpec spec;
  spec.width = vertical ? 4 : length;
  spec.height = vertical ? length : 4;
  spec.style = MazeStyle::Blocked;
  spec.seed = seed;
  spec.walls.assign(static_cast<size_t>(spec.width * spec.height), 1);
  if (vertical) {
    for (int r = 0; r < spec.height; ++r)
      spec.walls[static_cast<size_t>(spec.cell_at(r, 1))] = 0;
    spec.action_set = {Action::Up, Action::Down};
    spec.env_id = "corridor-v-" + std::to_string(length) + "-seed" + std::to_string(seed);
  } else {
    for (int c = 0; c < spec.width; ++c)
      spec.walls[static_cast<size_t>(spec.cell_at(1, c))] = 0;
    spec.action_set = {Action::Left, Action::Right};
    spec.env_id = "corridor-h-" + std::to_string(length) + "-seed" + std::to_string(seed);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Optimal policy
// ---------------------------------------------------------------------------

inline constexpr int32_t kUnreachable = -1;

struct PolicyTable {
  int goal = 0;
  std::vector<int8_t> action;     // per cell; -1 at the goal and on walls
  std::vector<int32_t> distance;  // BFS distance to goal; -1 if unreachable
};

inline PolicyTable optimal_policy(const MazeSpec& spec, int goal) {
  require(goal >= 0 && goal < spec.cells() && !spec.is_wall(goal),
          "goal must be an open cell");
  PolicyTable table;
  table.goal = goal;
  table.action.assign(static_cast<size_t>(spec.cells()), -1);
  table.distance.assign(static_cast<size_t>(spec.cells()), kUnreachable);
  std::queue<int> q;
  table.distance[static_cast<size_t>(goal)] = 0;
  q.push(goal);
  while (!q.empty()) {
    int c = q.front();
    q.pop();
    for (Action a : spec.action_set) {
      int n = spec.neighbour(c, a);
      if (n != c && table.distance[static_cast<size_t>(n)] == kUnreachable) {
        table.distance[static_cast<size_t>(n)] = table.distance[static_cast<size_t>(c)] + 1;
        q.push(n);
      }
    }
  }
  // First action in canonical order that strictly decreases distance.
  for (int c = 0; c < spec.cells(); ++c) {
    if (spec.is_wall(c) || c == goal || table.distance[static_cast<size_t>(c)] == kUnreachable)
      continue;
    for (Action a : spec.action_set) {
      int n = spec.neighbour(c, a);
      if (n != c &&
          table.distance[static_cast<size_t>(n)] == table.distance[static_cast<size_t>(c)] - 1) {
        table.action[static_cast<size_t>(c)] = static_cast<int8_t>(a);
        break;
      }
    }
  }
  return table;
}

// Direction implied by a one-cell displacement between consecutive agent
// positions; nullopt when the agent did not move (wall bumps are ambiguous).
inline std::optional<Action> displacement_action(int prev_cell, int next_cell, int width) {
  if (prev_cell == next_cell) return std::nullopt;
  int dr = next_cell / width - prev_cell / width;
  int dc = next_cell % width - prev_cell % width;
  for (int a = 0; a < kNumActions; ++a)
    if (dr == kRowDelta[static_cast<size_t>(a)] && dc == kColDelta[static_cast<size_t>(a)])
      return static_cast<Action>(a);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Data collection
// ---------------------------------------------------------------------------

inline TrajectoryDataset collect_trajectories(const MazeSpec& spec, double epsilon, int count,
                                              int max_len, uint64_t seed) {
  require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must lie in [0,1]");
  require(count > 0 && max_len > 0, "count and max_len must be positive");
  auto open = spec.open_cells();
  require(open.size() >= 2, "need at least two open cells");

  TrajectoryDataset ds;
  ds.env_id = spec.env_id;
  ds.env_width = spec.width;
  ds.env_height = spec.height;
  ds.action_vocab = spec.action_vocab();
  int n = spec.cells();

  for (int e = 0; e < count; ++e) {
    // Per-episode seed stream, so episode contents are order-independent.
    Rng rng(derive_seed(seed, 0x657069ull * 1000003ull + static_cast<uint64_t>(e)));
    int start = static_cast<int>(open[rng.next_below(open.size())]);
    int goal = start;
    while (goal == start) goal = static_cast<int>(open[rng.next_below(open.size())]);
    PolicyTable policy = optimal_policy(spec, goal);

    Episode ep;
    ep.env_id = spec.env_id;
    EnvState state{start, goal};
    for (int t = 0; t < max_len; ++t) {
      Action a;
      if (rng.next_double() < epsilon) {
        a = spec.action_set[rng.next_below(spec.action_set.size())];
      } else {
        int8_t pa = policy.action[static_cast<size_t>(state.agent)];
        require(pa >= 0, "policy undefined at a visited cell");
        a = static_cast<Action>(pa);
      }
      StepOutcome out = step(spec, state, a);
      ep.states.push_back(state_token(state.agent, state.goal, n));
      ep.actions.push_back(spec.local_action_id(a));
      ep.rewards.push_back(out.reward);
      state = out.next;
      if (out.done) break;
    }
    compute_returns_to_go(ep);
    ds.episodes.push_back(std::move(ep));
  }
  ds.label_budget_used = static_cast<uint64_t>(ds.total_transitions());
  return ds;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string maze_svg(const MazeSpec& spec, int start = -1, int goal = -1) {
  constexpr double cell = 24.0;
  constexpr double margin = 8.0;
  SvgDoc doc(spec.width * cell + 2 * margin, spec.height * cell + 2 * margin);
  doc.rect(0, 0, spec.width * cell + 2 * margin, spec.height * cell + 2 * margin, "#ffffff");
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      bool wall = spec.is_wall(spec.cell_at(r, c));
      doc.rect(margin + c * cell, margin + r * cell, cell, cell, wall ? "#37474f" : "#fafafa",
               "#cfd8dc", 0.5);
    }
  }
  auto marker = [&](int at, const std::string& colour) {
    if (at < 0) return;
    double cx = margin + (spec.col_of(at) + 0.5) * cell;
    double cy = margin + (spec.row_of(at) + 0.5) * cell;
    doc.circle(cx, cy, cell * 0.3, colour);
  };
  marker(start, "#1e88e5");
  marker(goal, "#e53935");
  return doc.str();
}

}  // namespace alpt
