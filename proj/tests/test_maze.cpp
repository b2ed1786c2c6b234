#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <deque>
#include <set>
#include <vector>

#include "alpt/maze.hpp"

using namespace alpt;

namespace {

// Independent distance oracle: plain BFS over the 4-neighbourhood written
// against the wall grid directly, not via MazeSpec::neighbour.
std::vector<int> bfs_distances(const MazeSpec& m, int goal) {
  std::vector<int> dist(static_cast<size_t>(m.cells()), -1);
  std::deque<int> q{goal};
  dist[static_cast<size_t>(goal)] = 0;
  auto push = [&](int r, int c, int d) {
    if (r < 0 || r >= m.height || c < 0 || c >= m.width) return;
    int cell = r * m.width + c;
    if (m.walls[static_cast<size_t>(cell)]) return;
    if (dist[static_cast<size_t>(cell)] != -1) return;
    dist[static_cast<size_t>(cell)] = d;
    q.push_back(cell);
  };
  while (!q.empty()) {
    int cell = q.front();
    q.pop_front();
    int r = cell / m.width, c = cell % m.width, d = dist[static_cast<size_t>(cell)] + 1;
    push(r - 1, c, d);
    push(r + 1, c, d);
    push(r, c - 1, d);
    push(r, c + 1, d);
  }
  return dist;
}

int flood_fill_count(const MazeSpec& m) {
  auto open = m.open_cells();
  if (open.empty()) return 0;
  auto dist = bfs_distances(m, open.front());
  int n = 0;
  for (int c : open)
    if (dist[static_cast<size_t>(c)] != -1) ++n;
  return n;
}

}  // namespace

TEST_CASE("generation is deterministic in seed and parameters") {
  auto a = generate_maze(0, MazeStyle::Blocked, 20, 20, 0.15);
  auto b = generate_maze(0, MazeStyle::Blocked, 20, 20, 0.15);
  auto c = generate_maze(1, MazeStyle::Blocked, 20, 20, 0.15);
  CHECK(a.walls == b.walls);
  CHECK(a.walls != c.walls);
}

TEST_CASE("zero density means no interior walls") {
  for (auto style : {MazeStyle::Blocked, MazeStyle::Tunneled}) {
    auto m = generate_maze(123, style, 20, 20, 0.0);
    CHECK(std::count(m.walls.begin(), m.walls.end(), 1) == 0);
    CHECK(flood_fill_count(m) == 400);
  }
}

TEST_CASE("blocked mazes are connected and contain obstacles") {
  auto m = generate_maze(0, MazeStyle::Blocked, 20, 20, 0.15);
  CHECK(m.width == 20);
  CHECK(m.height == 20);
  int walls = static_cast<int>(std::count(m.walls.begin(), m.walls.end(), 1));
  CHECK(walls > 0);
  CHECK(flood_fill_count(m) == 400 - walls);
}

TEST_CASE("tunneled mazes keep a gap in every wall line") {
  auto m = generate_maze(7, MazeStyle::Tunneled, 20, 20, 0.15);
  CHECK(flood_fill_count(m) == static_cast<int>(m.open_cells().size()));
  for (int r = 0; r < m.height; ++r) {
    int open = 0;
    for (int c = 0; c < m.width; ++c) open += !m.is_wall(m.cell_at(r, c));
    CHECK(open >= 1);
  }
  for (int c = 0; c < m.width; ++c) {
    int open = 0;
    for (int r = 0; r < m.height; ++r) open += !m.is_wall(m.cell_at(r, c));
    CHECK(open >= 1);
  }
}

TEST_CASE("impossible density reports a bounded-retry failure") {
  CHECK_THROWS_AS(generate_maze(3, MazeStyle::Blocked, 20, 20, 0.95), Error);
}

TEST_CASE("step dynamics: goal reward, wall bump, border no-op, bad action") {
  auto m = generate_maze(0, MazeStyle::Blocked, 20, 20, 0.0);

  EnvState beside_goal{m.cell_at(5, 4), m.cell_at(5, 5)};
  auto hit = step(m, beside_goal, Action::Right);
  CHECK(hit.reward == 1.0f);
  CHECK(hit.done);
  CHECK(hit.next.agent == m.cell_at(5, 5));

  MazeSpec walled = m;
  walled.walls[static_cast<size_t>(m.cell_at(5, 6))] = 1;
  EnvState facing{m.cell_at(5, 5), m.cell_at(9, 9)};
  auto bump = step(walled, facing, Action::Right);
  CHECK(bump.next.agent == facing.agent);
  CHECK(bump.reward == 0.0f);
  CHECK_FALSE(bump.done);

  EnvState corner{m.cell_at(0, 0), m.cell_at(9, 9)};
  CHECK(step(m, corner, Action::Up).next.agent == corner.agent);
  CHECK(step(m, corner, Action::Left).next.agent == corner.agent);

  auto corridor = make_corridor(8, true, 0);
  EnvState in_corridor{corridor.cell_at(3, 1), corridor.cell_at(6, 1)};
  CHECK_THROWS_AS(step(corridor, in_corridor, Action::Left), Error);
}

TEST_CASE("optimal policy strictly decreases the oracle BFS distance") {
  auto m = generate_maze(5, MazeStyle::Tunneled, 20, 20, 0.15);
  int goal = m.open_cells()[10];
  auto policy = optimal_policy(m, goal);
  auto oracle = bfs_distances(m, goal);
  for (int c = 0; c < m.cells(); ++c) {
    if (m.is_wall(c)) continue;
    CHECK(policy.distance[static_cast<size_t>(c)] == oracle[static_cast<size_t>(c)]);
    if (c == goal) continue;
    int8_t a = policy.action[static_cast<size_t>(c)];
    REQUIRE(a >= 0);
    int next = m.neighbour(c, static_cast<Action>(a));
    CHECK(oracle[static_cast<size_t>(next)] == oracle[static_cast<size_t>(c)] - 1);
  }
}

TEST_CASE("following the policy reaches the goal in exactly BFS-distance steps") {
  auto m = generate_maze(2, MazeStyle::Blocked, 20, 20, 0.15);
  auto open = m.open_cells();
  int goal = open.back();
  auto policy = optimal_policy(m, goal);
  auto oracle = bfs_distances(m, goal);
  for (size_t i = 0; i < open.size(); i += 7) {
    int start = open[i];
    if (start == goal) continue;
    EnvState s{start, goal};
    int steps = 0;
    while (s.agent != goal && steps < 10000) {
      auto out = step(m, s, static_cast<Action>(policy.action[static_cast<size_t>(s.agent)]));
      s = out.next;
      ++steps;
    }
    CHECK(steps == oracle[static_cast<size_t>(start)]);
  }
}

TEST_CASE("policy tie-breaking follows the canonical action order") {
  // Open grid, goal in the middle: the cell directly below-right of the goal
  // can go Up or Left; Up wins. The cell directly left must go Right.
  auto m = generate_maze(0, MazeStyle::Blocked, 8, 8, 0.0);
  int goal = m.cell_at(3, 3);
  auto policy = optimal_policy(m, goal);
  CHECK(policy.action[static_cast<size_t>(m.cell_at(4, 4))] ==
        static_cast<int8_t>(Action::Up));
  CHECK(policy.action[static_cast<size_t>(m.cell_at(3, 2))] ==
        static_cast<int8_t>(Action::Right));
  CHECK(policy.action[static_cast<size_t>(m.cell_at(2, 2))] ==
        static_cast<int8_t>(Action::Down));
}

TEST_CASE("policy requires an open goal cell") {
  auto m = generate_maze(0, MazeStyle::Blocked, 20, 20, 0.15);
  int wall_cell = -1;
  for (int c = 0; c < m.cells(); ++c)
    if (m.is_wall(c)) { wall_cell = c; break; }
  REQUIRE(wall_cell >= 0);
  CHECK_THROWS_AS(optimal_policy(m, wall_cell), Error);
}

TEST_CASE("greedy collection produces BFS-length fully successful episodes") {
  auto m = generate_maze(4, MazeStyle::Blocked, 20, 20, 0.15);
  auto ds = collect_trajectories(m, 0.0, 50, 500, 77);
  REQUIRE(ds.episodes.size() == 50);
  CHECK(ds.env_id == m.env_id);
  CHECK(ds.action_vocab == std::vector<std::string>{"up", "down", "left", "right"});
  for (const auto& ep : ds.episodes) {
    REQUIRE(ep.consistent());
    REQUIRE(ep.successful());
    int start = token_agent(ep.states[0], m.cells());
    int goal = token_goal(ep.states[0], m.cells());
    auto oracle = bfs_distances(m, goal);
    CHECK(ep.length() == oracle[static_cast<size_t>(start)]);
    for (float g : ep.returns_to_go) CHECK(g == 1.0f);
  }
}

TEST_CASE("epsilon-greedy actions disagree with the policy at the expected rate") {
  auto m = generate_maze(9, MazeStyle::Blocked, 20, 20, 0.15);
  auto ds = collect_trajectories(m, 0.5, 400, 500, 31);
  int64_t steps = 0, disagree = 0;
  for (const auto& ep : ds.episodes) {
    int goal = token_goal(ep.states[0], m.cells());
    auto policy = optimal_policy(m, goal);
    for (int t = 0; t < ep.length(); ++t) {
      int agent = token_agent(ep.states[static_cast<size_t>(t)], m.cells());
      ++steps;
      if (ep.actions[static_cast<size_t>(t)] !=
          policy.action[static_cast<size_t>(agent)])
        ++disagree;
    }
  }
  REQUIRE(steps >= 10000);
  double frac = double(disagree) / double(steps);
  // uniform exploration re-picks the policy action 1/4 of the time
  CHECK(frac == Catch::Approx(0.375).margin(0.03));
}

TEST_CASE("collection is deterministic given the seed") {
  auto m = generate_maze(6, MazeStyle::Tunneled, 20, 20, 0.1);
  auto a = collect_trajectories(m, 0.5, 20, 100, 5);
  auto b = collect_trajectories(m, 0.5, 20, 100, 5);
  CHECK(serialize_dataset(a) == serialize_dataset(b));
  auto c = collect_trajectories(m, 0.5, 20, 100, 6);
  CHECK(serialize_dataset(a) != serialize_dataset(c));
}

TEST_CASE("every episode rewards exactly at the final step or not at all") {
  auto m = generate_maze(8, MazeStyle::Blocked, 20, 20, 0.15);
  auto ds = collect_trajectories(m, 0.9, 100, 40, 123);
  bool saw_truncated = false;
  for (const auto& ep : ds.episodes) {
    float total = 0;
    for (size_t t = 0; t < ep.rewards.size(); ++t) {
      total += ep.rewards[t];
      if (t + 1 < ep.rewards.size()) CHECK(ep.rewards[t] == 0.0f);
    }
    CHECK((total == 0.0f || total == 1.0f));
    if (total == 0.0f) {
      saw_truncated = true;
      CHECK(ep.length() == 40);
    }
  }
  CHECK(saw_truncated);
}

TEST_CASE("recorded actions match the displacement between consecutive states") {
  auto m = generate_maze(10, MazeStyle::Blocked, 20, 20, 0.15);
  auto ds = collect_trajectories(m, 0.5, 100, 500, 44);
  int checked = 0;
  for (const auto& ep : ds.episodes) {
    for (int t = 0; t + 1 < ep.length(); ++t) {
      int prev = token_agent(ep.states[static_cast<size_t>(t)], m.cells());
      int next = token_agent(ep.states[static_cast<size_t>(t + 1)], m.cells());
      auto implied = displacement_action(prev, next, m.width);
      if (implied) {
        CHECK(ep.actions[static_cast<size_t>(t)] == static_cast<int32_t>(*implied));
        ++checked;
      }
    }
  }
  CHECK(checked > 1000);
}

TEST_CASE("goal state of successful episodes matches the synthesized terminal token") {
  auto m = generate_maze(12, MazeStyle::Blocked, 20, 20, 0.15);
  auto ds = collect_trajectories(m, 0.3, 30, 500, 9);
  for (const auto& ep : ds.episodes) {
    if (!ep.successful()) continue;
    auto term = ds.terminal_state(ep);
    REQUIRE(term.has_value());
    int goal = token_goal(ep.states.back(), m.cells());
    CHECK(token_agent(*term, m.cells()) == goal);
    CHECK(token_goal(*term, m.cells()) == goal);
    // the last recorded action indeed moves the agent onto the goal
    int last_agent = token_agent(ep.states.back(), m.cells());
    auto a = static_cast<Action>(ep.actions.back());
    CHECK(m.neighbour(last_agent, a) == goal);
  }
}

TEST_CASE("corridor environments restrict the action vocabulary") {
  auto v = make_corridor(12, true, 1);
  CHECK(v.action_vocab() == std::vector<std::string>{"up", "down"});
  auto h = make_corridor(12, false, 1);
  CHECK(h.action_vocab() == std::vector<std::string>{"left", "right"});

  auto ds = collect_trajectories(v, 0.5, 30, 200, 17);
  CHECK(ds.action_vocab == std::vector<std::string>{"up", "down"});
  for (const auto& ep : ds.episodes)
    for (int32_t a : ep.actions) CHECK((a == 0 || a == 1));

  int goal = v.cell_at(9, 1);
  auto policy = optimal_policy(v, goal);
  CHECK(policy.action[static_cast<size_t>(v.cell_at(2, 1))] ==
        static_cast<int8_t>(Action::Down));
  CHECK(policy.action[static_cast<size_t>(v.cell_at(11, 1))] ==
        static_cast<int8_t>(Action::Up));
}

TEST_CASE("maze rendering emits one cell rectangle per grid cell") {
  auto m = generate_maze(0, MazeStyle::Blocked, 8, 6, 0.1);
  auto svg = maze_svg(m, m.open_cells().front(), m.open_cells().back());
  size_t rects = 0;
  for (size_t pos = svg.find("<rect"); pos != std::string::npos;
       pos = svg.find("<rect", pos + 1))
    ++rects;
  CHECK(rects == static_cast<size_t>(m.cells()) + 1);  // +1 background
  CHECK(svg.find("<circle") != std::string::npos);
  CHECK(svg.rfind("<svg", 0) == 0);
}
