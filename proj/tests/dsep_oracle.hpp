#pragma once

#include <functional>
#include <set>
#include <utility>
#include <vector>

#include "exo/scm.hpp"

namespace test_util {

// Independent oracle: enumerate all simple undirected paths between a and b
// and test each for activeness under the collider rules.
inline bool brute_force_d_separated(const exo::scm::ScmSpec& spec, int a, int b,
                                    const std::vector<int>& cond) {
  const int n = static_cast<int>(spec.nodes.size());
  std::vector<std::vector<int>> children(n);
  std::set<std::pair<int, int>> directed;
  for (const auto& [p, c] : spec.edges) {
    children[p].push_back(c);
    directed.insert({p, c});
  }
  std::vector<bool> in_cond(n, false);
  for (int c : cond) in_cond[c] = true;

  std::vector<std::vector<bool>> descendant(n, std::vector<bool>(n, false));
  for (int v = 0; v < n; ++v) {
    std::vector<int> stack{v};
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int c : children[u]) {
        if (!descendant[v][c]) {
          descendant[v][c] = true;
          stack.push_back(c);
        }
      }
    }
  }
  const auto collider_open = [&](int v) {
    if (in_cond[v]) return true;
    for (int c : cond) {
      if (descendant[v][c]) return true;
    }
    return false;
  };

  std::vector<int> path{a};
  std::vector<bool> on_path(static_cast<std::size_t>(n), false);
  on_path[static_cast<std::size_t>(a)] = true;
  bool connected = false;
  const std::function<void()> extend = [&]() {
    if (connected) return;
    const int tail = path.back();
    if (tail == b) {
      bool active = true;
      for (std::size_t i = 1; i + 1 < path.size(); ++i) {
        const int prev = path[i - 1];
        const int mid = path[i];
        const int next = path[i + 1];
        const bool collider = directed.count({prev, mid}) > 0 && directed.count({next, mid}) > 0;
        if (collider ? !collider_open(mid) : in_cond[mid]) {
          active = false;
          break;
        }
      }
      if (active) connected = true;
      return;
    }
    for (int next = 0; next < n; ++next) {
      if (on_path[static_cast<std::size_t>(next)]) continue;
      if (directed.count({tail, next}) == 0 && directed.count({next, tail}) == 0) continue;
      path.push_back(next);
      on_path[static_cast<std::size_t>(next)] = true;
      extend();
      path.pop_back();
      on_path[static_cast<std::size_t>(next)] = false;
    }
  };
  extend();
  return !connected;
}

}  // namespace test_util
