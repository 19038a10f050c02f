#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "exo/kernel_independence.hpp"

namespace exo::pc {

// Undirected skeleton after conditional-independence pruning with
// conditioning sets of size at most two. No orientation phase.
struct Skeleton {
  std::vector<std::string> nodes;
  std::set<std::pair<int, int>> edges;  // (i, j) with i < j
  std::map<std::pair<int, int>, std::vector<int>> separating_sets;

  bool has_edge(const std::string& a, const std::string& b) const;
};

struct PcConfig {
  double alpha = 0.05;
  kernel::NullConfig null_cfg;
  int workers = 1;
};

// Starts from the complete graph; level 0 removes unconditionally
// independent pairs, level 1 pairs independent given a single neighbor,
// level 2 pairs independent given a neighbor pair. Removals are collected
// per level and applied together, so the edge set does not depend on node
// ordering.
Skeleton pc_skeleton(const std::vector<std::string>& names,
                     const std::vector<kernel::SampleVector>& series, const PcConfig& cfg);

// One `nodeA<TAB>nodeB` line per edge, lexicographically sorted.
std::string to_edge_list(const Skeleton& s);

}  // namespace exo::pc
