#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exo/dataset.hpp"

namespace exo::scm {

enum class Mechanism { kLinearGaussian, kMlpNonlinear };

struct ScmNode {
  std::string name;
  bool in_network = false;
  double noise_scale = -1.0;  // < 0: use the spec-wide default
};

// Ground-truth structural causal model for multi-subject generation. Roles
// partition the nodes into the in-study set and the external pool; edges
// must form a DAG.
struct ScmSpec {
  std::vector<ScmNode> nodes;
  std::vector<std::pair<int, int>> edges;  // (parent, child), node indices
  std::vector<double> edge_weights;        // empty: drawn in [0.5, 1.5] from the seed
  Mechanism mechanism = Mechanism::kLinearGaussian;
  int n_subjects = 1;
  int n_samples = 100;
  double coeff_jitter_lo = 0.8;  // per-subject multiplier on mechanism coefficients
  double coeff_jitter_hi = 1.25;
  double root_scale_lo = 0.6;  // per-subject std of exogenous root nodes
  double root_scale_hi = 1.4;
  double noise_scale = 0.6;
  std::string in_network_name = "study";
  std::string external_name = "external";

  int node_index(const std::string& name) const;  // throws UnknownNode
};

// Parents sampled before children in topological order; throws CyclicSpec.
std::vector<int> topological_order(const ScmSpec& spec);

dataset::SubjectDataset generate_random_scm(const ScmSpec& spec, std::uint64_t seed);

// The two-confounder fixture: in-network z1..z5, external s1..s5 where
// s2 and s4 are the confounders, s1 is a mediator, s3 a collider child and
// s5 an isolated node. Edges (weights in parentheses):
//   s2->z1 (1.0), s2->z2 (1.0), s4->z3 (1.0), s4->z4 (1.0),
//   z2->z3 (0.8), z1->z5 (0.7), z4->z5 (0.7),
//   z1->s1 (0.35), s1->z5 (0.5), z2->s3 (0.3), z4->s3 (0.3).
std::pair<dataset::SubjectDataset, ScmSpec> generate_two_confounder_scm(int n_subjects, int n_samples,
                                                              Mechanism mechanism,
                                                              std::uint64_t seed);

// d-separation of a and b given cond, decided by reachability over active
// paths; the ground-truth oracle for all synthetic tests.
bool d_separated(const ScmSpec& spec, const std::string& a, const std::string& b,
                 const std::vector<std::string>& cond);
bool d_separated(const ScmSpec& spec, int a, int b, const std::vector<int>& cond);

}  // namespace exo::scm
