#include "exo/scm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <deque>

#include "exo/errors.hpp"
#include "exo/rng.hpp"

namespace exo::scm {

namespace {

struct Adjacency {
  std::vector<std::vector<int>> parents;
  std::vector<std::vector<int>> children;
};

Adjacency adjacency(const ScmSpec& spec) {
  Adjacency adj;
  const int n = static_cast<int>(spec.nodes.size());
  adj.parents.resize(n);
  adj.children.resize(n);
  for (const auto& [p, c] : spec.edges) {
    if (p < 0 || p >= n || c < 0 || c >= n) throw UnknownNode("edge endpoint out of range");
    adj.parents[c].push_back(p);
    adj.children[p].push_back(c);
  }
  return adj;
}

// Per-node MLP mechanism: one tanh hidden layer with weights drawn once per
// spec seed, shared across subjects; per-subject jitter scales the output.
struct NodeMlp {
  Eigen::MatrixXd w1;  // hidden x parents
  Eigen::VectorXd b1;
  Eigen::VectorXd w2;  // hidden
};

}  // namespace

int ScmSpec::node_index(const std::string& name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].name == name) return static_cast<int>(i);
  }
  throw UnknownNode("unknown node: " + name);
}

std::vector<int> topological_order(const ScmSpec& spec) {
  const int n = static_cast<int>(spec.nodes.size());
  const Adjacency adj = adjacency(spec);
  std::vector<int> in_degree(n, 0);
  for (int v = 0; v < n; ++v) in_degree[v] = static_cast<int>(adj.parents[v].size());
  std::deque<int> ready;
  for (int v = 0; v < n; ++v) {
    if (in_degree[v] == 0) ready.push_back(v);
  }
  std::vector<int> order;
  order.reserve(n);
  while (!ready.empty()) {
    const int v = ready.front();
    ready.pop_front();
    order.push_back(v);
    for (int c : adj.children[v]) {
      if (--in_degree[c] == 0) ready.push_back(c);
    }
  }
  if (static_cast<int>(order.size()) != n) throw CyclicSpec("edge list contains a cycle");
  return order;
}

dataset::SubjectDataset generate_random_scm(const ScmSpec& spec, std::uint64_t seed) {
  if (spec.n_subjects < 1) throw ConfigError("generate_random_scm: n_subjects < 1");
  if (spec.n_samples < 8) throw ConfigError("generate_random_scm: n_samples < 8");
  const int n_nodes = static_cast<int>(spec.nodes.size());
  const int n_edges = static_cast<int>(spec.edges.size());
  const std::vector<int> order = topological_order(spec);
  const Adjacency adj = adjacency(spec);

  std::vector<double> weights = spec.edge_weights;
  Rng structural(mix_seed(seed, 0x73637475ULL));
  if (weights.empty()) {
    weights.resize(n_edges);
    for (int e = 0; e < n_edges; ++e) {
      // Bounded away from zero so faithfulness holds with margin.
      const double mag = structural.uniform(0.5, 1.5);
      weights[e] = structural.uniform() < 0.5 ? -mag : mag;
    }
  } else if (static_cast<int>(weights.size()) != n_edges) {
    throw ConfigError("edge_weights size mismatch");
  }

  std::vector<NodeMlp> mlps;
  if (spec.mechanism == Mechanism::kMlpNonlinear) {
    mlps.resize(n_nodes);
    constexpr int kHidden = 4;
    for (int v = 0; v < n_nodes; ++v) {
      const int np = static_cast<int>(adj.parents[v].size());
      if (np == 0) continue;
      NodeMlp& m = mlps[v];
      m.w1.resize(kHidden, np);
      m.b1.resize(kHidden);
      m.w2.resize(kHidden);
      const double scale = 1.0 / std::sqrt(static_cast<double>(np));
      for (int h = 0; h < kHidden; ++h) {
        for (int p = 0; p < np; ++p) {
          const double mag = structural.uniform(0.5, 1.5) * scale;
          m.w1(h, p) = structural.uniform() < 0.5 ? -mag : mag;
        }
        m.b1[h] = structural.uniform(-0.5, 0.5);
        const double mag = structural.uniform(0.5, 1.5) / std::sqrt(double(kHidden));
        m.w2[h] = structural.uniform() < 0.5 ? -mag : mag;
      }
    }
  }

  // Map edge -> index in the child's parent list for weight lookup.
  std::vector<std::vector<double>> parent_weight(n_nodes);
  for (int v = 0; v < n_nodes; ++v) parent_weight[v].resize(adj.parents[v].size(), 0.0);
  for (int e = 0; e < n_edges; ++e) {
    const auto& [p, c] = spec.edges[e];
    for (std::size_t k = 0; k < adj.parents[c].size(); ++k) {
      if (adj.parents[c][k] == p) parent_weight[c][k] = weights[e];
    }
  }

  dataset::SubjectDataset ds;
  for (const auto& node : spec.nodes) {
    ds.nodes.push_back(node.name);
    ds.networks.push_back(node.in_network ? spec.in_network_name : spec.external_name);
  }
  char id[16];
  for (int j = 0; j < spec.n_subjects; ++j) {
    std::snprintf(id, sizeof(id), "%03d", j);
    ds.subject_ids.push_back(id);
  }

  for (int j = 0; j < spec.n_subjects; ++j) {
    Rng subject_rng(mix_seed(seed, 0x7375626aULL, static_cast<std::uint64_t>(j)));
    // Per-subject heterogeneity: root scales and coefficient jitter drawn
    // once per subject. This is the nonstationarity the latent prior needs.
    std::vector<double> root_scale(n_nodes, 1.0);
    for (int v = 0; v < n_nodes; ++v) {
      root_scale[v] = subject_rng.uniform(spec.root_scale_lo, spec.root_scale_hi);
    }
    std::vector<std::vector<double>> jitter(n_nodes);
    for (int v = 0; v < n_nodes; ++v) {
      jitter[v].resize(adj.parents[v].size());
      for (auto& w : jitter[v]) {
        w = subject_rng.uniform(spec.coeff_jitter_lo, spec.coeff_jitter_hi);
      }
    }
    Rng noise_rng(mix_seed(seed, 0x6e6f6973ULL, static_cast<std::uint64_t>(j)));
    Eigen::MatrixXd m(spec.n_samples, n_nodes);
    for (int t = 0; t < spec.n_samples; ++t) {
      for (int v : order) {
        const auto& parents = adj.parents[v];
        const double sigma =
            spec.nodes[v].noise_scale >= 0.0 ? spec.nodes[v].noise_scale : spec.noise_scale;
        if (parents.empty()) {
          m(t, v) = root_scale[v] * noise_rng.normal();
          continue;
        }
        double value = 0.0;
        if (spec.mechanism == Mechanism::kLinearGaussian) {
          for (std::size_t k = 0; k < parents.size(); ++k) {
            value += parent_weight[v][k] * jitter[v][k] * m(t, parents[k]);
          }
        } else {
          const NodeMlp& net = mlps[v];
          Eigen::VectorXd in(parents.size());
          for (std::size_t k = 0; k < parents.size(); ++k) {
            in[static_cast<Eigen::Index>(k)] = jitter[v][k] * m(t, parents[k]);
          }
          const Eigen::VectorXd h = (net.w1 * in + net.b1).array().tanh();
          value = 2.0 * net.w2.dot(h);
        }
        m(t, v) = value + sigma * noise_rng.normal();
      }
    }
    ds.data.push_back(std::move(m));
  }
  return ds;
}

std::pair<dataset::SubjectDataset, ScmSpec> generate_two_confounder_scm(int n_subjects, int n_samples,
                                                              Mechanism mechanism,
                                                              std::uint64_t seed) {
  ScmSpec spec;
  spec.mechanism = mechanism;
  spec.n_subjects = n_subjects;
  spec.n_samples = n_samples;
  spec.in_network_name = "study";
  spec.external_name = "candidates";
  for (int i = 1; i <= 5; ++i) {
    spec.nodes.push_back({"z" + std::to_string(i), true, -1.0});
  }
  // s2 and s4 are the confounders; s1 mediates z1->z5 in parallel with the
  // direct edge, s3 is a common child of z2 and z4, s5 is isolated. The
  // distractor loadings and noise scales keep their correlation with any
  // function of Z below the CCI selection band.
  spec.nodes.push_back({"s1", false, 1.5});
  spec.nodes.push_back({"s2", false, -1.0});
  spec.nodes.push_back({"s3", false, 1.4});
  spec.nodes.push_back({"s4", false, -1.0});
  spec.nodes.push_back({"s5", false, -1.0});
  const auto idx = [&spec](const std::string& name) { return spec.node_index(name); };
  const auto edge = [&spec, &idx](const std::string& a, const std::string& b, double w) {
    spec.edges.emplace_back(idx(a), idx(b));
    spec.edge_weights.push_back(w);
  };
  edge("s2", "z1", 1.0);
  edge("s2", "z2", 1.0);
  edge("s4", "z3", 1.0);
  edge("s4", "z4", 1.0);
  edge("z2", "z3", 0.8);
  edge("z1", "z5", 0.7);
  edge("z4", "z5", 0.7);
  edge("z1", "s1", 0.35);
  edge("s1", "z5", 0.5);
  edge("z2", "s3", 0.3);
  edge("z4", "s3", 0.3);
  dataset::SubjectDataset ds = generate_random_scm(spec, seed);
  return {std::move(ds), std::move(spec)};
}

bool d_separated(const ScmSpec& spec, int a, int b, const std::vector<int>& cond) {
  const int n = static_cast<int>(spec.nodes.size());
  if (a < 0 || a >= n || b < 0 || b >= n) throw UnknownNode("d_separated: node out of range");
  for (int c : cond) {
    if (c < 0 || c >= n) throw UnknownNode("d_separated: conditioning node out of range");
  }
  if (a == b) return false;
  const Adjacency adj = adjacency(spec);
  std::vector<bool> in_cond(n, false);
  for (int c : cond) in_cond[c] = true;

  // Ancestors of the conditioning set (including it).
  std::vector<bool> anc(n, false);
  std::deque<int> queue;
  for (int c : cond) {
    if (!anc[c]) {
      anc[c] = true;
      queue.push_back(c);
    }
  }
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop_front();
    for (int p : adj.parents[v]) {
      if (!anc[p]) {
        anc[p] = true;
        queue.push_back(p);
      }
    }
  }

  // Reachability over active trails; state = (node, entered-through-arrow).
  std::vector<std::array<bool, 2>> visited(n, {false, false});
  std::deque<std::pair<int, int>> frontier;  // direction 0: from child (up), 1: from parent (down)
  frontier.emplace_back(a, 0);
  while (!frontier.empty()) {
    const auto [v, dir] = frontier.front();
    frontier.pop_front();
    if (visited[v][dir]) continue;
    visited[v][dir] = true;
    if (v == b && !in_cond[v]) return false;  // reachable => d-connected
    if (dir == 0) {
      // Trail arrived from a child: v is a non-collider on the trail.
      if (!in_cond[v]) {
        for (int p : adj.parents[v]) frontier.emplace_back(p, 0);
        for (int c : adj.children[v]) frontier.emplace_back(c, 1);
      }
    } else {
      // Trail arrived from a parent.
      if (!in_cond[v]) {
        for (int c : adj.children[v]) frontier.emplace_back(c, 1);
      }
      if (anc[v]) {
        // v is (an ancestor of) a conditioned collider.
        for (int p : adj.parents[v]) frontier.emplace_back(p, 0);
      }
    }
  }
  return true;
}

bool d_separated(const ScmSpec& spec, const std::string& a, const std::string& b,
                 const std::vector<std::string>& cond) {
  std::vector<int> c;
  c.reserve(cond.size());
  for (const auto& name : cond) c.push_back(spec.node_index(name));
  return d_separated(spec, spec.node_index(a), spec.node_index(b), c);
}

}  // namespace exo::scm
