#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <functional>
#include <set>
#include <vector>

#include "dsep_oracle.hpp"
#include "exo/errors.hpp"
#include "exo/rng.hpp"
#include "exo/scm.hpp"

using namespace exo;
using test_util::brute_force_d_separated;

namespace {

scm::ScmSpec random_dag(int n_nodes, double edge_prob, Rng& rng) {
  scm::ScmSpec spec;
  for (int i = 0; i < n_nodes; ++i) {
    spec.nodes.push_back({"n" + std::to_string(i), true, -1.0});
  }
  for (int i = 0; i < n_nodes; ++i) {
    for (int j = i + 1; j < n_nodes; ++j) {
      if (rng.uniform() < edge_prob) spec.edges.emplace_back(i, j);
    }
  }
  return spec;
}

}  // namespace

TEST_CASE("collider blocks unconditionally and opens when conditioned") {
  scm::ScmSpec spec;
  spec.nodes = {{"a", true, -1.0}, {"m", true, -1.0}, {"b", true, -1.0}};
  spec.edges = {{0, 1}, {2, 1}};  // a -> m <- b
  CHECK(scm::d_separated(spec, "a", "b", {}));
  CHECK_FALSE(scm::d_separated(spec, "a", "b", {"m"}));
}

TEST_CASE("chain separates through the middle node") {
  scm::ScmSpec spec;
  spec.nodes = {{"a", true, -1.0}, {"m", true, -1.0}, {"b", true, -1.0}};
  spec.edges = {{0, 1}, {1, 2}};
  CHECK_FALSE(scm::d_separated(spec, "a", "b", {}));
  CHECK(scm::d_separated(spec, "a", "b", {"m"}));
}

TEST_CASE("unknown node names are rejected") {
  scm::ScmSpec spec;
  spec.nodes = {{"a", true, -1.0}};
  CHECK_THROWS_AS(scm::d_separated(spec, "a", "zzz", {}), UnknownNode);
}

TEST_CASE("cyclic specs are rejected") {
  scm::ScmSpec spec;
  spec.nodes = {{"a", true, -1.0}, {"b", true, -1.0}};
  spec.edges = {{0, 1}, {1, 0}};
  CHECK_THROWS_AS(scm::topological_order(spec), CyclicSpec);
  spec.n_samples = 16;
  CHECK_THROWS_AS(scm::generate_random_scm(spec, 1), CyclicSpec);
}

TEST_CASE("reachability oracle matches brute-force path enumeration on small DAGs") {
  Rng rng(12345);
  int queries = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 3 + static_cast<int>(rng.index(4));  // 3..6 nodes
    const auto spec = random_dag(n, 0.4, rng);
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        std::vector<int> others;
        for (int v = 0; v < n; ++v) {
          if (v != a && v != b) others.push_back(v);
        }
        const int n_subsets = 1 << others.size();
        for (int mask = 0; mask < n_subsets; ++mask) {
          std::vector<int> cond;
          for (std::size_t i = 0; i < others.size(); ++i) {
            if (mask & (1 << i)) cond.push_back(others[i]);
          }
          ++queries;
          CHECK(scm::d_separated(spec, a, b, cond) ==
                brute_force_d_separated(spec, a, b, cond));
        }
      }
    }
  }
  CHECK(queries > 2000);
}

TEST_CASE("reachability matches path enumeration on sparse twenty-node DAGs") {
  Rng rng(54321);
  for (int rep = 0; rep < 5; ++rep) {
    scm::ScmSpec spec;
    for (int i = 0; i < 20; ++i) {
      spec.nodes.push_back({"n" + std::to_string(i), true, -1.0});
    }
    for (int i = 0; i < 20; ++i) {
      for (int j = i + 1; j < 20; ++j) {
        if (rng.uniform() < 0.08) spec.edges.emplace_back(i, j);
      }
    }
    for (int q = 0; q < 40; ++q) {
      const int a = static_cast<int>(rng.index(20));
      int b = static_cast<int>(rng.index(20));
      while (b == a) b = static_cast<int>(rng.index(20));
      std::vector<int> cond;
      const int cond_size = static_cast<int>(rng.index(4));
      while (static_cast<int>(cond.size()) < cond_size) {
        const int c = static_cast<int>(rng.index(20));
        if (c != a && c != b && std::find(cond.begin(), cond.end(), c) == cond.end()) {
          cond.push_back(c);
        }
      }
      CHECK(scm::d_separated(spec, a, b, cond) == brute_force_d_separated(spec, a, b, cond));
    }
  }
}

TEST_CASE("fixture shape: one subject, eight samples, ten nodes") {
  const auto [ds, spec] = scm::generate_two_confounder_scm(1, 8, scm::Mechanism::kLinearGaussian, 1);
  CHECK(ds.data.size() == 1);
  CHECK(ds.data[0].rows() == 8);
  CHECK(ds.data[0].cols() == 10);
  CHECK(ds.nodes.size() == 10);
}

TEST_CASE("fixture d-separation facts") {
  const auto [ds, spec] = scm::generate_two_confounder_scm(1, 8, scm::Mechanism::kLinearGaussian, 1);
  // The pair confounded only by s2 (= c1).
  CHECK_FALSE(scm::d_separated(spec, "z1", "z2", {}));
  CHECK(scm::d_separated(spec, "z1", "z2", {"s2"}));
  // The pair confounded only by s4 (= c2).
  CHECK_FALSE(scm::d_separated(spec, "z3", "z4", {}));
  CHECK(scm::d_separated(spec, "z3", "z4", {"s4"}));
  // No conditioning set inside Z separates the confounded pair.
  const std::vector<std::string> others{"z3", "z4", "z5"};
  for (int mask = 0; mask < 8; ++mask) {
    std::vector<std::string> cond;
    for (int i = 0; i < 3; ++i) {
      if (mask & (1 << i)) cond.push_back(others[static_cast<std::size_t>(i)]);
    }
    CHECK_FALSE(scm::d_separated(spec, "z1", "z2", cond));
  }
}

TEST_CASE("linear mechanism: regression on parents leaves uncorrelated residuals") {
  scm::ScmSpec spec;
  spec.nodes = {{"p1", true, -1.0}, {"p2", true, -1.0}, {"c", true, -1.0}};
  spec.edges = {{0, 2}, {1, 2}};
  spec.edge_weights = {1.1, -0.7};
  spec.n_subjects = 1;
  spec.n_samples = 5000;
  spec.coeff_jitter_lo = spec.coeff_jitter_hi = 1.0;
  spec.root_scale_lo = spec.root_scale_hi = 1.0;
  const auto ds = scm::generate_random_scm(spec, 99);
  const Eigen::MatrixXd& m = ds.data[0];
  Eigen::MatrixXd design(m.rows(), 2);
  design.col(0) = m.col(0);
  design.col(1) = m.col(1);
  const Eigen::VectorXd beta =
      (design.transpose() * design).ldlt().solve(design.transpose() * m.col(2));
  CHECK(beta[0] == doctest::Approx(1.1).epsilon(0.05));
  CHECK(beta[1] == doctest::Approx(-0.7).epsilon(0.05));
  const Eigen::VectorXd resid = m.col(2) - design * beta;
  for (int p = 0; p < 2; ++p) {
    const Eigen::VectorXd pc = design.col(p).array() - design.col(p).mean();
    const Eigen::VectorXd rc = resid.array() - resid.mean();
    const double r = pc.dot(rc) / std::sqrt(pc.squaredNorm() * rc.squaredNorm());
    CHECK(std::abs(r) < 0.05);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = scm::generate_two_confounder_scm(3, 50, scm::Mechanism::kLinearGaussian, 42);
  const auto b = scm::generate_two_confounder_scm(3, 50, scm::Mechanism::kLinearGaussian, 42);
  for (int s = 0; s < 3; ++s) {
    CHECK((a.first.data[s] - b.first.data[s]).cwiseAbs().maxCoeff() == 0.0);
  }
  const auto c = scm::generate_two_confounder_scm(3, 50, scm::Mechanism::kLinearGaussian, 43);
  CHECK((a.first.data[0] - c.first.data[0]).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("empty edge list gives mutually independent nodes") {
  scm::ScmSpec spec;
  for (int i = 0; i < 3; ++i) spec.nodes.push_back({"n" + std::to_string(i), true, -1.0});
  spec.n_subjects = 1;
  spec.n_samples = 2000;
  const auto ds = scm::generate_random_scm(spec, 7);
  const Eigen::MatrixXd& m = ds.data[0];
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      const Eigen::VectorXd a = m.col(i).array() - m.col(i).mean();
      const Eigen::VectorXd b = m.col(j).array() - m.col(j).mean();
      const double r = a.dot(b) / std::sqrt(a.squaredNorm() * b.squaredNorm());
      CHECK(std::abs(r) < 0.06);
    }
  }
  CHECK(scm::d_separated(spec, 0, 1, {2}));
}

TEST_CASE("mlp mechanism produces finite, nonlinear output") {
  const auto [ds, spec] = scm::generate_two_confounder_scm(2, 300, scm::Mechanism::kMlpNonlinear, 5);
  for (const auto& m : ds.data) {
    CHECK(m.allFinite());
  }
  // z1 depends on s2 under the MLP mechanism as well.
  const Eigen::MatrixXd& m = ds.data[0];
  const int z1 = ds.node_index("z1");
  const int s2 = ds.node_index("s2");
  const Eigen::VectorXd a = m.col(z1).array() - m.col(z1).mean();
  const Eigen::VectorXd b = m.col(s2).array() - m.col(s2).mean();
  CHECK(std::abs(a.dot(b)) / std::sqrt(a.squaredNorm() * b.squaredNorm()) > 0.1);
}
