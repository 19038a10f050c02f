#include "exo/pc_skeleton.hpp"

#include <algorithm>
#include <memory>
#include <mutex>
#include <sstream>

#include "exo/parallel.hpp"
#include "exo/rng.hpp"

namespace exo::pc {

namespace {

struct CondsetCache {
  std::mutex mutex;
  std::map<std::vector<int>, std::shared_ptr<const Eigen::MatrixXd>> projector;
  std::map<std::vector<int>, std::shared_ptr<const Eigen::MatrixXd>> conditioners;
  std::map<std::pair<int, std::vector<int>>, std::shared_ptr<const kernel::CenteredGram>>
      cond_gram;
};

std::shared_ptr<const Eigen::MatrixXd> conditioners_for(
    CondsetCache& cache, const std::vector<int>& condset,
    const std::vector<kernel::SampleVector>& series) {
  {
    std::lock_guard<std::mutex> lock(cache.mutex);
    const auto it = cache.conditioners.find(condset);
    if (it != cache.conditioners.end()) return it->second;
  }
  Eigen::MatrixXd z(series[condset[0]].values.size(),
                    static_cast<Eigen::Index>(condset.size()));
  for (std::size_t c = 0; c < condset.size(); ++c) {
    z.col(static_cast<Eigen::Index>(c)) = series[condset[c]].values;
  }
  auto zs = std::make_shared<const Eigen::MatrixXd>(kernel::standardize_conditioners(z));
  std::lock_guard<std::mutex> lock(cache.mutex);
  return cache.conditioners.try_emplace(condset, std::move(zs)).first->second;
}

std::shared_ptr<const Eigen::MatrixXd> projector_for(
    CondsetCache& cache, const std::vector<int>& condset,
    const std::vector<kernel::SampleVector>& series, double eps) {
  {
    std::lock_guard<std::mutex> lock(cache.mutex);
    const auto it = cache.projector.find(condset);
    if (it != cache.projector.end()) return it->second;
  }
  const auto zs = conditioners_for(cache, condset, series);
  const kernel::CenteredGram gz = kernel::centered_gram_points(*zs);
  auto r = std::make_shared<const Eigen::MatrixXd>(kernel::conditional_projector(gz, eps));
  std::lock_guard<std::mutex> lock(cache.mutex);
  return cache.projector.try_emplace(condset, std::move(r)).first->second;
}

std::shared_ptr<const kernel::CenteredGram> cond_gram_for(
    CondsetCache& cache, int node, const std::vector<int>& condset,
    const std::vector<kernel::SampleVector>& series, double eps) {
  const auto key = std::make_pair(node, condset);
  {
    std::lock_guard<std::mutex> lock(cache.mutex);
    const auto it = cache.cond_gram.find(key);
    if (it != cache.cond_gram.end()) return it->second;
  }
  const auto zs = conditioners_for(cache, condset, series);
  const auto r = projector_for(cache, condset, series, eps);
  auto g = std::make_shared<const kernel::CenteredGram>(
      kernel::apply_projector(*r, kernel::augmented_gram(series[node], *zs)));
  std::lock_guard<std::mutex> lock(cache.mutex);
  return cache.cond_gram.try_emplace(key, std::move(g)).first->second;
}

}  // namespace

bool Skeleton::has_edge(const std::string& a, const std::string& b) const {
  const auto ia = std::find(nodes.begin(), nodes.end(), a);
  const auto ib = std::find(nodes.begin(), nodes.end(), b);
  if (ia == nodes.end() || ib == nodes.end()) return false;
  int i = static_cast<int>(ia - nodes.begin());
  int j = static_cast<int>(ib - nodes.begin());
  if (i > j) std::swap(i, j);
  return edges.count({i, j}) > 0;
}

Skeleton pc_skeleton(const std::vector<std::string>& names,
                     const std::vector<kernel::SampleVector>& series_in, const PcConfig& cfg) {
  const int n = static_cast<int>(names.size());
  if (n < 2) throw ConfigError("pc_skeleton: need at least 2 nodes");
  if (static_cast<int>(series_in.size()) != n) {
    throw DimensionMismatch("pc_skeleton: names/series mismatch");
  }
  for (int v = 1; v < n; ++v) {
    if (series_in[v].values.size() != series_in[0].values.size()) {
      throw DimensionMismatch("pc_skeleton: unequal series lengths");
    }
  }

  std::vector<kernel::SampleVector> series(n);
  for (int v = 0; v < n; ++v) {
    series[v] = series_in[v].standardized ? series_in[v]
                                          : kernel::standardize(series_in[v].values);
  }

  Skeleton skel;
  skel.nodes = names;
  std::vector<std::pair<int, int>> all_pairs;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      skel.edges.insert({i, j});
      all_pairs.emplace_back(i, j);
    }
  }

  const bool spectral = cfg.null_cfg.method == kernel::NullMethod::kSpectralMonteCarlo;
  std::vector<kernel::CenteredGram> grams(n);
  std::vector<Eigen::VectorXd> eigs(n);
  parallel_for(static_cast<std::size_t>(n), cfg.workers, [&](std::size_t v) {
    grams[v] = kernel::centered_gram(series[v]);
    if (spectral) eigs[v] = kernel::psd_eigenvalues(grams[v].matrix);
  });

  // Level 0: unconditional pruning.
  std::vector<char> remove0(all_pairs.size(), 0);
  parallel_for(all_pairs.size(), cfg.workers, [&](std::size_t p) {
    const auto [i, j] = all_pairs[p];
    kernel::NullConfig tcfg = cfg.null_cfg;
    tcfg.seed = mix_seed(cfg.null_cfg.seed, 0x70633000ULL, static_cast<std::uint64_t>(i),
                         static_cast<std::uint64_t>(j));
    const auto res = kernel::uncond_test_from_grams(
        grams[i], grams[j], tcfg, spectral ? eigs[i] : Eigen::VectorXd(),
        spectral ? eigs[j] : Eigen::VectorXd());
    remove0[p] = res.pvalue > cfg.alpha ? 1 : 0;
  });
  for (std::size_t p = 0; p < all_pairs.size(); ++p) {
    if (remove0[p]) {
      skel.edges.erase(all_pairs[p]);
      skel.separating_sets[all_pairs[p]] = {};
    }
  }

  // Levels 1 and 2: condition on subsets of the current neighbors of either
  // endpoint; removals applied after the whole level.
  for (int level = 1; level <= 2; ++level) {
    std::vector<std::set<int>> neighbors(n);
    for (const auto& [i, j] : skel.edges) {
      neighbors[i].insert(j);
      neighbors[j].insert(i);
    }
    const std::vector<std::pair<int, int>> survivors(skel.edges.begin(), skel.edges.end());
    std::vector<std::vector<std::vector<int>>> condsets(survivors.size());
    for (std::size_t p = 0; p < survivors.size(); ++p) {
      const auto [i, j] = survivors[p];
      std::vector<int> pool;
      for (int v : neighbors[i]) {
        if (v != j) pool.push_back(v);
      }
      for (int v : neighbors[j]) {
        if (v != i && neighbors[i].count(v) == 0) pool.push_back(v);
      }
      std::sort(pool.begin(), pool.end());
      if (level == 1) {
        for (int v : pool) condsets[p].push_back({v});
      } else {
        for (std::size_t a = 0; a < pool.size(); ++a) {
          for (std::size_t b = a + 1; b < pool.size(); ++b) {
            condsets[p].push_back({pool[a], pool[b]});
          }
        }
      }
    }

    CondsetCache cache;
    std::vector<std::vector<int>> found_sepset(survivors.size());
    std::vector<char> removed(survivors.size(), 0);
    parallel_for(survivors.size(), cfg.workers, [&](std::size_t p) {
      const auto [i, j] = survivors[p];
      for (const auto& condset : condsets[p]) {
        const auto gx = cond_gram_for(cache, i, condset, series, cfg.null_cfg.ridge);
        const auto gy = cond_gram_for(cache, j, condset, series, cfg.null_cfg.ridge);
        kernel::NullConfig tcfg = cfg.null_cfg;
        std::uint64_t s = mix_seed(cfg.null_cfg.seed, 0x70630000ULL + level,
                                   static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
        for (int v : condset) s = mix_seed(s, static_cast<std::uint64_t>(v));
        tcfg.seed = s;
        const auto res = kernel::cond_test_from_grams(*gx, *gy, tcfg);
        if (res.pvalue > cfg.alpha) {
          removed[p] = 1;
          found_sepset[p] = condset;
          break;
        }
      }
    });
    for (std::size_t p = 0; p < survivors.size(); ++p) {
      if (removed[p]) {
        skel.edges.erase(survivors[p]);
        skel.separating_sets[survivors[p]] = found_sepset[p];
      }
    }
  }
  return skel;
}

std::string to_edge_list(const Skeleton& s) {
  std::vector<std::string> lines;
  for (const auto& [i, j] : s.edges) {
    const std::string& a = s.nodes[i];
    const std::string& b = s.nodes[j];
    lines.push_back(a <= b ? a + "\t" + b : b + "\t" + a);
  }
  std::sort(lines.begin(), lines.end());
  std::ostringstream out;
  for (const auto& line : lines) out << line << "\n";
  return out.str();
}

}  // namespace exo::pc
