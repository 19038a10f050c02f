#include "exo/cci.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "exo/parallel.hpp"
#include "exo/stats_util.hpp"

namespace exo::cci {

namespace {

void require_row_match(const nfivae::LatentEstimate& latents,
                       const std::map<std::string, Eigen::VectorXd>& candidates) {
  for (const auto& [name, signal] : candidates) {
    if (signal.size() != latents.latents.rows()) {
      throw DimensionMismatch("compute_cci: row count mismatch for " + name);
    }
  }
}

double abs_corr(const Eigen::VectorXd& latent, const Eigen::VectorXd& signal) {
  // Collapsed latent dimensions count as uncorrelated.
  const double c = stats::pearson(latent, signal, /*zero_on_degenerate=*/true);
  return std::abs(c);
}

}  // namespace

CciTable compute_cci(const nfivae::LatentEstimate& latents,
                     const std::map<std::string, Eigen::VectorXd>& candidates) {
  require_row_match(latents, candidates);
  CciTable table;
  for (const auto& [name, signal] : candidates) {
    const double sd = std::sqrt((signal.array() - signal.mean()).square().sum() /
                                static_cast<double>(signal.size()));
    if (sd <= 1e-12) throw DegenerateSignal("compute_cci: zero-variance candidate " + name);
    CciEntry entry;
    for (int d = 0; d < latents.latents.cols(); ++d) {
      const double r = abs_corr(latents.latents.col(d), signal);
      if (r > entry.cci) {
        entry.cci = r;
        entry.best_dim = d;
      }
    }
    table.entries[name] = entry;
  }
  return table;
}

CciTable compute_cci_assigned(const nfivae::LatentEstimate& latents,
                              const std::map<std::string, Eigen::VectorXd>& candidates) {
  require_row_match(latents, candidates);
  struct Item {
    std::string name;
    int dim;
    double r;
  };
  std::vector<Item> items;
  for (const auto& [name, signal] : candidates) {
    for (int d = 0; d < latents.latents.cols(); ++d) {
      items.push_back({name, d, abs_corr(latents.latents.col(d), signal)});
    }
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.r != b.r) return a.r > b.r;
    if (a.name != b.name) return a.name < b.name;
    return a.dim < b.dim;
  });
  CciTable table;
  std::set<int> used_dims;
  for (const auto& item : items) {
    if (table.entries.count(item.name) || used_dims.count(item.dim)) continue;
    table.entries[item.name] = CciEntry{item.dim, item.r};
    used_dims.insert(item.dim);
  }
  // Candidates left without a free dimension score zero.
  for (const auto& [name, signal] : candidates) {
    if (!table.entries.count(name)) table.entries[name] = CciEntry{-1, 0.0};
  }
  return table;
}

std::vector<std::string> select_confounders(const std::vector<std::string>& screened,
                                            const CciTable& table, double threshold) {
  std::vector<std::string> out;
  for (const auto& name : screened) {
    const auto it = table.entries.find(name);
    if (it == table.entries.end()) {
      throw UnknownNode("select_confounders: no CCI entry for " + name);
    }
    if (it->second.cci > threshold) out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> top_k_nodes(const CciTable& table, int k) {
  std::vector<std::pair<std::string, double>> items;
  for (const auto& [name, entry] : table.entries) items.emplace_back(name, entry.cci);
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (int i = 0; i < k && i < static_cast<int>(items.size()); ++i) {
    out.push_back(items[static_cast<std::size_t>(i)].first);
  }
  return out;
}

StabilityReport stability_analysis(const Eigen::MatrixXd& z_raw, const std::vector<int>& subject,
                                   const std::map<std::string, Eigen::VectorXd>& candidates,
                                   const nfivae::NfIvaeConfig& base_cfg, int n_runs, int k,
                                   std::uint64_t base_seed, int workers,
                                   std::vector<StabilityRunRecord>* runs_out,
                                   const std::vector<std::uint64_t>* explicit_seeds) {
  if (n_runs < 2) throw ConfigError("stability_analysis: n_runs < 2");
  if (explicit_seeds != nullptr && static_cast<int>(explicit_seeds->size()) != n_runs) {
    throw ConfigError("stability_analysis: explicit seed count mismatch");
  }
  std::vector<StabilityRunRecord> runs(static_cast<std::size_t>(n_runs));
  parallel_for(static_cast<std::size_t>(n_runs), workers, [&](std::size_t i) {
    StabilityRunRecord& rec = runs[i];
    rec.seed = explicit_seeds != nullptr ? (*explicit_seeds)[i]
                                         : base_seed + static_cast<std::uint64_t>(i);
    try {
      nfivae::NfIvaeConfig cfg = base_cfg;
      cfg.seed = rec.seed;
      const auto trained = nfivae::train_nfivae(z_raw, subject, cfg);
      const auto latents = nfivae::infer_latents(trained.model, z_raw, subject);
      rec.table = compute_cci(latents, candidates);
      rec.ok = true;
    } catch (const NumericalError&) {
      rec.ok = false;
    }
  });

  StabilityReport report;
  report.k = k;
  report.n_runs = n_runs;
  for (const auto& [name, signal] : candidates) report.frequency[name] = 0.0;
  int completed = 0;
  for (const auto& rec : runs) {
    if (!rec.ok) {
      ++report.failed_runs;
      continue;
    }
    ++completed;
    for (const auto& name : top_k_nodes(rec.table, k)) {
      report.frequency[name] += 1.0;
    }
  }
  if (report.failed_runs > 0.1 * static_cast<double>(n_runs)) {
    throw StabilityInvalid("stability_analysis: " + std::to_string(report.failed_runs) + " of " +
                           std::to_string(n_runs) + " runs failed");
  }
  if (completed > 0) {
    for (auto& [name, freq] : report.frequency) freq /= static_cast<double>(completed);
  }
  if (runs_out != nullptr) *runs_out = std::move(runs);
  return report;
}

void write_cci_csv(const CciTable& table, const std::string& path) {
  std::ofstream out(path);
  out << "node,best_latent,cci\n";
  char buf[48];
  for (const auto& [name, entry] : table.entries) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g", entry.best_dim, entry.cci);
    out << name << "," << buf << "\n";
  }
}

void write_stability_csv(const StabilityReport& report, const std::string& path) {
  std::ofstream out(path);
  out << "node,frequency,k,n_runs,failed_runs\n";
  char buf[80];
  for (const auto& [name, freq] : report.frequency) {
    std::snprintf(buf, sizeof(buf), "%.17g,%d,%d,%d", freq, report.k, report.n_runs,
                  report.failed_runs);
    out << name << "," << buf << "\n";
  }
}

void write_stability_plot(const StabilityReport& report, const std::string& path) {
  std::ofstream out(path);
  out << "node,frequency\n";
  char buf[32];
  for (const auto& [name, freq] : report.frequency) {
    std::snprintf(buf, sizeof(buf), "%.17g", freq);
    out << name << "," << buf << "\n";
  }
}

}  // namespace exo::cci
