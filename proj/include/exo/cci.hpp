#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "exo/nf_ivae.hpp"

namespace exo::cci {

struct CciEntry {
  int best_dim = 0;    // latent dimension achieving the maximum
  double cci = 0.0;    // max over latent dimensions of |Pearson r|
};

struct CciTable {
  std::map<std::string, CciEntry> entries;
};

// CCI per candidate over pooled (subject x time) rows. A zero-variance
// latent dimension contributes r = 0; a zero-variance candidate throws
// DegenerateSignal.
CciTable compute_cci(const nfivae::LatentEstimate& latents,
                     const std::map<std::string, Eigen::VectorXd>& candidates);

// C = { s in screened : CCI[s] > threshold }.
std::vector<std::string> select_confounders(const std::vector<std::string>& screened,
                                            const CciTable& table, double threshold);

// One-to-one variant: candidates are greedily assigned distinct latent
// dimensions in decreasing correlation order (diagnostic only).
CciTable compute_cci_assigned(const nfivae::LatentEstimate& latents,
                              const std::map<std::string, Eigen::VectorXd>& candidates);

struct StabilityReport {
  std::map<std::string, double> frequency;  // share of runs ranked in the top k
  int k = 0;
  int n_runs = 0;
  int failed_runs = 0;
};

struct StabilityRunRecord {
  std::uint64_t seed = 0;
  CciTable table;
  bool ok = false;
};

// Re-trains with seeds base_seed + run index (or the explicit per-run
// seeds when given), recomputes CCI per run and counts top-k membership.
// Throws StabilityInvalid when more than 10% of runs fail.
StabilityReport stability_analysis(const Eigen::MatrixXd& z_raw, const std::vector<int>& subject,
                                   const std::map<std::string, Eigen::VectorXd>& candidates,
                                   const nfivae::NfIvaeConfig& base_cfg, int n_runs, int k,
                                   std::uint64_t base_seed, int workers,
                                   std::vector<StabilityRunRecord>* runs_out = nullptr,
                                   const std::vector<std::uint64_t>* explicit_seeds = nullptr);

std::vector<std::string> top_k_nodes(const CciTable& table, int k);

void write_cci_csv(const CciTable& table, const std::string& path);
void write_stability_csv(const StabilityReport& report, const std::string& path);
void write_stability_plot(const StabilityReport& report, const std::string& path);

}  // namespace exo::cci
