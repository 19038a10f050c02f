#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "exo/dataset.hpp"
#include "exo/kernel_independence.hpp"

namespace exo::screening {

// Two-sample Kolmogorov-Smirnov: D = sup |F_a - F_b| over thresholds,
// p-value from the asymptotic Kolmogorov distribution at effective size
// n_a n_b / (n_a + n_b).
struct KsResult {
  double d = 0.0;
  double pvalue = 1.0;
};
KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b);

struct ScreeningConfig {
  kernel::NullConfig null_cfg;
  double alpha = 0.05;
  bool bh_correction = false;  // Benjamini-Hochberg across the (pair, candidate) grid
  std::uint64_t seed = 0;
  int workers = 1;
  double max_skip_fraction = 0.2;
};

// Per-subject p-value profiles of one in-study pair against one candidate.
struct TestProfile {
  std::pair<std::string, std::string> pair;
  std::string candidate;
  std::vector<double> u_unc;   // unconditional p-values, subject order
  std::vector<double> u_cond;  // conditional p-values, subject order
  std::vector<int> skipped_subjects;
  bool valid = true;
};

struct PairEvidence {
  std::pair<std::string, std::string> pair;
  double ks_pvalue = 1.0;
  double ks_d = 0.0;
  double mean_unc = 0.0;
  double mean_cond = 0.0;
};

struct CandidateSet {
  // candidate node -> supporting pairs that passed the selection rule
  std::map<std::string, std::vector<PairEvidence>> candidates;

  std::vector<std::string> names() const;
};

TestProfile collect_pair_profiles(const dataset::SubjectDataset& ds,
                                  const std::pair<std::string, std::string>& z_pair,
                                  const std::string& candidate, const ScreeningConfig& cfg);

// Algorithm steps 1-2 over the full (pair, candidate) grid: candidate l is
// admitted for pair (z_i, z_k) iff KS pvalue < alpha and
// mean(u_unc) < mean(u_cond).
CandidateSet screen_candidates(const dataset::SubjectDataset& ds,
                               const std::vector<std::string>& z_nodes,
                               const std::vector<std::string>& candidates,
                               const ScreeningConfig& cfg);

void write_candidates_csv(const CandidateSet& set, const std::string& path);

}  // namespace exo::screening
