#include "exo/screening.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "exo/parallel.hpp"
#include "exo/rng.hpp"
#include "exo/stats_util.hpp"

namespace exo::screening {

namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Seeds are derived from node/subject names so that results do not depend
// on enumeration order; the pair is order-normalized first.
std::uint64_t unc_seed(std::uint64_t base, const std::string& a, const std::string& b,
                       const std::string& subject) {
  return mix_seed(base, 0x756e63ULL, name_hash(a), name_hash(b), name_hash(subject));
}

std::uint64_t cond_seed(std::uint64_t base, const std::string& a, const std::string& b,
                        const std::string& candidate, const std::string& subject) {
  return mix_seed(base, 0x636e64ULL, name_hash(a), name_hash(b), name_hash(candidate),
                  name_hash(subject));
}

std::pair<std::string, std::string> normalized(const std::pair<std::string, std::string>& p) {
  return p.first <= p.second ? p : std::make_pair(p.second, p.first);
}

bool degenerate(const Eigen::VectorXd& v) {
  const double m = v.mean();
  const Eigen::VectorXd c = v.array() - m;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(v.size()));
  return !v.allFinite() || sd <= 1e-12 * std::max(1.0, std::abs(m));
}

// Benjamini-Hochberg adjusted p-values.
std::vector<double> bh_adjust(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&p](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> adj(m);
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double v = p[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1);
    running = std::min(running, v);
    adj[order[r]] = running;
  }
  return adj;
}

}  // namespace

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::vector<double> sa = a;
  std::vector<double> sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  double d = 0.0;
  std::size_t ia = 0;
  std::size_t ib = 0;
  while (ia < sa.size() && ib < sb.size()) {
    const double v = std::min(sa[ia], sb[ib]);
    while (ia < sa.size() && sa[ia] <= v) ++ia;
    while (ib < sb.size() && sb[ib] <= v) ++ib;
    d = std::max(d, std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb));
  }
  const double n_eff = na * nb / (na + nb);
  KsResult res;
  res.d = d;
  res.pvalue = stats::kolmogorov_sf(std::sqrt(n_eff) * d);
  return res;
}

TestProfile collect_pair_profiles(const dataset::SubjectDataset& ds,
                                  const std::pair<std::string, std::string>& z_pair,
                                  const std::string& candidate, const ScreeningConfig& cfg) {
  const auto pair = normalized(z_pair);
  const int ia = ds.node_index(pair.first);
  const int ib = ds.node_index(pair.second);
  const int il = ds.node_index(candidate);
  TestProfile profile;
  profile.pair = pair;
  profile.candidate = candidate;
  const std::size_t n_subjects = ds.data.size();
  for (std::size_t j = 0; j < n_subjects; ++j) {
    const Eigen::VectorXd va = ds.data[j].col(ia);
    const Eigen::VectorXd vb = ds.data[j].col(ib);
    const Eigen::VectorXd vl = ds.data[j].col(il);
    if (degenerate(va) || degenerate(vb) || degenerate(vl)) {
      profile.skipped_subjects.push_back(static_cast<int>(j));
      continue;
    }
    kernel::NullConfig unc_cfg = cfg.null_cfg;
    unc_cfg.seed = unc_seed(cfg.seed, pair.first, pair.second, ds.subject_ids[j]);
    const auto xa = kernel::standardize(va);
    const auto xb = kernel::standardize(vb);
    profile.u_unc.push_back(kernel::uncond_independence_test(xa, xb, unc_cfg).pvalue);
    kernel::NullConfig ccfg = cfg.null_cfg;
    ccfg.seed = cond_seed(cfg.seed, pair.first, pair.second, candidate, ds.subject_ids[j]);
    profile.u_cond.push_back(
        kernel::cond_independence_test(xa, xb, Eigen::MatrixXd(vl), ccfg).pvalue);
  }
  profile.valid = profile.skipped_subjects.size() <=
                  cfg.max_skip_fraction * static_cast<double>(n_subjects);
  if (profile.u_unc.empty()) profile.valid = false;
  return profile;
}

std::vector<std::string> CandidateSet::names() const {
  std::vector<std::string> out;
  out.reserve(candidates.size());
  for (const auto& [name, evidence] : candidates) out.push_back(name);
  return out;
}

CandidateSet screen_candidates(const dataset::SubjectDataset& ds,
                               const std::vector<std::string>& z_nodes,
                               const std::vector<std::string>& candidates,
                               const ScreeningConfig& cfg) {
  for (const auto& z : z_nodes) {
    if (std::find(candidates.begin(), candidates.end(), z) != candidates.end()) {
      throw ConfigError("screen_candidates: Z and L overlap at " + z);
    }
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < z_nodes.size(); ++i) {
    for (std::size_t k = i + 1; k < z_nodes.size(); ++k) {
      pairs.push_back(normalized({z_nodes[i], z_nodes[k]}));
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::string> cands = candidates;
  std::sort(cands.begin(), cands.end());

  const std::size_t n_subjects = ds.data.size();
  const std::size_t n_pairs = pairs.size();
  const std::size_t n_cands = cands.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  // p-value grids indexed [pair][subject] and [pair][cand][subject]; NaN
  // marks a skipped subject.
  std::vector<std::vector<double>> unc(n_pairs, std::vector<double>(n_subjects, nan));
  std::vector<std::vector<std::vector<double>>> cond(
      n_pairs, std::vector<std::vector<double>>(n_cands, std::vector<double>(n_subjects, nan)));

  std::vector<int> z_idx;
  std::vector<int> cand_idx;
  for (const auto& z : z_nodes) z_idx.push_back(ds.node_index(z));
  for (const auto& c : cands) cand_idx.push_back(ds.node_index(c));

  parallel_for(n_subjects, cfg.workers, [&](std::size_t j) {
    // Standardize and kernelize every node once per subject.
    std::map<std::string, kernel::SampleVector> std_series;
    std::map<std::string, bool> bad;
    for (std::size_t zi = 0; zi < z_nodes.size(); ++zi) {
      const Eigen::VectorXd v = ds.data[j].col(z_idx[zi]);
      if (degenerate(v)) {
        bad[z_nodes[zi]] = true;
      } else {
        std_series[z_nodes[zi]] = kernel::standardize(v);
      }
    }
    std::map<std::string, kernel::CenteredGram> grams;
    std::map<std::string, Eigen::VectorXd> eigs;
    const bool spectral = cfg.null_cfg.method == kernel::NullMethod::kSpectralMonteCarlo;
    for (const auto& [name, sv] : std_series) {
      grams[name] = kernel::centered_gram(sv);
      if (spectral) eigs[name] = kernel::psd_eigenvalues(grams[name].matrix);
    }
    for (std::size_t p = 0; p < n_pairs; ++p) {
      const auto& [a, b] = pairs[p];
      if (bad.count(a) || bad.count(b)) continue;
      kernel::NullConfig unc_cfg = cfg.null_cfg;
      unc_cfg.seed = unc_seed(cfg.seed, a, b, ds.subject_ids[j]);
      unc[p][j] = kernel::uncond_test_from_grams(
                      grams.at(a), grams.at(b), unc_cfg,
                      spectral ? eigs.at(a) : Eigen::VectorXd(),
                      spectral ? eigs.at(b) : Eigen::VectorXd())
                      .pvalue;
    }
    for (std::size_t c = 0; c < n_cands; ++c) {
      const Eigen::VectorXd vl = ds.data[j].col(cand_idx[c]);
      if (degenerate(vl)) continue;
      const Eigen::MatrixXd zs = kernel::standardize_conditioners(Eigen::MatrixXd(vl));
      const kernel::CenteredGram gz = kernel::centered_gram_points(zs);
      const Eigen::MatrixXd r = kernel::conditional_projector(gz, cfg.null_cfg.ridge);
      std::map<std::string, kernel::CenteredGram> cond_grams;
      for (const auto& [name, sv] : std_series) {
        cond_grams[name] = kernel::apply_projector(r, kernel::augmented_gram(sv, zs));
      }
      for (std::size_t p = 0; p < n_pairs; ++p) {
        const auto& [a, b] = pairs[p];
        if (bad.count(a) || bad.count(b)) continue;
        kernel::NullConfig ccfg = cfg.null_cfg;
        ccfg.seed = cond_seed(cfg.seed, a, b, cands[c], ds.subject_ids[j]);
        cond[p][c][j] =
            kernel::cond_test_from_grams(cond_grams.at(a), cond_grams.at(b), ccfg).pvalue;
      }
    }
  });

  // Assemble profiles and apply the admission rule.
  struct GridItem {
    std::size_t pair;
    std::size_t cand;
    double ks_p;
    double ks_d;
    double mean_unc;
    double mean_cond;
    bool testable;
  };
  std::vector<GridItem> grid;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    for (std::size_t c = 0; c < n_cands; ++c) {
      std::vector<double> uu;
      std::vector<double> uc;
      std::size_t skipped = 0;
      for (std::size_t j = 0; j < n_subjects; ++j) {
        if (std::isnan(unc[p][j]) || std::isnan(cond[p][c][j])) {
          ++skipped;
          continue;
        }
        uu.push_back(unc[p][j]);
        uc.push_back(cond[p][c][j]);
      }
      if (skipped > cfg.max_skip_fraction * static_cast<double>(n_subjects) || uu.empty()) {
        throw ProfileInvalid("screen_candidates: profile " + pairs[p].first + "-" +
                             pairs[p].second + " | " + cands[c] + " has " +
                             std::to_string(skipped) + " skipped subjects");
      }
      GridItem item;
      item.pair = p;
      item.cand = c;
      const auto ks = ks_two_sample(uu, uc);
      item.ks_p = ks.pvalue;
      item.ks_d = ks.d;
      item.mean_unc = stats::mean(uu);
      item.mean_cond = stats::mean(uc);
      item.testable = true;
      grid.push_back(item);
    }
  }

  std::vector<double> decision_p(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) decision_p[g] = grid[g].ks_p;
  if (cfg.bh_correction && !grid.empty()) decision_p = bh_adjust(decision_p);

  CandidateSet out;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const GridItem& item = grid[g];
    if (decision_p[g] < cfg.alpha && item.mean_unc < item.mean_cond) {
      PairEvidence ev;
      ev.pair = pairs[item.pair];
      ev.ks_pvalue = item.ks_p;
      ev.ks_d = item.ks_d;
      ev.mean_unc = item.mean_unc;
      ev.mean_cond = item.mean_cond;
      out.candidates[cands[item.cand]].push_back(ev);
    }
  }
  return out;
}

void write_candidates_csv(const CandidateSet& set, const std::string& path) {
  std::ofstream out(path);
  out << "candidate,pair_a,pair_b,ks_pvalue,mean_unc,mean_cond\n";
  char buf[96];
  for (const auto& [name, evidence] : set.candidates) {
    for (const auto& ev : evidence) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", ev.ks_pvalue, ev.mean_unc,
                    ev.mean_cond);
      out << name << "," << ev.pair.first << "," << ev.pair.second << "," << buf << "\n";
    }
  }
}

}  // namespace exo::screening
