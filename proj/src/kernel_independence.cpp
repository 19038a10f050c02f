#include "exo/kernel_independence.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "exo/rng.hpp"
#include "exo/stats_util.hpp"

namespace exo::kernel {

namespace {

constexpr int kMinSamples = 8;

void require_test_sizes(const SampleVector& x, const SampleVector& y) {
  if (x.values.size() != y.values.size()) {
    throw DimensionMismatch("independence test: unequal sample lengths");
  }
  if (x.values.size() < kMinSamples) {
    throw DegenerateSample("independence test: fewer than 8 samples");
  }
}

Eigen::MatrixXd center(const Eigen::MatrixXd& k) {
  const Eigen::VectorXd row_means = k.rowwise().mean();
  const double total_mean = row_means.mean();
  Eigen::MatrixXd c = k;
  c.colwise() -= row_means;
  c.rowwise() -= row_means.transpose();
  c.array() += total_mean;
  return c;
}

double median_pairwise_distance(const Eigen::MatrixXd& points) {
  const Eigen::Index n = points.rows();
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      dists.push_back((points.row(i) - points.row(j)).norm());
    }
  }
  double bw = stats::median(dists);
  if (bw <= 0.0) {
    // Heavy ties can drive the median to zero; fall back to the mean
    // positive gap.
    double sum = 0.0;
    std::size_t count = 0;
    for (double d : dists) {
      if (d > 0.0) {
        sum += d;
        ++count;
      }
    }
    if (count == 0) throw DegenerateSample("all points identical");
    bw = sum / static_cast<double>(count);
  }
  return bw;
}

// Standardizes a conditioning column; an (uninformative) constant column is
// left as all zeros so that conditioning on it is vacuous.
Eigen::VectorXd standardize_column_or_zero(const Eigen::VectorXd& raw) {
  const double m = raw.mean();
  Eigen::VectorXd c = raw.array() - m;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(raw.size()));
  if (sd <= 1e-12 * std::max(1.0, std::abs(m))) return Eigen::VectorXd::Zero(raw.size());
  return c / sd;
}

double spectral_pvalue(double statistic, const std::function<double(Rng&)>& draw_null,
                       int n_draws, std::uint64_t seed) {
  Rng rng(seed);
  int at_least = 0;
  double first = 0.0;
  bool all_same = true;
  for (int d = 0; d < n_draws; ++d) {
    const double t = draw_null(rng);
    if (d == 0) {
      first = t;
    } else if (t != first) {
      all_same = false;
    }
    if (t >= statistic) ++at_least;
  }
  if (all_same && n_draws > 1) {
    throw NullEstimationFailure("all null draws identical");
  }
  return (1.0 + at_least) / (1.0 + n_draws);
}

double gamma_pvalue(double statistic, double null_mean, double null_var) {
  if (null_mean <= 0.0 || null_var <= 0.0) {
    return statistic <= null_mean + 1e-12 ? 1.0 : 0.0;
  }
  const double shape = null_mean * null_mean / null_var;
  const double scale = null_var / null_mean;
  return stats::gamma_sf(statistic, shape, scale);
}

Eigen::VectorXd truncate_spectrum(const Eigen::VectorXd& eig, double rtol, bool* warn) {
  if (eig.size() == 0) return eig;
  const double cutoff = eig[0] * rtol;
  Eigen::Index keep = 0;
  while (keep < eig.size() && eig[keep] >= cutoff && eig[keep] > 0.0) ++keep;
  if (warn != nullptr) {
    const double total = eig.sum();
    const double kept = eig.head(keep).sum();
    *warn = total > 0.0 && kept < 0.99 * total;
  }
  return eig.head(keep);
}

}  // namespace

SampleVector standardize(const Eigen::VectorXd& raw) {
  if (raw.size() < 2) throw DegenerateSample("standardize: need at least 2 samples");
  if (!raw.allFinite()) throw DegenerateSample("standardize: non-finite values");
  const double m = raw.mean();
  Eigen::VectorXd c = raw.array() - m;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(raw.size()));
  if (sd <= 1e-12 * std::max(1.0, std::abs(m))) {
    throw DegenerateSample("standardize: constant series");
  }
  return SampleVector{c / sd, true};
}

double median_bandwidth(const SampleVector& x) {
  if (x.values.size() < 2) throw DegenerateSample("median_bandwidth: need 2 samples");
  return median_pairwise_distance(x.values);
}

CenteredGram centered_gram(const SampleVector& x, double bandwidth) {
  if (bandwidth <= 0.0) throw std::invalid_argument("centered_gram: bandwidth <= 0");
  const Eigen::Index n = x.values.size();
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = x.values[i] - x.values[j];
      const double v = std::exp(-d * d * inv);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return CenteredGram{center(k), bandwidth, true};
}

CenteredGram centered_gram(const SampleVector& x) {
  return centered_gram(x, median_bandwidth(x));
}

CenteredGram centered_gram_points(const Eigen::MatrixXd& points, double bandwidth) {
  const Eigen::Index n = points.rows();
  double bw = bandwidth;
  bool degenerate = false;
  if (bw <= 0.0) {
    try {
      bw = median_pairwise_distance(points);
    } catch (const DegenerateSample&) {
      degenerate = true;
      bw = 1.0;
    }
  }
  Eigen::MatrixXd k(n, n);
  if (degenerate) {
    k.setOnes();
  } else {
    const double inv = 1.0 / (2.0 * bw * bw);
    for (Eigen::Index i = 0; i < n; ++i) {
      k(i, i) = 1.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double d2 = (points.row(i) - points.row(j)).squaredNorm();
        const double v = std::exp(-d2 * inv);
        k(i, j) = v;
        k(j, i) = v;
      }
    }
  }
  return CenteredGram{center(k), bw, true};
}

Eigen::VectorXd psd_eigenvalues(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.compute(sym, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("eigenvalue computation failed");
  }
  Eigen::VectorXd eig = solver.eigenvalues().reverse();
  for (Eigen::Index i = 0; i < eig.size(); ++i) {
    if (eig[i] < 0.0) eig[i] = 0.0;
  }
  return eig;
}

double trace_product_statistic(const CenteredGram& gx, const CenteredGram& gy) {
  const double n = static_cast<double>(gx.matrix.rows());
  return gx.matrix.cwiseProduct(gy.matrix).sum() / n;
}

NullSpectrum uncond_null_spectrum(const Eigen::VectorXd& eig_x, const Eigen::VectorXd& eig_y,
                                  double rtol) {
  Eigen::VectorXd lx = truncate_spectrum(eig_x, rtol, nullptr);
  Eigen::VectorXd ly = truncate_spectrum(eig_y, rtol, nullptr);
  Eigen::VectorXd products(lx.size() * ly.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < lx.size(); ++i) {
    for (Eigen::Index j = 0; j < ly.size(); ++j) {
      products[k++] = lx[i] * ly[j];
    }
  }
  std::sort(products.data(), products.data() + products.size(), std::greater<double>());
  return NullSpectrum{std::move(products), SpectrumSource::kProductOfMarginals};
}

NullSpectrum cond_null_spectrum(const CenteredGram& gx_cond, const CenteredGram& gy_cond,
                                double rtol, bool* truncation_warning) {
  const Eigen::MatrixXd w = gx_cond.matrix.cwiseProduct(gy_cond.matrix);
  Eigen::VectorXd eig = truncate_spectrum(psd_eigenvalues(w), rtol, truncation_warning);
  return NullSpectrum{std::move(eig), SpectrumSource::kWwTranspose};
}

TestResult uncond_test_from_grams(const CenteredGram& gx, const CenteredGram& gy,
                                  const NullConfig& cfg, const Eigen::VectorXd& eig_x,
                                  const Eigen::VectorXd& eig_y) {
  const int n = static_cast<int>(gx.matrix.rows());
  const double stat = trace_product_statistic(gx, gy);
  TestResult res;
  res.statistic = std::max(0.0, stat);
  res.null_method = cfg.method;
  res.n = n;
  const double n2 = static_cast<double>(n) * n;
  if (cfg.method == NullMethod::kGamma) {
    const double mean = gx.matrix.trace() * gy.matrix.trace() / n2;
    const double var = 2.0 * gx.matrix.squaredNorm() * gy.matrix.squaredNorm() / (n2 * n2);
    res.pvalue = gamma_pvalue(stat, mean, var);
    return res;
  }
  if (cfg.method != NullMethod::kSpectralMonteCarlo) {
    throw std::invalid_argument("uncond_test_from_grams: unsupported null method");
  }
  Eigen::VectorXd lx = eig_x.size() > 0 ? eig_x : psd_eigenvalues(gx.matrix);
  Eigen::VectorXd ly = eig_y.size() > 0 ? eig_y : psd_eigenvalues(gy.matrix);
  bool warn_x = false;
  bool warn_y = false;
  lx = truncate_spectrum(lx, cfg.spectrum_rtol, &warn_x);
  ly = truncate_spectrum(ly, cfg.spectrum_rtol, &warn_y);
  res.truncation_warning = warn_x || warn_y;
  if (lx.size() == 0 || ly.size() == 0) {
    res.pvalue = 1.0;
    return res;
  }
  const auto draw = [&lx, &ly, n2](Rng& rng) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < lx.size(); ++i) {
      double inner = 0.0;
      for (Eigen::Index j = 0; j < ly.size(); ++j) {
        const double z = rng.normal();
        inner += ly[j] * z * z;
      }
      acc += lx[i] * inner;
    }
    return acc / n2;
  };
  res.pvalue = spectral_pvalue(stat, draw, cfg.null_draws, mix_seed(cfg.seed, 0x756e63ULL));
  return res;
}

TestResult uncond_independence_test(const SampleVector& x, const SampleVector& y,
                                    const NullConfig& cfg) {
  require_test_sizes(x, y);
  const SampleVector xs = x.standardized ? x : standardize(x.values);
  const SampleVector ys = y.standardized ? y : standardize(y.values);
  const CenteredGram gx = centered_gram(xs);
  const CenteredGram gy = centered_gram(ys);
  if (cfg.method == NullMethod::kPermutation) {
    const int n = static_cast<int>(xs.values.size());
    const double observed = trace_product_statistic(gx, gy);
    Rng rng(mix_seed(cfg.seed, 0x7065726dULL));
    std::vector<Eigen::Index> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    int at_least = 0;
    for (int p = 0; p < cfg.permutations; ++p) {
      rng.shuffle(perm);
      // Permuting the series permutes rows and columns of its centered gram.
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          acc += gx.matrix(i, j) * gy.matrix(perm[i], perm[j]);
        }
      }
      if (acc / n >= observed) ++at_least;
    }
    TestResult res;
    res.statistic = std::max(0.0, observed);
    res.pvalue = (1.0 + at_least) / (1.0 + cfg.permutations);
    res.null_method = cfg.method;
    res.n = n;
    return res;
  }
  return uncond_test_from_grams(gx, gy, cfg);
}

Eigen::MatrixXd conditional_projector(const CenteredGram& gz, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("conditional_projector: eps <= 0");
  const Eigen::Index n = gz.matrix.rows();
  Eigen::MatrixXd reg = gz.matrix;
  reg.diagonal().array() += eps;
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() != Eigen::Success) {
    throw SingularRegularization("conditional_projector: (Kz + eps I) not SPD");
  }
  Eigen::MatrixXd r = llt.solve(Eigen::MatrixXd::Identity(n, n)) * eps;
  r = 0.5 * (r + r.transpose()).eval();
  return r;
}

CenteredGram apply_projector(const Eigen::MatrixXd& r_z, const CenteredGram& augmented) {
  Eigen::MatrixXd m = r_z * augmented.matrix * r_z;
  m = 0.5 * (m + m.transpose()).eval();
  return CenteredGram{std::move(m), augmented.bandwidth, true};
}

Eigen::MatrixXd standardize_conditioners(const Eigen::MatrixXd& z_columns) {
  Eigen::MatrixXd zs(z_columns.rows(), z_columns.cols());
  for (Eigen::Index c = 0; c < z_columns.cols(); ++c) {
    zs.col(c) = standardize_column_or_zero(z_columns.col(c));
  }
  return zs;
}

CenteredGram augmented_gram(const SampleVector& x_standardized,
                            const Eigen::MatrixXd& z_standardized) {
  const Eigen::Index n = x_standardized.values.size();
  Eigen::MatrixXd augmented(n, z_standardized.cols() + 1);
  augmented.col(0) = x_standardized.values;
  augmented.rightCols(z_standardized.cols()) = z_standardized;
  return centered_gram_points(augmented);
}

CenteredGram conditional_gram(const SampleVector& x, const Eigen::MatrixXd& z_columns,
                              double eps) {
  if (z_columns.rows() != x.values.size()) {
    throw DimensionMismatch("conditional_gram: length mismatch");
  }
  const SampleVector xs = x.standardized ? x : standardize(x.values);
  const Eigen::MatrixXd zs = standardize_conditioners(z_columns);
  const CenteredGram gxz = augmented_gram(xs, zs);
  const CenteredGram gz = centered_gram_points(zs);
  const Eigen::MatrixXd r = conditional_projector(gz, eps);
  return apply_projector(r, gxz);
}

CenteredGram conditional_gram(const SampleVector& x, const SampleVector& z, double eps) {
  return conditional_gram(x, Eigen::MatrixXd(z.values), eps);
}

TestResult cond_test_from_grams(const CenteredGram& gx_cond, const CenteredGram& gy_cond,
                                const NullConfig& cfg) {
  const int n = static_cast<int>(gx_cond.matrix.rows());
  const double stat = trace_product_statistic(gx_cond, gy_cond);
  TestResult res;
  res.statistic = std::max(0.0, stat);
  res.null_method = cfg.method;
  res.n = n;
  // Gram matrix of the stacked feature products w_t: entry (t, s) equals
  // K_{x|z}(t,s) * K_{y|z}(t,s), so its spectrum is the null spectrum of
  // w w^T without forming the n^2-dimensional stack.
  const Eigen::MatrixXd w = gx_cond.matrix.cwiseProduct(gy_cond.matrix);
  if (cfg.method == NullMethod::kGamma) {
    const double mean = w.trace() / n;
    const double var = 2.0 * w.squaredNorm() / (static_cast<double>(n) * n);
    res.pvalue = gamma_pvalue(stat, mean, var);
    return res;
  }
  if (cfg.method != NullMethod::kSpectralMonteCarlo) {
    throw std::invalid_argument("cond test: permutation null not available");
  }
  bool warn = false;
  const NullSpectrum spectrum = cond_null_spectrum(gx_cond, gy_cond, cfg.spectrum_rtol, &warn);
  const Eigen::VectorXd& eig = spectrum.eigenvalues;
  res.truncation_warning = warn;
  if (eig.size() == 0) {
    res.pvalue = 1.0;
    return res;
  }
  const double dn = static_cast<double>(n);
  const auto draw = [&eig, dn](Rng& rng) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < eig.size(); ++k) {
      const double z = rng.normal();
      acc += eig[k] * z * z;
    }
    return acc / dn;
  };
  res.pvalue = spectral_pvalue(stat, draw, cfg.null_draws, mix_seed(cfg.seed, 0x636f6eULL));
  return res;
}

TestResult cond_independence_test(const SampleVector& x, const SampleVector& y,
                                  const Eigen::MatrixXd& z_columns, const NullConfig& cfg) {
  require_test_sizes(x, y);
  if (z_columns.rows() != x.values.size()) {
    throw DimensionMismatch("cond_independence_test: conditioner length mismatch");
  }
  const CenteredGram gx = conditional_gram(x, z_columns, cfg.ridge);
  const CenteredGram gy = conditional_gram(y, z_columns, cfg.ridge);
  return cond_test_from_grams(gx, gy, cfg);
}

TestResult cond_independence_test(const SampleVector& x, const SampleVector& y,
                                  const SampleVector& z, const NullConfig& cfg) {
  return cond_independence_test(x, y, Eigen::MatrixXd(z.values), cfg);
}

double permutation_pvalue(
    const std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)>& statistic,
    const Eigen::VectorXd& x, const Eigen::VectorXd& y, int n_perm, std::uint64_t seed) {
  if (n_perm < 100) throw std::invalid_argument("permutation_pvalue: n_perm < 100");
  const double observed = statistic(x, y);
  Rng rng(mix_seed(seed, 0x706572ULL));
  Eigen::VectorXd shuffled = y;
  std::vector<Eigen::Index> perm(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) perm[i] = i;
  int at_least = 0;
  for (int p = 0; p < n_perm; ++p) {
    rng.shuffle(perm);
    for (Eigen::Index i = 0; i < y.size(); ++i) shuffled[i] = y[perm[i]];
    if (statistic(x, shuffled) >= observed) ++at_least;
  }
  return (1.0 + at_least) / (1.0 + n_perm);
}

}  // namespace exo::kernel
