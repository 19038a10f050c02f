#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>

#include "exo/errors.hpp"

namespace exo::kernel {

// One node's series for one subject, z-scored before kernelization so the
// median-heuristic bandwidth is scale-free.
struct SampleVector {
  Eigen::VectorXd values;
  bool standardized = false;
};

// Z-scores a raw series. Throws DegenerateSample when the variance is zero.
SampleVector standardize(const Eigen::VectorXd& raw);

// Median of pairwise absolute differences over distinct index pairs,
// used as the RBF length scale. Throws DegenerateSample when all values
// are identical.
double median_bandwidth(const SampleVector& x);

struct CenteredGram {
  Eigen::MatrixXd matrix;
  double bandwidth = 0.0;
  bool centered = false;
};

// K_ij = exp(-(x_i - x_j)^2 / (2 bw^2)) double-centered with H = I - 11^T/n.
CenteredGram centered_gram(const SampleVector& x, double bandwidth);

// Convenience overload with the median-heuristic bandwidth.
CenteredGram centered_gram(const SampleVector& x);

// Multivariate RBF gram on row-points, bandwidth = median pairwise
// euclidean distance when bandwidth <= 0.
CenteredGram centered_gram_points(const Eigen::MatrixXd& points, double bandwidth = -1.0);

enum class NullMethod { kSpectralMonteCarlo, kGamma, kPermutation };
enum class SpectrumSource { kProductOfMarginals, kWwTranspose };

struct NullConfig {
  NullMethod method = NullMethod::kSpectralMonteCarlo;
  int null_draws = 1000;
  int permutations = 500;
  std::uint64_t seed = 0;
  double ridge = 1e-3;          // regularizer of the conditional construction
  double spectrum_rtol = 1e-8;  // eigenvalues below rtol * max are dropped
};

struct NullSpectrum {
  Eigen::VectorXd eigenvalues;  // nonincreasing, clamped at zero
  SpectrumSource source = SpectrumSource::kProductOfMarginals;
};

struct TestResult {
  double statistic = 0.0;
  double pvalue = 1.0;
  NullMethod null_method = NullMethod::kSpectralMonteCarlo;
  int n = 0;
  // Retained null spectrum covers < 99% of the trace.
  bool truncation_warning = false;
};

// Statistic (1/n) Tr(Kx Ky) with the null of the unconditional test:
// (1/n^2) sum_ij lx_i ly_j chi2_ij, or its gamma moment-match, or a
// permutation null.
TestResult uncond_independence_test(const SampleVector& x, const SampleVector& y,
                                    const NullConfig& cfg);

// Conditional gram K_{x|z} = R_z Kxz R_z with R_z = eps (Kz + eps I)^{-1}
// and Kxz the centered gram on the concatenation (x, z).
CenteredGram conditional_gram(const SampleVector& x, const SampleVector& z, double eps);

// Multivariate conditioning set: columns of z_columns are the conditioners.
// pc skeleton level-2 tests go through this overload.
CenteredGram conditional_gram(const SampleVector& x, const Eigen::MatrixXd& z_columns,
                              double eps);

// Statistic (1/n) Tr(K_{x|z} K_{y|z}); null spectrum = eigenvalues of the
// entrywise product K_{x|z} .* K_{y|z} (the gram of the stacked
// feature-product vectors).
TestResult cond_independence_test(const SampleVector& x, const SampleVector& y,
                                  const SampleVector& z, const NullConfig& cfg);
TestResult cond_independence_test(const SampleVector& x, const SampleVector& y,
                                  const Eigen::MatrixXd& z_columns, const NullConfig& cfg);

// p = (1 + #{permuted >= observed}) / (1 + n_perm).
double permutation_pvalue(
    const std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)>& statistic,
    const Eigen::VectorXd& x, const Eigen::VectorXd& y, int n_perm, std::uint64_t seed);

// ---- building blocks, exposed so screening and pcgraph can cache ----

// Eigenvalues of a symmetric PSD matrix, clamped at zero, nonincreasing.
Eigen::VectorXd psd_eigenvalues(const Eigen::MatrixXd& sym);

// Null spectrum of the unconditional statistic: the products of the two
// marginal gram spectra, truncated at rtol times the largest entry.
NullSpectrum uncond_null_spectrum(const Eigen::VectorXd& eig_x, const Eigen::VectorXd& eig_y,
                                  double rtol);

// Null spectrum of the conditional statistic: eigenvalues of the entrywise
// product of the conditional grams (the gram of the stacked feature
// products w_t, so identical to the spectrum of w w^T).
NullSpectrum cond_null_spectrum(const CenteredGram& gx_cond, const CenteredGram& gy_cond,
                                double rtol, bool* truncation_warning = nullptr);

double trace_product_statistic(const CenteredGram& gx, const CenteredGram& gy);

// Standardized conditioning columns; a constant column becomes all zeros so
// conditioning on it is vacuous.
Eigen::MatrixXd standardize_conditioners(const Eigen::MatrixXd& z_columns);

// Centered gram on the concatenation (x, z); inputs already standardized.
CenteredGram augmented_gram(const SampleVector& x_standardized,
                            const Eigen::MatrixXd& z_standardized);

// R_z; throws SingularRegularization when (Kz + eps I) cannot be factored.
Eigen::MatrixXd conditional_projector(const CenteredGram& gz, double eps);

CenteredGram apply_projector(const Eigen::MatrixXd& r_z, const CenteredGram& augmented);

// Test from precomputed conditional grams.
TestResult cond_test_from_grams(const CenteredGram& gx_cond, const CenteredGram& gy_cond,
                                const NullConfig& cfg);

// Test from precomputed marginal grams; marginal eigenvalues are computed
// on demand when the spectral null is requested and `eig_*` is empty.
TestResult uncond_test_from_grams(const CenteredGram& gx, const CenteredGram& gy,
                                  const NullConfig& cfg,
                                  const Eigen::VectorXd& eig_x = Eigen::VectorXd(),
                                  const Eigen::VectorXd& eig_y = Eigen::VectorXd());

}  // namespace exo::kernel
