#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "exo/kernel_independence.hpp"
#include "exo/parallel.hpp"
#include "exo/rng.hpp"
#include "exo/screening.hpp"
#include "test_util.hpp"

using namespace exo;
using test_util::gaussian_vector;

namespace {

kernel::SampleVector raw(const Eigen::VectorXd& v) { return kernel::SampleVector{v, false}; }

kernel::SampleVector raw(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return raw(x);
}

double kernel_statistic(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const auto ga = kernel::centered_gram(kernel::standardize(a));
  const auto gb = kernel::centered_gram(kernel::standardize(b));
  return kernel::trace_product_statistic(ga, gb);
}

}  // namespace

TEST_CASE("median_bandwidth on fixed examples") {
  CHECK(kernel::median_bandwidth(raw({0.0, 1.0})) == doctest::Approx(1.0));
  CHECK(kernel::median_bandwidth(raw({0.0, 1.0, 2.0})) == doctest::Approx(1.0));
}

TEST_CASE("median_bandwidth of standard normal draws sits near the theoretical value") {
  Rng rng(7);
  const auto x = raw(gaussian_vector(1000, rng));
  const double bw = kernel::median_bandwidth(x);
  CHECK(bw > 0.8);
  CHECK(bw < 1.5);
}

TEST_CASE("median_bandwidth rejects a constant series") {
  CHECK_THROWS_AS(kernel::median_bandwidth(raw({2.0, 2.0, 2.0, 2.0})), DegenerateSample);
}

TEST_CASE("centered gram of two samples has the forced sign pattern") {
  const auto g = kernel::centered_gram(raw({0.3, -1.2}), 0.9);
  CHECK(g.matrix(0, 0) == doctest::Approx(g.matrix(1, 1)));
  CHECK(g.matrix(0, 1) == doctest::Approx(-g.matrix(0, 0)));
  CHECK(g.matrix(0, 0) >= 0.0);
}

TEST_CASE("centered gram of a constant series vanishes") {
  Eigen::VectorXd c = Eigen::VectorXd::Constant(12, 3.5);
  const auto g = kernel::centered_gram(kernel::SampleVector{c, true}, 1.0);
  CHECK(g.matrix.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("centered gram invariants: symmetry, row sums, PSD") {
  Rng rng(11);
  const auto x = kernel::standardize(gaussian_vector(50, rng));
  const auto g = kernel::centered_gram(x);
  CHECK((g.matrix - g.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  const Eigen::VectorXd row_sums = g.matrix.rowwise().sum();
  CHECK(row_sums.cwiseAbs().maxCoeff() < 1e-8);
  const Eigen::VectorXd eig = kernel::psd_eigenvalues(g.matrix);
  CHECK(eig.minCoeff() >= 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(g.matrix, Eigen::EigenvaluesOnly);
  CHECK(solver.eigenvalues().minCoeff() > -1e-8);
}

TEST_CASE("identical series give a vanishing unconditional p-value") {
  Rng rng(3);
  const Eigen::VectorXd x = gaussian_vector(200, rng);
  kernel::NullConfig cfg;
  cfg.seed = 5;
  const auto res = kernel::uncond_independence_test(raw(x), raw(x), cfg);
  CHECK(res.pvalue < 0.001);
  CHECK(res.statistic >= 0.0);
}

TEST_CASE("spectral and permutation p-values agree on moderate samples") {
  // Permutation with 2000 shuffles is the oracle for the spectral null.
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Rng rng(seed);
    const Eigen::VectorXd x = gaussian_vector(200, rng);
    const Eigen::VectorXd y = test_util::correlated_with(x, seed == 3 ? 0.25 : 0.0, rng);
    kernel::NullConfig cfg;
    cfg.seed = seed;
    cfg.null_draws = 2000;
    const double p_spec = kernel::uncond_independence_test(raw(x), raw(y), cfg).pvalue;
    cfg.method = kernel::NullMethod::kPermutation;
    cfg.permutations = 2000;
    const double p_perm = kernel::uncond_independence_test(raw(x), raw(y), cfg).pvalue;
    CHECK(std::abs(p_spec - p_perm) <= 0.05);
  }
}

TEST_CASE("gamma and spectral nulls broadly agree") {
  Rng rng(17);
  const Eigen::VectorXd x = gaussian_vector(200, rng);
  const Eigen::VectorXd y = gaussian_vector(200, rng);
  kernel::NullConfig cfg;
  cfg.seed = 9;
  const double p_spec = kernel::uncond_independence_test(raw(x), raw(y), cfg).pvalue;
  cfg.method = kernel::NullMethod::kGamma;
  const double p_gamma = kernel::uncond_independence_test(raw(x), raw(y), cfg).pvalue;
  CHECK(std::abs(p_spec - p_gamma) <= 0.1);
}

TEST_CASE("conditional gram approaches the augmented gram as eps grows") {
  Rng rng(23);
  const Eigen::VectorXd x = gaussian_vector(30, rng);
  const Eigen::VectorXd z = gaussian_vector(30, rng);
  const auto xs = kernel::standardize(x);
  const Eigen::MatrixXd zs = kernel::standardize_conditioners(Eigen::MatrixXd(z));
  const auto gxz = kernel::augmented_gram(xs, zs);
  const auto big = kernel::conditional_gram(raw(x), raw(z), 1e6);
  CHECK((big.matrix - gxz.matrix).norm() < 1e-3);

  // Frobenius distance decreases monotonically in eps.
  double prev = std::numeric_limits<double>::infinity();
  for (double eps : {1e-3, 1.0, 1e3, 1e6}) {
    const auto g = kernel::conditional_gram(raw(x), raw(z), eps);
    const double dist = (g.matrix - gxz.matrix).norm();
    CHECK(dist < prev);
    prev = dist;
  }
}

TEST_CASE("conditioning on a constant is vacuous") {
  Rng rng(29);
  const Eigen::VectorXd x = gaussian_vector(40, rng);
  const Eigen::VectorXd z = Eigen::VectorXd::Constant(40, 2.0);
  const auto g = kernel::conditional_gram(raw(x), raw(z), 1e-3);
  // Kz vanishes, the projector is the identity, and the augmented gram
  // reduces to the gram of x alone.
  const auto gx = kernel::centered_gram(kernel::standardize(x));
  CHECK((g.matrix - gx.matrix).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("conditioning a series on itself removes nearly all variance") {
  Rng rng(31);
  const Eigen::VectorXd x = gaussian_vector(100, rng);
  const auto xs = kernel::standardize(x);
  const Eigen::MatrixXd zs = kernel::standardize_conditioners(Eigen::MatrixXd(x));
  const auto gxz = kernel::augmented_gram(xs, zs);
  const auto g = kernel::conditional_gram(raw(x), raw(x), 1e-3);
  CHECK(g.matrix.trace() < 0.05 * gxz.matrix.trace());
}

TEST_CASE("identical series give a vanishing conditional p-value") {
  Rng rng(37);
  const Eigen::VectorXd x = gaussian_vector(200, rng);
  const Eigen::VectorXd z = gaussian_vector(200, rng);
  kernel::NullConfig cfg;
  cfg.seed = 41;
  const auto res = kernel::cond_independence_test(raw(x), raw(x), raw(z), cfg);
  CHECK(res.pvalue < 0.001);
}

TEST_CASE("pure confounding: conditional test accepts, unconditional rejects") {
  Rng rng(43);
  const int n = 400;
  Eigen::VectorXd z = gaussian_vector(n, rng);
  Eigen::VectorXd x(n);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x[i] = z[i] + 0.6 * rng.normal();
    y[i] = z[i] + 0.6 * rng.normal();
  }
  kernel::NullConfig cfg;
  cfg.seed = 47;
  const auto unc = kernel::uncond_independence_test(raw(x), raw(y), cfg);
  const auto cond = kernel::cond_independence_test(raw(x), raw(y), raw(z), cfg);
  CHECK(unc.pvalue < 0.05);
  CHECK(cond.pvalue > 0.05);
}

TEST_CASE("statistics are nonnegative on dependent and independent data") {
  Rng rng(53);
  for (int rep = 0; rep < 5; ++rep) {
    const Eigen::VectorXd x = gaussian_vector(60, rng);
    const Eigen::VectorXd y =
        rep % 2 == 0 ? gaussian_vector(60, rng) : Eigen::VectorXd(x.array().sin().matrix());
    kernel::NullConfig cfg;
    cfg.method = kernel::NullMethod::kGamma;
    const auto unc = kernel::uncond_independence_test(raw(x), raw(y), cfg);
    CHECK(unc.statistic >= 0.0);
    const Eigen::VectorXd z = gaussian_vector(60, rng);
    const auto cond = kernel::cond_independence_test(raw(x), raw(y), raw(z), cfg);
    CHECK(cond.statistic >= 0.0);
  }
}

TEST_CASE("median unconditional statistic grows with dependence strength") {
  Rng rng(59);
  std::vector<double> medians;
  for (double rho : {0.0, 0.3, 0.6, 0.9}) {
    std::vector<double> stats;
    for (int rep = 0; rep < 50; ++rep) {
      const Eigen::VectorXd x = gaussian_vector(150, rng);
      const Eigen::VectorXd y = test_util::correlated_with(x, rho, rng);
      stats.push_back(kernel_statistic(x, y));
    }
    std::sort(stats.begin(), stats.end());
    medians.push_back(stats[stats.size() / 2]);
  }
  for (std::size_t i = 1; i < medians.size(); ++i) {
    CHECK(medians[i] >= medians[i - 1]);
  }
}

TEST_CASE("permutation p-value is exactly 1/(n_perm+1) under identity dependence") {
  Rng rng(61);
  const Eigen::VectorXd x = gaussian_vector(60, rng);
  const double p = kernel::permutation_pvalue(kernel_statistic, x, x, 999, 5);
  CHECK(p == doctest::Approx(1.0 / 1000.0));
}

TEST_CASE("permutation p-value with a constant statistic is 1") {
  Rng rng(67);
  const Eigen::VectorXd x = gaussian_vector(40, rng);
  const Eigen::VectorXd y = gaussian_vector(40, rng);
  const auto constant = [](const Eigen::VectorXd&, const Eigen::VectorXd&) { return 2.5; };
  CHECK(kernel::permutation_pvalue(constant, x, y, 200, 1) == doctest::Approx(1.0));
}

TEST_CASE("permutation p-values are uniform on the grid under independence") {
  // 200 replications of a cheap statistic; KS distance to uniform < 0.1.
  const auto abs_corr = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const Eigen::VectorXd ac = a.array() - a.mean();
    const Eigen::VectorXd bc = b.array() - b.mean();
    return std::abs(ac.dot(bc)) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
  };
  const int reps = 200;
  std::vector<double> pvalues(reps);
  parallel_for(reps, 2, [&](std::size_t rep) {
    Rng rng(mix_seed(100, rep));
    const Eigen::VectorXd x = gaussian_vector(300, rng);
    const Eigen::VectorXd y = gaussian_vector(300, rng);
    pvalues[rep] = kernel::permutation_pvalue(abs_corr, x, y, 999, mix_seed(7, rep));
  });
  std::sort(pvalues.begin(), pvalues.end());
  double ks = 0.0;
  for (int i = 0; i < reps; ++i) {
    const double u = pvalues[static_cast<std::size_t>(i)];
    ks = std::max(ks, std::abs((i + 1.0) / reps - u));
    ks = std::max(ks, std::abs(u - static_cast<double>(i) / reps));
  }
  CHECK(ks < 0.1);
}

TEST_CASE("permutation n_perm precondition") {
  Rng rng(71);
  const Eigen::VectorXd x = gaussian_vector(20, rng);
  const auto stat = [](const Eigen::VectorXd&, const Eigen::VectorXd&) { return 0.0; };
  CHECK_THROWS_AS(kernel::permutation_pvalue(stat, x, x, 50, 1), std::invalid_argument);
}

TEST_CASE("degenerate and undersized inputs are rejected") {
  CHECK_THROWS_AS(kernel::standardize(Eigen::VectorXd::Constant(20, 1.0)), DegenerateSample);
  Rng rng(73);
  const Eigen::VectorXd x = gaussian_vector(5, rng);
  kernel::NullConfig cfg;
  CHECK_THROWS_AS(kernel::uncond_independence_test(raw(x), raw(x), cfg), DegenerateSample);
}

TEST_CASE("null spectra are nonnegative, nonincreasing and tagged with their source") {
  Rng rng(83);
  const auto x = kernel::standardize(gaussian_vector(60, rng));
  const auto y = kernel::standardize(gaussian_vector(60, rng));
  const auto z = kernel::standardize(gaussian_vector(60, rng));
  const auto eig_x = kernel::psd_eigenvalues(kernel::centered_gram(x).matrix);
  const auto eig_y = kernel::psd_eigenvalues(kernel::centered_gram(y).matrix);
  const auto unc = kernel::uncond_null_spectrum(eig_x, eig_y, 1e-8);
  CHECK(unc.source == kernel::SpectrumSource::kProductOfMarginals);
  REQUIRE(unc.eigenvalues.size() > 0);
  CHECK(unc.eigenvalues.minCoeff() >= 0.0);
  for (Eigen::Index i = 1; i < unc.eigenvalues.size(); ++i) {
    CHECK(unc.eigenvalues[i] <= unc.eigenvalues[i - 1]);
  }
  const auto gx = kernel::conditional_gram(x, z.values, 1e-3);
  const auto gy = kernel::conditional_gram(y, z.values, 1e-3);
  const auto cond = kernel::cond_null_spectrum(gx, gy, 1e-8);
  CHECK(cond.source == kernel::SpectrumSource::kWwTranspose);
  REQUIRE(cond.eigenvalues.size() > 0);
  CHECK(cond.eigenvalues.minCoeff() >= 0.0);
  for (Eigen::Index i = 1; i < cond.eigenvalues.size(); ++i) {
    CHECK(cond.eigenvalues[i] <= cond.eigenvalues[i - 1]);
  }
  // The spectrum mean matches the gamma-null mean: trace of the entrywise
  // product over n.
  const double mean_from_spectrum = cond.eigenvalues.sum() / 60.0;
  const double mean_from_trace = gx.matrix.cwiseProduct(gy.matrix).trace() / 60.0;
  CHECK(mean_from_spectrum == doctest::Approx(mean_from_trace).epsilon(1e-8));
}

TEST_CASE("conditional grams are symmetric positive semidefinite") {
  Rng rng(97);
  const Eigen::VectorXd x = gaussian_vector(80, rng);
  const Eigen::VectorXd z = test_util::correlated_with(x, 0.5, rng);
  const auto g = kernel::conditional_gram(raw(x), raw(z), 1e-3);
  CHECK((g.matrix - g.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(g.matrix, Eigen::EigenvaluesOnly);
  CHECK(solver.eigenvalues().minCoeff() > -1e-8);
}

TEST_CASE("truncation warning fires when the retained spectrum is thin") {
  Rng rng(79);
  const Eigen::VectorXd x = gaussian_vector(64, rng);
  const Eigen::VectorXd y = gaussian_vector(64, rng);
  kernel::NullConfig cfg;
  cfg.spectrum_rtol = 0.5;  // deliberately aggressive
  const auto res = kernel::uncond_independence_test(raw(x), raw(y), cfg);
  CHECK(res.truncation_warning);
}
