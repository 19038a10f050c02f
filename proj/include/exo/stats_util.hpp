#pragma once

#include <Eigen/Dense>
#include <vector>

namespace exo::stats {

double mean(const std::vector<double>& v);

// Median of a copy of v.
double median(std::vector<double> v);

// Pearson correlation; returns 0 when either side has zero variance and
// `zero_on_degenerate` is set, throws DegenerateSignal otherwise.
double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
               bool zero_on_degenerate = false);

// Regularized lower incomplete gamma P(a, x), series + continued fraction.
double regularized_gamma_p(double a, double x);

// Survival function of a Gamma(shape, scale) variate.
double gamma_sf(double x, double shape, double scale);

// Survival function of the Kolmogorov distribution: P(K > lambda).
double kolmogorov_sf(double lambda);

}  // namespace exo::stats
