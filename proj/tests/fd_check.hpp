#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>

#include "exo/nf_ivae.hpp"

namespace test_util {

// Central finite differences of f at x, one coordinate per entry of `idx`.
inline Eigen::VectorXd central_differences(
    const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
    Eigen::Index begin, Eigen::Index end, double h = 1e-5) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd point = x;
  for (Eigen::Index i = begin; i < end; ++i) {
    const double step = h * std::max(1.0, std::abs(x[i]));
    point[i] = x[i] + step;
    const double up = f(point);
    point[i] = x[i] - step;
    const double down = f(point);
    point[i] = x[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

// Worst relative error over [begin, end), with an absolute floor so that
// near-zero gradients compare on absolute terms.
inline double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd,
                                 Eigen::Index begin, Eigen::Index end, double floor = 1e-5) {
  double worst = 0.0;
  for (Eigen::Index i = begin; i < end; ++i) {
    const double denom = std::max({floor, std::abs(analytic[i]), std::abs(fd[i])});
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

inline std::size_t mlp_param_count(const exo::nfivae::Mlp& mlp) {
  std::size_t n = 0;
  for (const auto& w : mlp.weights) n += static_cast<std::size_t>(w.size());
  for (const auto& b : mlp.biases) n += static_cast<std::size_t>(b.size());
  return n;
}

struct GroupOffsets {
  Eigen::Index encoder_begin = 0, encoder_end = 0;
  Eigen::Index decoder_end = 0;
  Eigen::Index tnn_end = 0;
  Eigen::Index lambda_end = 0;
};

inline GroupOffsets group_offsets(const exo::nfivae::NfIvaeModel& m) {
  GroupOffsets o;
  o.encoder_begin = 0;
  o.encoder_end = static_cast<Eigen::Index>(mlp_param_count(m.encoder));
  o.decoder_end = o.encoder_end + static_cast<Eigen::Index>(mlp_param_count(m.decoder));
  o.tnn_end = o.decoder_end + static_cast<Eigen::Index>(mlp_param_count(m.tnn));
  o.lambda_end = o.tnn_end + static_cast<Eigen::Index>(m.lambda_table.size());
  return o;
}

}  // namespace test_util
