#pragma once

// Central finite differences over Predictor::output, independent of the
// analytic backward passes.

#include <doctest.h>

#include <algorithm>

#include "dsdm/predictors.hpp"

namespace dsdm::testing {

inline Eigen::VectorXd fd_gradient(const Predictor& p, const Eigen::VectorXd& theta,
                                   const Sample& z, double step = 1e-4) {
  Eigen::VectorXd g(theta.size());
  Eigen::VectorXd probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + step;
    const double up = p.output(probe, z);
    probe[i] = theta[i] - step;
    const double down = p.output(probe, z);
    probe[i] = theta[i];
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

/// ||analytic - fd|| / max(||fd||, 1e-12).
inline double gradient_relative_error(const Predictor& p, const Eigen::VectorXd& theta,
                                      const Sample& z, double step = 1e-4) {
  const Eigen::VectorXd fd = fd_gradient(p, theta, z, step);
  return (p.grad_output(theta, z) - fd).norm() / std::max(fd.norm(), 1e-12);
}

inline void check_gradient(const Predictor& p, const Eigen::VectorXd& theta, const Sample& z,
                           double tol) {
  CHECK(gradient_relative_error(p, theta, z) < tol);
}

}  // namespace dsdm::testing
