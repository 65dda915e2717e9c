#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "tasam/nn.hpp"

namespace tsupport {

inline bool close_rel(double a, double b, double rel, double abs_floor = 0.0) {
  const double d = std::abs(a - b);
  return d <= abs_floor || d <= rel * std::max(std::abs(a), std::abs(b));
}

// Central differences of a scalar function over every parameter entry.
inline Eigen::VectorXd fd_gradient(const std::function<double(const tasam::nn::MlpParams&)>& f,
                                   const tasam::nn::MlpParams& p, double h = 1e-5) {
  Eigen::VectorXd x = tasam::nn::flatten(p);
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(tasam::nn::with_flat_params(p, xp)) - f(tasam::nn::with_flat_params(p, xm))) / (2 * h);
  }
  return g;
}

// Worst violation count of close_rel between analytic and numeric vectors.
inline int mismatches(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double rel = 1e-4, double floor = 1e-8) {
  int bad = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!close_rel(a(i), b(i), rel, floor)) ++bad;
  return bad;
}

inline Eigen::VectorXd random_vector(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

inline Eigen::MatrixXd random_matrix(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

// Q diag(lambda) Q^T with lambda spread log-uniformly over [top / cond, top]
// and both ends present.
inline Eigen::MatrixXd random_spd(int n, double cond, double top, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(n, n, rng));
  const Eigen::MatrixXd q = qr.householderQ();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd lam(n);
  for (int i = 0; i < n; ++i) lam(i) = top * std::pow(cond, -u(rng));
  lam(0) = top;
  if (n > 1) lam(n - 1) = top / cond;
  return q * lam.asDiagonal() * q.transpose();
}

// Chi-square upper-tail probability with k degrees of freedom (regularized gamma).
inline double chi2_sf(double x, int k) {
  const double a = k / 2.0, z = x / 2.0;
  if (z <= 0) return 1.0;
  // Series for the lower incomplete gamma, continued fraction for the upper.
  if (z < a + 1) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n < 500; ++n) {
      term *= z / (a + n);
      sum += term;
    }
    return 1.0 - sum * std::exp(-z + a * std::log(z) - std::lgamma(a));
  }
  double b = z + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    h *= d * c;
  }
  return std::exp(-z + a * std::log(z) - std::lgamma(a)) * h;
}

}  // namespace tsupport
