#pragma once

// Independent references for the analysis code: a dense eigensolver for PCA
// and brute-force fixed points for mean shift.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "predinet/analysis.hpp"
#include "predinet/symbolic.hpp"

namespace oracles {

using namespace predinet;

// Correlated Gaussian cloud with a known, well separated spectrum.
inline std::vector<std::vector<double>> cloud(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = derive_rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd mix = Eigen::MatrixXd::NullaryExpr(d, d, [&] { return normal(rng); });
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(mix);
  Eigen::MatrixXd Q = qr.householderQ();
  std::vector<std::vector<double>> X(n, std::vector<double>(d));
  for (auto& x : X) {
    Eigen::VectorXd z(d);
    for (std::size_t i = 0; i < d; ++i) z[static_cast<Eigen::Index>(i)] = normal(rng) * (3.0 / (1.0 + static_cast<double>(i)));
    Eigen::VectorXd y = Q * z;
    for (std::size_t i = 0; i < d; ++i) x[i] = y[static_cast<Eigen::Index>(i)] + 0.5 * static_cast<double>(i);
  }
  return X;
}

inline Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& X) {
  Eigen::MatrixXd M(X.size(), X.front().size());
  for (std::size_t i = 0; i < X.size(); ++i)
    for (std::size_t j = 0; j < X[i].size(); ++j) M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = X[i][j];
  return M;
}

/// Largest deviation of pca() from the dense solution, over eigenvalues and
/// sign-aligned eigenvectors.
inline double pca_error(std::size_t d, std::uint64_t seed) {
  const auto X = cloud(200, d, seed * 100 + d);
  const auto p = analysis::pca(X, {}, d, seed);
  const Eigen::MatrixXd M = to_matrix(X);
  const Eigen::MatrixXd centred = M.rowwise() - M.colwise().mean();
  const Eigen::MatrixXd C = centred.transpose() * centred / static_cast<double>(X.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  if (p.components.size() != d) return INFINITY;
  double worst = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const auto k = static_cast<Eigen::Index>(d - 1 - c);
    worst = std::max(worst, std::abs(p.variances[c] - es.eigenvalues()[k]));
    Eigen::VectorXd v(d);
    for (std::size_t i = 0; i < d; ++i) v[static_cast<Eigen::Index>(i)] = p.components[c][i];
    const double sign = v.dot(es.eigenvectors().col(k)) < 0 ? -1.0 : 1.0;
    worst = std::max(worst, (sign * v - es.eigenvectors().col(k)).cwiseAbs().maxCoeff());
  }
  return worst;
}

// Every fixed point of flat-kernel mean shift is the mean of some subset S
// whose bandwidth ball is exactly S. Enumerates all subsets.
inline std::vector<symbolic::Point> exhaustive_fixed_points(const std::vector<symbolic::Point>& xs, double bw) {
  std::vector<symbolic::Point> out;
  const std::size_t n = xs.size(), d = xs[0].size();
  for (std::uint32_t bits = 1; bits < (1u << n); ++bits) {
    symbolic::Point m(d, 0.0);
    double count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (bits >> i & 1) {
        for (std::size_t k = 0; k < d; ++k) m[k] += xs[i][k];
        ++count;
      }
    for (auto& v : m) v /= count;
    bool consistent = true;
    for (std::size_t i = 0; i < n && consistent; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += (xs[i][k] - m[k]) * (xs[i][k] - m[k]);
      consistent = (std::sqrt(s) <= bw) == static_cast<bool>(bits >> i & 1);
    }
    if (consistent) out.push_back(m);
  }
  return out;
}

inline bool near_any(const symbolic::Point& p, const std::vector<symbolic::Point>& set, double tol) {
  for (const auto& q : set)
    if (symbolic::distance(p, q) < tol) return true;
  return false;
}

/// Random tiny instance: every mode mean_shift reports is a true fixed point.
inline bool mean_shift_modes_are_fixed_points(std::uint64_t seed) {
  Rng rng = derive_rng(seed, 0x5e);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 3 + seed % 7, d = 1 + seed % 3;
  std::vector<symbolic::Point> xs(n, symbolic::Point(d));
  for (auto& x : xs)
    for (auto& v : x) v = u(rng);
  const double bw = 0.2 + 0.1 * static_cast<double>(seed % 4);
  const auto fixed = exhaustive_fixed_points(xs, bw);
  const auto c = symbolic::mean_shift(xs, bw);
  if (c.clusters.empty()) return false;
  for (const auto& cl : c.clusters)
    if (!near_any(cl.mode, fixed, 1e-9)) return false;
  return true;
}

}  // namespace oracles
