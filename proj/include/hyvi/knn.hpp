#pragma once

// k-nearest-neighbour estimators of KL divergence and differential entropy.
//
// Clouds are dense matrices with one point per row. Distances are Euclidean and
// clamped below at kDistanceFloor before any logarithm. Ties in neighbour
// selection are broken by the lowest index.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "hyvi/diffmath.hpp"
#include "hyvi/error.hpp"
#include "hyvi/nets.hpp"
#include "hyvi/ood.hpp"

namespace hyvi::knn {

using Index = Eigen::Index;

inline constexpr double kDistanceFloor = 1e-10;

struct Neighbor {
  Index index = -1;
  double distance = 0.0;
};

/// psi(x) via upward recurrence and the asymptotic series for x >= 6.
double digamma(double x);

/// ln(pi^{d/2} / Gamma(d/2 + 1)).
inline double log_unit_ball_volume(Index dim) {
  const double h = 0.5 * static_cast<double>(dim);
  return h * std::log(std::numbers::pi) - std::lgamma(h + 1.0);
}

inline double clamp_distance(double r) { return std::max(r, kDistanceFloor); }

namespace detail {

using ColMat = Eigen::MatrixXd;

// Exact k-th neighbour of every column of qt among the columns of rt (points are
// columns). A Gram-matrix pass ranks candidates; every point that can be within
// the rounding slack of the k-th candidate is re-measured exactly.
inline std::vector<Neighbor> kth_neighbors_t(const ColMat& qt, const ColMat& rt, int k,
                                             bool exclude_same_index) {
  const Index n = qt.cols();
  const Index m = rt.cols();
  const Index available = exclude_same_index ? m - 1 : m;
  if (k < 1 || available < k)
    throw PreconditionError("knn: need at least k=" + std::to_string(k) + " reference points, have " +
                            std::to_string(std::max<Index>(available, 0)));

  const Eigen::VectorXd qn = qt.colwise().squaredNorm().transpose();
  const Eigen::VectorXd rn = rt.colwise().squaredNorm().transpose();
  const double rn_max = m > 0 ? rn.maxCoeff() : 0.0;

  std::vector<Neighbor> out(static_cast<std::size_t>(n));
  constexpr Index kBlock = 256;
  std::vector<double> top(static_cast<std::size_t>(k));
  std::vector<std::pair<double, Index>> exact;
  for (Index start = 0; start < n; start += kBlock) {
    const Index bs = std::min(kBlock, n - start);
    const Eigen::MatrixXd gram = rt.transpose() * qt.middleCols(start, bs);  // m x bs
    for (Index b = 0; b < bs; ++b) {
      const Index i = start + b;
      const auto approx = [&](Index j) { return rn(j) + qn(i) - 2.0 * gram(j, b); };
      // k smallest approximate squared distances, kept sorted.
      std::fill(top.begin(), top.end(), std::numeric_limits<double>::infinity());
      for (Index j = 0; j < m; ++j) {
        if (exclude_same_index && j == i) continue;
        const double v = approx(j);
        if (v < top.back()) {
          auto pos = std::upper_bound(top.begin(), top.end() - 1, v);
          std::move_backward(pos, top.end() - 1, top.end());
          *pos = v;
        }
      }
      const double slack = 1e-11 * (qn(i) + rn_max) + std::numeric_limits<double>::min();
      const double threshold = top.back() + 2.0 * slack;
      exact.clear();
      for (Index j = 0; j < m; ++j) {
        if (exclude_same_index && j == i) continue;
        if (approx(j) <= threshold) exact.emplace_back((qt.col(i) - rt.col(j)).squaredNorm(), j);
      }
      auto ek = exact.begin() + (k - 1);
      std::nth_element(exact.begin(), ek, exact.end());
      out[static_cast<std::size_t>(i)] = {ek->second, std::sqrt(ek->first)};
    }
  }
  return out;
}

}  // namespace detail

/// k-th nearest neighbour of every row of `queries` among the rows of `reference`.
/// With exclude_same_index, row i of the reference is skipped for query i (within-cloud search).
template <typename DQ, typename DR>
std::vector<Neighbor> kth_neighbors(const Eigen::MatrixBase<DQ>& queries,
                                    const Eigen::MatrixBase<DR>& reference, int k,
                                    bool exclude_same_index) {
  if (queries.cols() != reference.cols())
    throw ShapeError("kth_neighbors", std::to_string(queries.cols()), std::to_string(reference.cols()));
  const detail::ColMat qt = queries.template cast<double>().transpose();
  const detail::ColMat rt = reference.template cast<double>().transpose();
  return detail::kth_neighbors_t(qt, rt, k, exclude_same_index);
}

/// Distance from `query` to its k-th nearest point of `cloud`. With exclude_self, one point
/// exactly equal to the query (the lowest-indexed one) is removed first. Not clamped.
template <typename DC, typename DQ>
double knn_distance(const Eigen::MatrixBase<DC>& cloud, const Eigen::MatrixBase<DQ>& query, int k,
                    bool exclude_self) {
  if (query.size() != cloud.cols())
    throw ShapeError("knn_distance", std::to_string(cloud.cols()), std::to_string(query.size()));
  const Eigen::RowVectorXd q = query.template cast<double>().reshaped().transpose();
  std::vector<std::pair<double, Index>> d;
  d.reserve(static_cast<std::size_t>(cloud.rows()));
  bool skipped = !exclude_self;
  for (Index j = 0; j < cloud.rows(); ++j) {
    const double dist = (cloud.row(j).template cast<double>() - q).norm();
    if (!skipped && dist == 0.0) {
      skipped = true;
      continue;
    }
    d.emplace_back(dist, j);
  }
  if (k < 1 || static_cast<Index>(d.size()) < k)
    throw PreconditionError("knn_distance: fewer than k points after exclusion");
  std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
  return d[static_cast<std::size_t>(k - 1)].first;
}

/// Summary of one estimator evaluation. `clamped` counts within-cloud distances that hit
/// the floor; any clamping marks the cloud as degenerate (e.g. finite support).
struct Estimate {
  double value = 0.0;
  Index clamped = 0;
  bool degenerate() const { return clamped > 0; }
};

/// ln(M/(N-1)) + (dim/N) sum_i ln(s_k(q_i) / r_k(q_i)).
template <typename DQ, typename DP>
Estimate kl_knn_estimate(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DP>& p, int k) {
  if (q.cols() != p.cols()) throw ShapeError("kl_knn", std::to_string(q.cols()), std::to_string(p.cols()));
  const Index n = q.rows(), m = p.rows();
  if (n < k + 1) throw PreconditionError("kl_knn: need N >= k+1 samples from Q");
  const auto r = kth_neighbors(q, q, k, true);
  const auto s = kth_neighbors(q, p, k, false);
  double acc = 0.0;
  Estimate est;
  for (Index i = 0; i < n; ++i) {
    const double ri = r[static_cast<std::size_t>(i)].distance;
    if (ri < kDistanceFloor) ++est.clamped;
    acc += std::log(clamp_distance(s[static_cast<std::size_t>(i)].distance)) - std::log(clamp_distance(ri));
  }
  est.value = std::log(static_cast<double>(m) / static_cast<double>(n - 1)) +
              static_cast<double>(q.cols()) / static_cast<double>(n) * acc;
  return est;
}

template <typename DQ, typename DP>
double kl_knn(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DP>& p, int k = 1) {
  return kl_knn_estimate(q, p, k).value;
}

/// ln N - psi(k) + ln V_dim + (dim/N) sum_i ln r_k(q_i).
template <typename D>
Estimate entropy_knn_estimate(const Eigen::MatrixBase<D>& cloud, int k) {
  const Index n = cloud.rows();
  const Index dim = cloud.cols();
  if (n < k + 1) throw PreconditionError("entropy_knn: need N >= k+1 samples");
  const auto r = kth_neighbors(cloud, cloud, k, true);
  double acc = 0.0;
  Estimate est;
  for (const auto& nb : r) {
    if (nb.distance < kDistanceFloor) ++est.clamped;
    acc += std::log(clamp_distance(nb.distance));
  }
  est.value = std::log(static_cast<double>(n)) - digamma(k) + log_unit_ball_volume(dim) +
              static_cast<double>(dim) / static_cast<double>(n) * acc;
  return est;
}

template <typename D>
double entropy_knn(const Eigen::MatrixBase<D>& cloud, int k = 1) {
  return entropy_knn_estimate(cloud, k).value;
}

/// Differentiable kl_knn. Neighbour indices are held fixed within the step; clamped
/// distances contribute no gradient. Either operand may require gradients.
ad::Tensor kl_knn(const ad::Tensor& q, const ad::Tensor& p, int k = 1);

/// Per-draw evaluation design: n_draws independent input sets X ~ nu^T.
struct EvalDesign {
  Index T = 200;
  Index n_draws = 100;
  InputDistribution nu;
};

/// Maps an input set (T x D) to the evaluation cloud (N x T): one row per predictor.
using CloudMap = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

/// Cloud map of MLP predictors given as parameter draws.
CloudMap predictor_cloud(const PredictorArch& arch, ParamBatch thetas);

/// Average over draws of kl_knn on the evaluation clouds f^X, g^X.
Estimate functional_kl(const CloudMap& f, const CloudMap& g, const EvalDesign& design, int k,
                       std::uint64_t seed);

/// Average over draws of entropy_knn on f^X, minus (1/2) ln T.
Estimate functional_entropy(const CloudMap& f, const EvalDesign& design, int k, std::uint64_t seed);

}  // namespace hyvi::knn
