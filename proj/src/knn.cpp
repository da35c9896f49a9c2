#include "hyvi/knn.hpp"

namespace hyvi::knn {

double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma", x);
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // ln x - 1/(2x) - sum B_2n / (2n x^{2n})
  const double series =
      inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))));
  return acc + std::log(x) - 0.5 * inv - series;
}

ad::Tensor kl_knn(const ad::Tensor& q, const ad::Tensor& p, int k) {
  if (q.cols() != p.cols()) throw ShapeError("kl_knn", q.shape_string(), p.shape_string());
  const Index n = q.rows(), m = p.rows(), dim = q.cols();
  if (n < k + 1) throw PreconditionError("kl_knn: need N >= k+1 samples from Q");

  const Eigen::MatrixXd qt = q.value().transpose();
  const Eigen::MatrixXd pt = p.value().transpose();
  const auto r = detail::kth_neighbors_t(qt, qt, k, true);
  const auto s = detail::kth_neighbors_t(qt, pt, k, false);

  double acc = 0.0;
  for (Index i = 0; i < n; ++i)
    acc += std::log(clamp_distance(s[static_cast<std::size_t>(i)].distance)) -
           std::log(clamp_distance(r[static_cast<std::size_t>(i)].distance));
  const double coef = static_cast<double>(dim) / static_cast<double>(n);
  const double value = std::log(static_cast<double>(m) / static_cast<double>(n - 1)) + coef * acc;

  return ad::make_op(
      "kl_knn", Eigen::MatrixXd::Constant(1, 1, value), {q, p},
      [qt, pt, r, s, coef, n](const Eigen::MatrixXd& g, std::span<Eigen::MatrixXd* const> pg) {
        const double w = g(0, 0) * coef;
        for (Index i = 0; i < n; ++i) {
          const auto& rn = r[static_cast<std::size_t>(i)];
          const auto& sn = s[static_cast<std::size_t>(i)];
          if (sn.distance >= kDistanceFloor) {
            // d ln s / d q_i = (q_i - p_j) / s^2
            const Eigen::VectorXd diff = (qt.col(i) - pt.col(sn.index)) / (sn.distance * sn.distance);
            if (pg[0]) pg[0]->row(i) += w * diff.transpose();
            if (pg[1]) pg[1]->row(sn.index) -= w * diff.transpose();
          }
          if (rn.distance >= kDistanceFloor && pg[0]) {
            const Eigen::VectorXd diff = (qt.col(i) - qt.col(rn.index)) / (rn.distance * rn.distance);
            pg[0]->row(i) -= w * diff.transpose();
            pg[0]->row(rn.index) += w * diff.transpose();
          }
        }
      });
}

CloudMap predictor_cloud(const PredictorArch& arch, ParamBatch thetas) {
  return [arch, thetas = std::move(thetas)](const Eigen::MatrixXd& X) {
    return predict_batch(arch, thetas, X);
  };
}

Estimate functional_kl(const CloudMap& f, const CloudMap& g, const EvalDesign& design, int k,
                       std::uint64_t seed) {
  if (design.T < 1 || design.n_draws < 1) throw PreconditionError("functional_kl: T and n_draws must be >= 1");
  Rng rng(seed);
  Estimate total;
  double acc = 0.0;
  for (Index draw = 0; draw < design.n_draws; ++draw) {
    const Eigen::MatrixXd X = design.nu.sample(design.T, rng);
    const Estimate e = kl_knn_estimate(f(X), g(X), k);
    acc += e.value;
    total.clamped += e.clamped;
  }
  total.value = acc / static_cast<double>(design.n_draws);
  return total;
}

Estimate functional_entropy(const CloudMap& f, const EvalDesign& design, int k, std::uint64_t seed) {
  if (design.T < 1 || design.n_draws < 1)
    throw PreconditionError("functional_entropy: T and n_draws must be >= 1");
  Rng rng(seed);
  Estimate total;
  double acc = 0.0;
  for (Index draw = 0; draw < design.n_draws; ++draw) {
    const Eigen::MatrixXd X = design.nu.sample(design.T, rng);
    const Estimate e = entropy_knn_estimate(f(X), k);
    acc += e.value;
    total.clamped += e.clamped;
  }
  total.value = acc / static_cast<double>(design.n_draws) - 0.5 * std::log(static_cast<double>(design.T));
  return total;
}

}  // namespace hyvi::knn
