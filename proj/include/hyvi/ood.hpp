#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "hyvi/error.hpp"
#include "hyvi/rng.hpp"

namespace hyvi {

/// Uniform distribution on the closed hyperrectangle [lower, upper] (the OOD input distribution).
struct InputDistribution {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  InputDistribution() = default;
  InputDistribution(Eigen::VectorXd lo, Eigen::VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
    if (lower.size() != upper.size())
      throw ShapeError("InputDistribution", std::to_string(lower.size()), std::to_string(upper.size()));
    if ((lower.array() > upper.array()).any())
      throw PreconditionError("InputDistribution: lower bound exceeds upper bound");
  }

  Eigen::Index dim() const { return lower.size(); }
  bool contains(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return (x.transpose().array() >= lower.array()).all() && (x.transpose().array() <= upper.array()).all();
  }

  /// n x dim matrix of i.i.d. uniform draws, row-major consumption of the engine.
  Eigen::MatrixXd sample(Eigen::Index n, Rng& rng) const {
    Eigen::MatrixXd out(n, dim());
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < dim(); ++j) {
        std::uniform_real_distribution<double> u(lower(j), upper(j));
        out(i, j) = lower(j) == upper(j) ? lower(j) : u(rng);
      }
    return out;
  }
};

inline Eigen::MatrixXd sample_inputs(const InputDistribution& nu, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return nu.sample(n, rng);
}

}  // namespace hyvi
