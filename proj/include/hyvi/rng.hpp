#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace hyvi {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream tag (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Entries are drawn in row-major order so that the consumption schedule does not
// depend on Eigen's storage order.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> standard_normal(Rng& rng, Eigen::Index rows,
                                                                      Eigen::Index cols) {
  std::normal_distribution<Scalar> dist(Scalar(0), Scalar(1));
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = dist(rng);
  return out;
}

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> uniform(Rng& rng, Eigen::Index rows,
                                                              Eigen::Index cols, Scalar lo,
                                                              Scalar hi) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = dist(rng);
  return out;
}

/// Uniform random permutation of 0..n-1. Fisher-Yates with explicit draws, because the
/// algorithm behind std::shuffle is implementation-defined.
inline std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

}  // namespace hyvi
