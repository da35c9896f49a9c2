#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hyvi/ood.hpp"

namespace hyvi {

/// Affine normalisation applied to inputs (per feature) and target.
struct NormStats {
  Eigen::RowVectorXd x_mean;
  Eigen::RowVectorXd x_std;
  double y_mean = 0.0;
  double y_std = 1.0;

  static NormStats identity(Eigen::Index dim);
};

struct Dataset {
  std::string name;
  Eigen::MatrixXd X;  // N x D
  Eigen::VectorXd y;  // N
  std::vector<std::string> feature_names;
  std::optional<NormStats> norm;  // present once standardised

  Eigen::Index size() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }

  /// Target values in original units.
  Eigen::VectorXd y_original() const;
  Eigen::MatrixXd X_original() const;
};

/// y = cos(4(x + 0.2)) without noise.
double wave_clean(double x);

/// 120 points, x uniform on [-1,-0.5] U [0.5,1] (each patch w.p. 1/2), noise sd 0.1.
/// The result carries identity normalisation so that raw units are training units.
Dataset make_wave(std::uint64_t seed, Eigen::Index n = 120, double noise_sd = 0.1);

/// Uniform on [-4, 2].
InputDistribution wave_ood();

/// Numeric CSV with a header row. The target column is removed from the features.
Dataset load_csv(const std::filesystem::path& path, const std::string& target_column);

void write_csv(const std::filesystem::path& path, const Dataset& ds, const std::string& target_name = "y");

/// Mean/std (population) per feature and of the target, computed on `ds`.
/// Throws PreconditionError on constant columns.
NormStats compute_norm_stats(const Dataset& ds);

/// Applies `stats` to raw data (ds.norm must be empty) and records them.
Dataset standardize(const Dataset& ds, const NormStats& stats);
/// Inverse of standardize.
Dataset destandardize(const Dataset& ds);

/// Random permutation by seed; train = floor(N * train_fraction) rows, test = the rest.
/// Standardisation statistics come from the train part only and are applied to both.
std::pair<Dataset, Dataset> split_standardize(const Dataset& ds, double train_fraction, std::uint64_t seed);

/// Random subset of n rows (order of the permutation), unstandardised data only.
Dataset subsample(const Dataset& ds, Eigen::Index n, std::uint64_t seed);

/// Per-feature [min, max] of ds.X.
InputDistribution hyperrectangle_from(const Dataset& ds);

}  // namespace hyvi
