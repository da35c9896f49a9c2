#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "hyvi/datasets.hpp"
#include "hyvi/knn.hpp"
#include "hyvi/posterior.hpp"

namespace hyvi {

/// Metric value plus an optional flag: "degenerate" (clamped neighbour distances) or
/// "finite-support" (fewer distinct draws than requested; value computed on the distinct ones).
struct FlaggedValue {
  double value = std::numeric_limits<double>::quiet_NaN();
  std::string flag;

  bool flagged() const { return !flag.empty(); }
};

/// Root-mean-square error of the posterior-mean prediction, in original target units.
double rmse(const Posterior& posterior, const Dataset& test, Index n_samples = 1000, std::uint64_t seed = 0);

/// Mean over test rows of ln (1/S) sum_s N(y | f_s(x), sigma_l^2), in original target units.
double lpp(const Posterior& posterior, const Dataset& test, Index n_samples = 1000, std::uint64_t seed = 0);

/// Kozachenko-Leonenko entropy of posterior draws, on raw parameters or on evaluation
/// clouds over design.nu (predictor space, minus (1/2) ln T).
FlaggedValue posterior_entropy(const Posterior& posterior, Space space, const knn::EvalDesign& design,
                               Index n_samples = 1000, int k = 5, std::uint64_t seed = 0);

/// 1-D entropy of the predictions f_theta(x) at every row x of X, sharing one set of draws.
std::vector<FlaggedValue> epistemic_profile(const Posterior& posterior, const Eigen::MatrixXd& X,
                                            Index n_samples = 1000, int k = 5, std::uint64_t seed = 0);

/// Single-input version of epistemic_profile.
FlaggedValue epistemic_uncertainty(const Posterior& posterior, const Eigen::RowVectorXd& x, Index n_samples = 1000,
                                   int k = 5, std::uint64_t seed = 0);

/// KL(a || b) estimated with k = 1 from independent draws of both posteriors.
FlaggedValue cross_model_kl(const Posterior& a, const Posterior& b, Space space, const knn::EvalDesign& design,
                            Index n_samples = 1000, std::uint64_t seed = 0);

/// Median of the finite entries; NaN when there are none.
double median(std::vector<double> values);

struct EpistemicGroup {
  std::string name;  // "train", "test" or "ood"
  std::vector<double> values;
  /// Non-empty when any per-input estimate was flagged.
  std::string flag;

  double median() const { return hyvi::median(values); }
};

struct MetricReport {
  std::string method;
  std::string dataset;
  std::uint64_t seed = 0;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double lpp = std::numeric_limits<double>::quiet_NaN();
  FlaggedValue entropy_param;
  FlaggedValue entropy_pred;
  std::vector<EpistemicGroup> epistemic;
  double runtime_s = 0.0;

  /// Median of the named group, NaN if absent.
  double epistemic_median(const std::string& group) const;
};

/// Posterior-mean prediction with +-1, 2, 3 standard deviations of f over a 1-D grid.
struct BandPanel {
  std::string title;
  Eigen::VectorXd grid;
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
  Eigen::VectorXd train_x;
  Eigen::VectorXd train_y;
};

BandPanel predictive_band(const std::string& title, const Posterior& posterior, const Eigen::VectorXd& grid,
                          const Dataset& train, Index n_samples = 1000, std::uint64_t seed = 0);

/// Standalone SVG 1.1 with one panel per posterior.
void write_band_svg(const std::filesystem::path& path, const std::vector<BandPanel>& panels, double y_lo = -3.0,
                    double y_hi = 3.0);

/// Writes into out_dir (created if needed):
///   metrics.csv        method,dataset,seed,rmse,lpp,entropy_param,entropy_pred,epi_train_med,
///                      epi_test_med,epi_ood_med,runtime_s
///   metric_flags.csv   method,dataset,seed,metric,flag for every flagged value
///   epistemic_values.csv  method,dataset,seed,group,value
///   epistemic_hist_<method>_<dataset>_<seed>.csv  bin_lo,bin_hi and one count column per
///                      group; bin edges are shared by every histogram of the call
///   entropy_table.csv  space,dataset,method,mean,stderr,runs
///   rmse_lpp_table.csv metric,dataset,method,mean,stderr,runs
///   bands.svg          when panels are given
/// `comment` becomes a leading "# ..." line of every CSV file.
void emit_report(const std::vector<MetricReport>& reports, const std::filesystem::path& out_dir,
                 const std::string& comment = "", const std::vector<BandPanel>& panels = {});

/// One cross-model KL estimate KL(from || to).
struct KlRecord {
  std::string space;
  std::string dataset;
  std::string from;
  std::string to;
  std::uint64_t seed = 0;
  FlaggedValue value;
};

/// Writes kl_values.csv (space,dataset,from,to,seed,value,flag) and kl_table.csv
/// (space,dataset,from,to,mean,stderr,runs) into out_dir.
void emit_kl_table(const std::vector<KlRecord>& records, const std::filesystem::path& out_dir,
                   const std::string& comment = "");

}  // namespace hyvi
