#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "hyvi/datasets.hpp"
#include "hyvi/nets.hpp"
#include "hyvi/posterior.hpp"

namespace hyvi {

struct LogDensity {
  double value = 0.0;
  ParamVector grad;
};

/// Unnormalised log posterior sum_i ln N(y_i | f_theta(x_i), sigma_l^2) + ln p(theta) and its gradient.
LogDensity log_posterior_and_grad(const PredictorArch& arch, const ParamVector& theta, const Eigen::MatrixXd& X,
                                  const Eigen::VectorXd& y, const GaussianPrior& prior, double sigma_l);

using LogTarget = std::function<LogDensity(const ParamVector&)>;

/// Binds data, prior and noise into a target for hmc_sample.
LogTarget make_log_posterior(const PredictorArch& arch, const Dataset& data, const GaussianPrior& prior,
                             double sigma_l);

/// Position, momentum and the target evaluated at the position.
struct PhaseState {
  ParamVector q;
  ParamVector p;
  LogDensity at_q;
};

/// Hamiltonian with identity mass matrix: -log density + |p|^2 / 2.
inline double hamiltonian(const PhaseState& s) { return -s.at_q.value + 0.5 * s.p.squaredNorm(); }

/// n_steps leapfrog steps of size step_size; n_steps >= 1.
PhaseState leapfrog(const LogTarget& target, PhaseState start, double step_size, int n_steps);

struct HmcConfig {
  long n_iterations = 20000;
  long n_burnin = 5000;
  int n_leapfrog = 100;
  double target_accept = 0.8;
  long max_retained = 10000;
  /// Starting step size; 0 picks one by repeated doubling/halving.
  double initial_step_size = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Chain {
  /// Retained post-burn-in draws, one per row.
  ParamBatch samples;
  /// Acceptance rate after burn-in.
  double accept_rate = 0.0;
  /// Step size used at every iteration.
  std::vector<double> step_size_trace;
  /// Trajectories rejected because the Hamiltonian became non-finite or exploded.
  long divergences = 0;
  long thinning = 1;
};

/// HMC with dual-averaging step-size adaptation during burn-in, frozen afterwards,
/// and thinning so that at most max_retained draws are kept.
Chain hmc_sample(const LogTarget& target, const ParamVector& init, const HmcConfig& config);

struct ChainDiagnostics {
  Eigen::VectorXd split_r_hat;
  Eigen::VectorXd ess_bulk;
  /// True where R-hat is undefined (zero within-chain variance); split_r_hat holds NaN there.
  std::vector<bool> r_hat_undefined;
};

/// Split-R-hat and ESS (Geyer initial positive sequence) per coordinate. Each chain is cut
/// into two halves (the middle draw dropped for odd lengths) and all halves are truncated
/// to a common length. Throws PreconditionError with fewer than 4 half-chains.
ChainDiagnostics diagnostics(const std::vector<ParamBatch>& chains);
ChainDiagnostics diagnostics(const std::vector<Chain>& chains);

void write_diagnostics_csv(const std::filesystem::path& path, const ChainDiagnostics& diag,
                           const std::string& comment = "");

struct EnsembleConfig {
  int n_models = 5;
  int epochs = 3000;
  Index batch_size = 50;
  double lr = 0.01;
  double momentum = 0.9;
  /// Learned mode sets sigma_l to the training RMSE of the ensemble-mean prediction.
  NoiseMode sigma_mode = NoiseMode::fixed;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Independently initialised members trained with the RMSE loss by SGD with momentum.
Posterior train_ensemble(const Dataset& data, const PredictorArch& arch, const EnsembleConfig& config);

struct DropoutConfig {
  double p_drop = 0.05;
  int epochs = 2000;
  Index batch_size = 50;
  double lr = 1e-3;
  /// Learned: sigma_l trained jointly, starting from `sigma`.
  NoiseMode sigma_mode = NoiseMode::learned;
  double sigma = 1.0;
  /// Defaults to 10^(-1/sqrt(N)); coupled L2 added to the gradient of the network weights.
  std::optional<double> weight_decay;
  std::uint64_t seed = 0;
};

double default_dropout_weight_decay(Index n);

/// Trains with dropout on every hidden unit (inverted scaling) and the mean negative
/// log-likelihood loss; the posterior draws one dropout mask per ParamVector.
Posterior train_mc_dropout(const Dataset& data, const PredictorArch& arch, const DropoutConfig& config);

}  // namespace hyvi
