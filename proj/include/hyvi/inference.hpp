#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hyvi/datasets.hpp"
#include "hyvi/diffmath.hpp"
#include "hyvi/error.hpp"
#include "hyvi/knn.hpp"
#include "hyvi/nets.hpp"
#include "hyvi/posterior.hpp"

namespace hyvi {

enum class Method { nn_hyvi, funn_hyvi, mfvi, funn_mfvi };

/// "nn-hyvi", "funn-hyvi", "mfvi", "funn-mfvi".
std::string to_string(Method m);
Method method_from_string(const std::string& s);
inline bool is_mean_field(Method m) { return m == Method::mfvi || m == Method::funn_mfvi; }

struct TrainConfig {
  PredictorArch arch;
  Index n_ll_samples = 100;
  Index n_kl_samples = 500;
  int k = 1;
  Index batch_size = 50;
  double lr_init = 0.005;
  double lr_min = 1e-4;
  double lr_factor = 0.7;
  /// Mean-field methods use twice this value.
  int patience_epochs = 30;
  double plateau_threshold = 1e-4;
  int max_epochs = 2000;
  /// Evaluation points per training step for predictor-space KL; one nu^T draw per step.
  Index T = 50;
  NoiseMode sigma_mode = NoiseMode::fixed;
  /// Fixed noise level, or the initial value when learned.
  double sigma = 0.1;
  double prior_variance = 0.5;
  Index noise_dim = 5;
  std::vector<Index> hypernet_widths{20, 40};
  /// Initial mean-field standard deviation.
  double mf_init_sigma = 1e-2;
  std::uint64_t seed = 0;

  /// Throws PreconditionError on invalid settings.
  void validate() const;
  int effective_patience(Method m) const { return is_mean_field(m) ? 2 * patience_epochs : patience_epochs; }
};

/// Architectural constants of an objective, independent of the current parameter values.
struct ObjectiveSpec {
  PredictorArch arch;
  /// Unused by mean-field objectives.
  PredictorArch hypernet;
  NoiseMode sigma_mode = NoiseMode::fixed;
  double fixed_sigma = 0.1;
  double prior_variance = 0.5;
  int k = 1;

  /// Length of the flat variational parameter vector for `m` (including raw sigma when learned).
  Index num_variational_params(Method m) const;
};

ObjectiveSpec make_objective_spec(const TrainConfig& config);

/// Random inputs of one training step. Drawn in this order from the training generator:
/// eps_ll, eps_kl, prior (predictor-space and HyVI parameter-space methods), inputs
/// (predictor-space methods). Unused parts are left empty and consume no randomness.
struct StepNoise {
  Eigen::MatrixXd eps_ll;  // n_ll x l (hypernet noise) or n_ll x d (mean-field)
  Eigen::MatrixXd eps_kl;  // n_kl x l or n_kl x d
  Eigen::MatrixXd prior;   // n_kl x d prior draws
  Eigen::MatrixXd inputs;  // T x D draws from nu
};

StepNoise draw_step_noise(Method m, const ObjectiveSpec& spec, const TrainConfig& config,
                          const InputDistribution* nu, Rng& rng);

struct ObjectiveTerms {
  ad::Tensor total;
  /// Unscaled KL estimate.
  ad::Tensor kl;
  /// Sum over the batch of the mean log-likelihood over draws.
  ad::Tensor ll;
  double scale = 1.0;
};

/// Sum over rows of mean_s ln N(y_i | f_{theta_s}(x_i), sigma^2); thetas is S x d.
ad::Tensor expected_log_lik(const PredictorArch& arch, const ad::Tensor& thetas, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, const ad::Tensor& sigma);

/// Observation noise as a graph node: softplus of the trailing parameter when learned.
ad::Tensor sigma_node(const ad::Tensor& params, const ObjectiveSpec& spec);

/// params = [lambda, raw_sigma?]. (|B|/|D|) KL(theta-cloud, prior-cloud) - expected_log_lik.
ObjectiveTerms elbo_nn_hyvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise);

/// As elbo_nn_hyvi with the KL measured between prediction clouds on noise.inputs.
ObjectiveTerms elbo_funn_hyvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise);

/// params = [mu, rho, raw_sigma?], theta = mu + softplus(rho) * eps. The parameter-space KL
/// is the sample mean of ln q(theta) - ln p(theta) over the eps_kl draws.
ObjectiveTerms elbo_mfvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                         const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise, Space space);

ObjectiveTerms evaluate_objective(Method m, const ad::Tensor& params, const ObjectiveSpec& spec,
                                  const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Index dataset_size,
                                  const StepNoise& noise);

/// Epoch means over steps: objective = kl_term - ll_term, with kl_term already scaled by |B|/|D|.
struct EpochRecord {
  int epoch = 0;
  double objective = 0.0;
  double kl_term = 0.0;
  double ll_term = 0.0;
  double lr = 0.0;
  double sigma_l = 0.0;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
  /// Columns epoch,objective,kl_term,ll_term,lr,sigma_l; optional leading comment line.
  void write_csv(const std::filesystem::path& path, const std::string& comment = "") const;
};

/// Thrown when the objective becomes non-finite; carries the trace up to the failure.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, TrainingTrace trace) : Error(what), trace_(std::move(trace)) {}
  const TrainingTrace& trace() const { return trace_; }

 private:
  TrainingTrace trace_;
};

struct TrainResult {
  Posterior posterior;
  TrainingTrace trace;
  /// Final flat variational parameters.
  ParamVector params;
};

/// Epoch loop: shuffled mini-batches, Adam, reduce-on-plateau on the epoch-mean objective.
/// Stops after max_epochs or once the learning rate drops below lr_min.
/// `nu` is required by the predictor-space methods.
TrainResult train(Method m, const Dataset& train_data, const TrainConfig& config,
                  const InputDistribution* nu = nullptr);

}  // namespace hyvi
