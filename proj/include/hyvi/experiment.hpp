#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hyvi/baselines.hpp"
#include "hyvi/datasets.hpp"
#include "hyvi/error.hpp"
#include "hyvi/evaluation.hpp"
#include "hyvi/inference.hpp"
#include "json.hpp"

namespace hyvi::cli {

using Json = nlohmann::json;

/// Process exit codes of the hyvi command.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,       // any other error
  kExitData = 2,          // unreadable or malformed dataset
  kExitNaN = 3,           // training aborted on a non-finite objective
  kExitArchMismatch = 4,  // posterior does not fit the dataset
  kExitUsage = 5,         // invalid flags or configuration
};

class UsageError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};
class ArchMismatch : public Error {
 public:
  using Error::Error;
};

/// Every method the harness can run: the four variational methods plus the baselines.
enum class MethodId { nn_hyvi, funn_hyvi, mfvi, funn_mfvi, hmc, ensemble, mc_dropout };

/// "nn-hyvi", "funn-hyvi", "mfvi", "funn-mfvi", "hmc", "ensemble", "mc-dropout".
std::string to_string(MethodId m);
MethodId method_id_from_string(const std::string& s);
std::optional<Method> variational_method(MethodId m);
bool uses_nu(MethodId m);
const std::vector<MethodId>& all_methods();

/// Built-in CSV datasets: file stem, target column and the fixed noise level of the
/// fixed-noise experiments (standardised units).
struct KnownDataset {
  std::string name;
  std::string target;
  double sigma;
};
const std::vector<KnownDataset>& known_datasets();

struct DatasetSpec {
  /// "wave", a known dataset name, or any name when `path` is given.
  std::string name = "wave";
  /// CSV file; relative paths and known names resolve against the data directory.
  std::string path;
  std::string target;
  /// Random subset of this many rows before splitting.
  std::optional<Index> subsample;
  double train_fraction = 0.9;
  /// Seed of data generation and subsampling; the split uses the run seed.
  std::uint64_t seed = 0;
  /// "auto" (wave: [-4, 2]; CSV: feature ranges), "none", or explicit bounds.
  std::string nu = "auto";
  std::vector<double> nu_lower, nu_upper;
};

struct EvalSettings {
  Index n_samples = 1000;
  int k = 5;
  Index T = 200;
  Index n_draws = 100;
  Index ood_samples = 200;
};

/// One experiment: dataset, method, every tunable, seeds and output directory.
struct ExperimentConfig {
  DatasetSpec dataset;
  MethodId method = MethodId::funn_hyvi;
  /// Empty means the dataset default: [50] tanh for wave, [50] relu otherwise.
  std::vector<Index> hidden;
  std::optional<Activation> activation;
  NoiseMode sigma_mode = NoiseMode::fixed;
  /// Unset means the dataset default (0.1 for wave, the known value for UCI sets, else 1).
  std::optional<double> sigma;
  TrainConfig train;
  /// Unset means T = 50 on wave and 200 on CSV datasets.
  std::optional<Index> train_T;
  HmcConfig hmc;
  EnsembleConfig ensemble;
  DropoutConfig dropout;
  EvalSettings eval;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "runs/experiment";

  double resolved_sigma() const;
  PredictorArch arch(Index input_dim) const;
  /// Every resolved setting; `out` is excluded so the hash does not depend on location.
  Json canonical() const;
  /// 16 hex digits of FNV-1a over canonical().dump().
  std::string hash() const;
  /// "config_hash=<hash> seed=<seed>", the provenance line of every output.
  std::string provenance(std::uint64_t seed) const;
};

/// Applies a JSON document on top of `base`. Unknown keys and ill-typed values throw UsageError.
ExperimentConfig parse_config(const Json& doc, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

/// $HYVI_DATA_DIR, or "data" when unset.
std::filesystem::path data_dir();

struct PreparedData {
  std::string name;
  Dataset train;
  Dataset test;
  /// Full dataset in training units; the OOD box is built from it.
  Dataset full;
  std::optional<InputDistribution> nu;
};

/// Loads or generates the dataset, subsamples, splits with `split_seed` and builds nu.
/// Throws DataError on missing or malformed files.
PreparedData prepare_data(const DatasetSpec& spec, std::uint64_t split_seed);

struct RunResult {
  Posterior posterior;
  std::optional<TrainingTrace> trace;
  std::optional<Chain> chain;
  double runtime_s = 0.0;
};

/// Trains one method with the run seed. Predictor-space methods require data.nu.
RunResult run_method(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed);

struct PosteriorFiles {
  std::filesystem::path bin;
  std::filesystem::path sidecar;
  std::optional<std::filesystem::path> trace;
};

/// Writes posterior.bin, posterior.json and trace.csv (variational methods) or
/// hmc_trace.csv (HMC) into dir, each through a temporary file and a rename.
PosteriorFiles save_run(const std::filesystem::path& dir, const RunResult& run, const ExperimentConfig& config,
                        const PreparedData& data, std::uint64_t seed);

/// Reads a posterior from its .bin and the sidecar next to it (same stem, .json).
Posterior load_posterior(const std::filesystem::path& bin, Json* sidecar = nullptr);

/// Throws ArchMismatch when the posterior cannot take the dataset's inputs.
void check_arch(const Posterior& posterior, const Dataset& data);

/// Which metrics evaluate() computes; the others stay NaN or empty.
struct MetricSet {
  bool rmse = true;
  bool lpp = true;
  bool entropy_param = true;
  bool entropy_pred = true;
  bool epistemic = true;

  /// Comma-separated subset of rmse,lpp,entropy_param,entropy_pred,epistemic, or "all".
  static MetricSet parse(const std::string& list);
};

/// Metrics of one posterior. Predictor-space entropy and the OOD epistemic group need
/// data.nu; requesting entropy_pred without it throws UsageError.
MetricReport evaluate(const Posterior& posterior, const ExperimentConfig& config, const PreparedData& data,
                      std::uint64_t seed, const std::string& method, double runtime_s,
                      const MetricSet& metrics = {});

/// 1-D grid for predictive bands: 400 points over the nu box widened to contain the data.
Eigen::VectorXd band_grid(const PreparedData& data);

}  // namespace hyvi::cli
