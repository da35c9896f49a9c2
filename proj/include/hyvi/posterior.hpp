#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hyvi/nets.hpp"

namespace hyvi {

/// Where distances between posterior draws are measured.
enum class Space { parameter, predictor };

std::string to_string(Space s);
Space space_from_string(const std::string& s);

enum class PosteriorKind { hypernet, meanfield, hmc_samples, ensemble, dropout };

std::string to_string(PosteriorKind k);
PosteriorKind posterior_kind_from_string(const std::string& s);

/// Fully factorised Gaussian: sigma = softplus(rho).
struct MeanFieldParams {
  ParamVector mu;
  ParamVector rho;

  ParamVector sigma() const;
};

/// Zeroes the outgoing weights of each hidden unit with probability p and scales the
/// kept ones by 1/(1-p), so one draw realises one dropout mask. `dropped` (optional)
/// receives the number of dropped hidden units.
ParamVector apply_dropout_mask(const PredictorArch& arch, const ParamVector& theta, double p, Rng& rng,
                               Index* dropped = nullptr);

/// Sampler over ParamVectors shared by every inference method.
class Posterior {
 public:
  static Posterior from_hypernet(PredictorArch arch, HyperNet h, double sigma_l);
  static Posterior from_meanfield(PredictorArch arch, MeanFieldParams mf, double sigma_l);
  /// Stored draws (HMC chains, loaded files). sample(n) takes n evenly spaced rows, or cycles
  /// through all rows when n exceeds the number stored; the seed is not used.
  static Posterior from_samples(PredictorArch arch, ParamBatch draws, double sigma_l);
  /// Draws cycle uniformly over the members.
  static Posterior from_ensemble(PredictorArch arch, std::vector<ParamVector> members, double sigma_l);
  static Posterior from_dropout(PredictorArch arch, ParamVector theta, double p_drop, double sigma_l);

  /// n draws, deterministic given seed.
  ParamBatch sample(Index n, std::uint64_t seed) const;

  PosteriorKind kind() const { return kind_; }
  const PredictorArch& arch() const { return arch_; }
  /// Observation noise in training (standardised) units.
  double sigma_l() const { return sigma_l_; }
  /// Number of distinct draws when finite (ensembles, stored samples).
  std::optional<Index> support_size() const;

  const HyperNet* hypernet() const { return std::get_if<HyperNet>(&state_); }
  const MeanFieldParams* meanfield() const { return std::get_if<MeanFieldParams>(&state_); }
  /// Dropout probability; 0 for every other kind.
  double p_drop() const;

  /// Sampler state as a batch, for persistence: lambda (1 row), [mu; rho] (2 rows),
  /// stored draws, one row per ensemble member, or the unmasked dropout parameters (1 row).
  ParamBatch state() const;
  /// Inverse of state(). `hypernet_arch` is needed for the hypernet kind only.
  static Posterior restore(PosteriorKind kind, PredictorArch arch, const ParamBatch& state, double sigma_l,
                           const PredictorArch& hypernet_arch = {}, double p_drop = 0.0);

 private:
  struct Dropout {
    ParamVector theta;
    double p;
  };
  Posterior(PosteriorKind kind, PredictorArch arch, double sigma_l,
            std::variant<HyperNet, MeanFieldParams, ParamBatch, std::vector<ParamVector>, Dropout> state)
      : kind_(kind), arch_(std::move(arch)), sigma_l_(sigma_l), state_(std::move(state)) {}

  PosteriorKind kind_;
  PredictorArch arch_;
  double sigma_l_;
  std::variant<HyperNet, MeanFieldParams, ParamBatch, std::vector<ParamVector>, Dropout> state_;
};

}  // namespace hyvi
