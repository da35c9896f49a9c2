#include "hyvi/posterior.hpp"

namespace hyvi {

std::string to_string(Space s) { return s == Space::parameter ? "parameter" : "predictor"; }

Space space_from_string(const std::string& s) {
  if (s == "parameter") return Space::parameter;
  if (s == "predictor") return Space::predictor;
  throw PreconditionError("unknown space '" + s + "'");
}

std::string to_string(PosteriorKind k) {
  switch (k) {
    case PosteriorKind::hypernet: return "hypernet";
    case PosteriorKind::meanfield: return "meanfield";
    case PosteriorKind::hmc_samples: return "hmc_samples";
    case PosteriorKind::ensemble: return "ensemble";
    case PosteriorKind::dropout: return "dropout";
  }
  return "unknown";
}

PosteriorKind posterior_kind_from_string(const std::string& s) {
  for (auto k : {PosteriorKind::hypernet, PosteriorKind::meanfield, PosteriorKind::hmc_samples, PosteriorKind::ensemble,
                 PosteriorKind::dropout})
    if (to_string(k) == s) return k;
  throw PreconditionError("unknown posterior kind '" + s + "'");
}

ParamVector MeanFieldParams::sigma() const { return rho.unaryExpr([](double r) { return ad::softplus(r); }); }

ParamVector apply_dropout_mask(const PredictorArch& arch, const ParamVector& theta, double p, Rng& rng,
                               Index* dropped) {
  if (!(p >= 0.0 && p < 1.0)) throw PreconditionError("dropout probability must lie in [0, 1)");
  ParamVector out = theta;
  const auto spans = arch.layers();
  std::bernoulli_distribution drop(p);
  Index count = 0;
  // Hidden layer l feeds layer l+1: scale column j of that layer's weight matrix.
  for (std::size_t l = 0; l + 1 < spans.size(); ++l) {
    const auto& next = spans[l + 1];
    for (Index j = 0; j < spans[l].fan_out; ++j) {
      const bool off = drop(rng);
      count += off ? 1 : 0;
      const double factor = off ? 0.0 : 1.0 / (1.0 - p);
      for (Index r = 0; r < next.fan_out; ++r) out(next.weight_offset + r * next.fan_in + j) *= factor;
    }
  }
  if (dropped) *dropped = count;
  return out;
}

Posterior Posterior::from_hypernet(PredictorArch arch, HyperNet h, double sigma_l) {
  if (h.output_dim() != arch.num_params()) throw PreconditionError("hypernet output does not match arch");
  return Posterior(PosteriorKind::hypernet, std::move(arch), sigma_l, std::move(h));
}

Posterior Posterior::from_meanfield(PredictorArch arch, MeanFieldParams mf, double sigma_l) {
  if (mf.mu.size() != arch.num_params() || mf.rho.size() != arch.num_params())
    throw PreconditionError("mean-field parameters do not match arch");
  return Posterior(PosteriorKind::meanfield, std::move(arch), sigma_l, std::move(mf));
}

Posterior Posterior::from_samples(PredictorArch arch, ParamBatch draws, double sigma_l) {
  if (draws.cols() != arch.num_params())
    throw ShapeError("Posterior::from_samples", std::to_string(draws.cols()), std::to_string(arch.num_params()));
  if (draws.rows() < 1) throw PreconditionError("Posterior::from_samples: no draws");
  return Posterior(PosteriorKind::hmc_samples, std::move(arch), sigma_l, std::move(draws));
}

Posterior Posterior::from_ensemble(PredictorArch arch, std::vector<ParamVector> members, double sigma_l) {
  if (members.empty()) throw PreconditionError("ensemble needs at least one member");
  for (const auto& m : members)
    if (m.size() != arch.num_params()) throw PreconditionError("ensemble member does not match arch");
  return Posterior(PosteriorKind::ensemble, std::move(arch), sigma_l, std::move(members));
}

Posterior Posterior::from_dropout(PredictorArch arch, ParamVector theta, double p_drop, double sigma_l) {
  if (theta.size() != arch.num_params()) throw PreconditionError("dropout parameters do not match arch");
  return Posterior(PosteriorKind::dropout, std::move(arch), sigma_l, Dropout{std::move(theta), p_drop});
}

ParamBatch Posterior::sample(Index n, std::uint64_t seed) const {
  const Index d = arch_.num_params();
  ParamBatch out(n, d);
  switch (kind_) {
    case PosteriorKind::hypernet:
      return hypernet_sample(std::get<HyperNet>(state_), n, seed);
    case PosteriorKind::meanfield: {
      const auto& mf = std::get<MeanFieldParams>(state_);
      Rng rng(seed);
      const Eigen::MatrixXd eps = standard_normal(rng, n, d);
      const Eigen::RowVectorXd sigma = mf.sigma().transpose();
      out = eps.array().rowwise() * sigma.array();
      out.rowwise() += mf.mu.transpose();
      return out;
    }
    case PosteriorKind::hmc_samples: {
      const auto& draws = std::get<ParamBatch>(state_);
      const Index m = draws.rows();
      for (Index i = 0; i < n; ++i) out.row(i) = draws.row(n <= m ? i * m / n : i % m);
      return out;
    }
    case PosteriorKind::ensemble: {
      const auto& members = std::get<std::vector<ParamVector>>(state_);
      for (Index i = 0; i < n; ++i) out.row(i) = members[static_cast<std::size_t>(i) % members.size()].transpose();
      return out;
    }
    case PosteriorKind::dropout: {
      const auto& dr = std::get<Dropout>(state_);
      Rng rng(seed);
      for (Index i = 0; i < n; ++i) out.row(i) = apply_dropout_mask(arch_, dr.theta, dr.p, rng).transpose();
      return out;
    }
  }
  return out;
}

std::optional<Index> Posterior::support_size() const {
  if (kind_ == PosteriorKind::ensemble)
    return static_cast<Index>(std::get<std::vector<ParamVector>>(state_).size());
  if (kind_ == PosteriorKind::hmc_samples) return std::get<ParamBatch>(state_).rows();
  return std::nullopt;
}

double Posterior::p_drop() const {
  const auto* dr = std::get_if<Dropout>(&state_);
  return dr ? dr->p : 0.0;
}

ParamBatch Posterior::state() const {
  switch (kind_) {
    case PosteriorKind::hypernet: return std::get<HyperNet>(state_).lambda.transpose();
    case PosteriorKind::meanfield: {
      const auto& mf = std::get<MeanFieldParams>(state_);
      ParamBatch out(2, mf.mu.size());
      out.row(0) = mf.mu.transpose();
      out.row(1) = mf.rho.transpose();
      return out;
    }
    case PosteriorKind::hmc_samples: return std::get<ParamBatch>(state_);
    case PosteriorKind::ensemble: {
      const auto& members = std::get<std::vector<ParamVector>>(state_);
      ParamBatch out(static_cast<Index>(members.size()), arch_.num_params());
      for (std::size_t i = 0; i < members.size(); ++i) out.row(static_cast<Index>(i)) = members[i].transpose();
      return out;
    }
    case PosteriorKind::dropout: return std::get<Dropout>(state_).theta.transpose();
  }
  return {};
}

Posterior Posterior::restore(PosteriorKind kind, PredictorArch arch, const ParamBatch& state, double sigma_l,
                             const PredictorArch& hypernet_arch, double p_drop) {
  const auto rows_must_be = [&](Index r) {
    if (state.rows() != r)
      throw ShapeError("Posterior::restore(" + to_string(kind) + ")", std::to_string(state.rows()) + " rows",
                       std::to_string(r) + " rows");
  };
  switch (kind) {
    case PosteriorKind::hypernet: {
      rows_must_be(1);
      if (state.cols() != hypernet_arch.num_params())
        throw ShapeError("Posterior::restore(hypernet)", std::to_string(state.cols()),
                         std::to_string(hypernet_arch.num_params()));
      return from_hypernet(std::move(arch), HyperNet{hypernet_arch, state.row(0).transpose()}, sigma_l);
    }
    case PosteriorKind::meanfield:
      rows_must_be(2);
      return from_meanfield(std::move(arch), MeanFieldParams{state.row(0).transpose(), state.row(1).transpose()},
                            sigma_l);
    case PosteriorKind::hmc_samples: return from_samples(std::move(arch), state, sigma_l);
    case PosteriorKind::ensemble: {
      std::vector<ParamVector> members;
      for (Index i = 0; i < state.rows(); ++i) members.push_back(state.row(i).transpose());
      return from_ensemble(std::move(arch), std::move(members), sigma_l);
    }
    case PosteriorKind::dropout:
      rows_must_be(1);
      return from_dropout(std::move(arch), state.row(0).transpose(), p_drop, sigma_l);
  }
  throw PreconditionError("unknown posterior kind");
}

}  // namespace hyvi
