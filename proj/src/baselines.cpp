#include "hyvi/baselines.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>

#include "hyvi/optim.hpp"

namespace hyvi {

LogDensity log_posterior_and_grad(const PredictorArch& arch, const ParamVector& theta, const Eigen::MatrixXd& X,
                                  const Eigen::VectorXd& y, const GaussianPrior& prior, double sigma_l) {
  if (!(sigma_l > 0.0)) throw DomainError("log_posterior_and_grad: sigma_l", sigma_l);
  if (X.rows() != y.size()) throw ShapeError("log_posterior_and_grad", "X rows", "y size");
  const double n = static_cast<double>(X.rows());
  const double d = static_cast<double>(theta.size());
  const ad::Tensor leaf = ad::Tensor::variable(theta.transpose());
  const ad::Tensor pred = mlp_forward(arch, leaf, X);
  const ad::Tensor misfit = sum(square(pred - ad::Tensor(y.transpose())));
  const double constant = -n * (std::log(sigma_l) + 0.5 * std::log(2.0 * std::numbers::pi)) -
                          0.5 * d * std::log(2.0 * std::numbers::pi * prior.variance);
  const ad::Tensor total = add_scalar(
      scale(misfit, -0.5 / (sigma_l * sigma_l)) + scale(sum(square(leaf)), -0.5 / prior.variance), constant);
  backward(total);
  return {total.item(), leaf.grad().transpose()};
}

LogTarget make_log_posterior(const PredictorArch& arch, const Dataset& data, const GaussianPrior& prior,
                             double sigma_l) {
  return [arch, X = data.X, y = data.y, prior, sigma_l](const ParamVector& theta) {
    return log_posterior_and_grad(arch, theta, X, y, prior, sigma_l);
  };
}

PhaseState leapfrog(const LogTarget& target, PhaseState s, double step_size, int n_steps) {
  if (n_steps < 1) throw PreconditionError("leapfrog: n_steps must be >= 1");
  s.p += 0.5 * step_size * s.at_q.grad;
  for (int i = 0; i < n_steps; ++i) {
    s.q += step_size * s.p;
    s.at_q = target(s.q);
    if (!std::isfinite(s.at_q.value) || !s.at_q.grad.allFinite()) return s;
    s.p += (i + 1 < n_steps ? 1.0 : 0.5) * step_size * s.at_q.grad;
  }
  return s;
}

void HmcConfig::validate() const {
  if (n_leapfrog < 1) throw PreconditionError("HMC: n_leapfrog must be >= 1");
  if (n_burnin < 0 || n_burnin >= n_iterations) throw PreconditionError("HMC: need 0 <= n_burnin < n_iterations");
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw PreconditionError("HMC: target_accept must lie in (0, 1)");
  if (max_retained < 1) throw PreconditionError("HMC: max_retained must be positive");
  if (initial_step_size < 0.0) throw PreconditionError("HMC: initial_step_size must be >= 0");
}

namespace {

// Energy jumps beyond this count as divergent trajectories.
constexpr double kDivergence = 1000.0;

double accept_probability(double h0, double h1) {
  if (!std::isfinite(h1)) return 0.0;
  return std::min(1.0, std::exp(h0 - h1));
}

// Doubles or halves a unit step until the one-step acceptance probability crosses 1/2.
double reasonable_step_size(const LogTarget& target, const PhaseState& at, Rng& rng) {
  double eps = 1.0;
  PhaseState s = at;
  s.p = standard_normal(rng, at.q.size(), 1);
  const double h0 = hamiltonian(s);
  double ratio = accept_probability(h0, hamiltonian(leapfrog(target, s, eps, 1)));
  const double dir = ratio > 0.5 ? 1.0 : -1.0;
  for (int i = 0; i < 100; ++i) {
    if (dir > 0 ? !(ratio > 0.5) : !(ratio < 0.5)) break;
    eps *= dir > 0 ? 2.0 : 0.5;
    ratio = accept_probability(h0, hamiltonian(leapfrog(target, s, eps, 1)));
  }
  return eps;
}

}  // namespace

Chain hmc_sample(const LogTarget& target, const ParamVector& init, const HmcConfig& config) {
  config.validate();
  Rng rng(config.seed);
  PhaseState state{init, ParamVector::Zero(init.size()), target(init)};
  if (!std::isfinite(state.at_q.value) || !state.at_q.grad.allFinite())
    throw PreconditionError("hmc_sample: target is not finite at the initial point");

  double eps = config.initial_step_size > 0.0 ? config.initial_step_size : reasonable_step_size(target, state, rng);
  // Dual averaging (gamma = 0.05, t0 = 10, kappa = 0.75), shrinking towards 10 * eps0.
  const double mu = std::log(10.0 * eps);
  double h_bar = 0.0;
  double log_eps_bar = 0.0;

  const long post = config.n_iterations - config.n_burnin;
  Chain chain;
  chain.thinning = (post + config.max_retained - 1) / config.max_retained;
  chain.samples.resize(post / chain.thinning, init.size());
  chain.step_size_trace.reserve(static_cast<std::size_t>(config.n_iterations));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  long accepted = 0;
  Index kept = 0;

  for (long it = 0; it < config.n_iterations; ++it) {
    state.p = standard_normal(rng, init.size(), 1);
    const double h0 = hamiltonian(state);
    const PhaseState proposal = leapfrog(target, state, eps, config.n_leapfrog);
    const double h1 = hamiltonian(proposal);
    const bool divergent = !std::isfinite(h1) || h1 - h0 > kDivergence;
    const double alpha = divergent ? 0.0 : accept_probability(h0, h1);
    const double u = unif(rng);
    const bool accept = !divergent && u < alpha;
    if (accept) {
      state.q = proposal.q;
      state.at_q = proposal.at_q;
    }
    chain.divergences += divergent ? 1 : 0;
    chain.step_size_trace.push_back(eps);

    if (it < config.n_burnin) {
      const double m = static_cast<double>(it + 1);
      h_bar = (1.0 - 1.0 / (m + 10.0)) * h_bar + (config.target_accept - alpha) / (m + 10.0);
      const double log_eps = mu - std::sqrt(m) / 0.05 * h_bar;
      const double w = std::pow(m, -0.75);
      log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
      eps = it + 1 == config.n_burnin ? std::exp(log_eps_bar) : std::exp(log_eps);
    } else {
      accepted += accept ? 1 : 0;
      const long j = it - config.n_burnin;
      if ((j + 1) % chain.thinning == 0 && kept < chain.samples.rows()) chain.samples.row(kept++) = state.q.transpose();
    }
  }
  chain.accept_rate = static_cast<double>(accepted) / static_cast<double>(post);
  return chain;
}

ChainDiagnostics diagnostics(const std::vector<ParamBatch>& chains) {
  std::vector<Eigen::MatrixXd> halves;
  for (const auto& c : chains) {
    const Index h = c.rows() / 2;
    halves.push_back(c.topRows(h));
    halves.push_back(c.bottomRows(h));
  }
  if (halves.size() < 4) throw PreconditionError("diagnostics: need at least 4 half-chains (2 chains)");
  Index n = std::numeric_limits<Index>::max();
  for (const auto& h : halves) n = std::min(n, h.rows());
  if (n < 2) throw PreconditionError("diagnostics: chains too short");
  const Index dim = halves.front().cols();
  for (const auto& h : halves)
    if (h.cols() != dim) throw ShapeError("diagnostics", std::to_string(h.cols()), std::to_string(dim));

  const auto m = static_cast<Index>(halves.size());
  const double nd = static_cast<double>(n);
  const double md = static_cast<double>(m);
  ChainDiagnostics out;
  out.split_r_hat.resize(dim);
  out.ess_bulk.resize(dim);
  out.r_hat_undefined.assign(static_cast<std::size_t>(dim), false);

  Eigen::MatrixXd x(n, m);
  for (Index c = 0; c < dim; ++c) {
    for (Index j = 0; j < m; ++j) x.col(j) = halves[static_cast<std::size_t>(j)].col(c).head(n);
    const Eigen::RowVectorXd means = x.colwise().mean();
    const Eigen::MatrixXd centred = x.rowwise() - means;
    const double W = centred.array().square().sum() / (md * (nd - 1.0));
    const double B = nd * (means.array() - means.mean()).square().sum() / (md - 1.0);
    const double var_plus = (nd - 1.0) / nd * W + B / nd;
    if (!(W > 0.0)) {
      out.split_r_hat(c) = std::numeric_limits<double>::quiet_NaN();
      out.ess_bulk(c) = std::numeric_limits<double>::quiet_NaN();
      out.r_hat_undefined[static_cast<std::size_t>(c)] = true;
      continue;
    }
    out.split_r_hat(c) = std::sqrt(var_plus / W);

    // rho_t = 1 - (W - mean autocovariance at lag t) / var_plus, summed in pairs while positive.
    auto rho = [&](Index t) {
      double acov = 0.0;
      for (Index j = 0; j < m; ++j)
        acov += centred.col(j).head(n - t).dot(centred.col(j).tail(n - t)) / nd;
      return 1.0 - (W - acov / md) / var_plus;
    };
    double tau = -1.0;
    for (Index t = 0; t + 1 < n; t += 2) {
      const double pair = (t == 0 ? 1.0 : rho(t)) + rho(t + 1);
      if (!(pair > 0.0)) break;
      tau += 2.0 * pair;
    }
    out.ess_bulk(c) = md * nd / std::max(tau, 1.0 / std::log10(md * nd));
  }
  return out;
}

ChainDiagnostics diagnostics(const std::vector<Chain>& chains) {
  std::vector<ParamBatch> draws;
  for (const auto& c : chains) draws.push_back(c.samples);
  return diagnostics(draws);
}

void write_diagnostics_csv(const std::filesystem::path& path, const ChainDiagnostics& diag,
                           const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "coordinate,split_r_hat,ess_bulk,r_hat_undefined\n" << std::setprecision(10);
  for (Index c = 0; c < diag.split_r_hat.size(); ++c)
    out << c << ',' << diag.split_r_hat(c) << ',' << diag.ess_bulk(c) << ','
        << (diag.r_hat_undefined[static_cast<std::size_t>(c)] ? 1 : 0) << '\n';
}

namespace {

void gather_batch(const Dataset& data, const std::vector<Index>& order, Index start, Index count,
                  Eigen::MatrixXd& X, Eigen::VectorXd& y) {
  X.resize(count, data.dim());
  y.resize(count);
  for (Index i = 0; i < count; ++i) {
    const Index r = order[static_cast<std::size_t>(start + i)];
    X.row(i) = data.X.row(r);
    y(i) = data.y(r);
  }
}

}  // namespace

Posterior train_ensemble(const Dataset& data, const PredictorArch& arch, const EnsembleConfig& config) {
  if (config.n_models < 1 || config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0))
    throw PreconditionError("train_ensemble: invalid config");
  if (data.size() < 1) throw PreconditionError("train_ensemble: empty dataset");
  const Index N = data.size();
  std::vector<ParamVector> members;
  Eigen::MatrixXd Xb;
  Eigen::VectorXd yb;
  for (int member = 0; member < config.n_models; ++member) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(member)));
    ParamVector theta = init_params(arch, rng);
    SgdMomentum opt(theta.size(), config.momentum);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const auto order = shuffled_indices(N, rng);
      for (Index start = 0; start < N; start += config.batch_size) {
        const Index nb = std::min(config.batch_size, N - start);
        gather_batch(data, order, start, nb, Xb, yb);
        const ad::Tensor leaf = ad::Tensor::variable(theta.transpose());
        const ad::Tensor mse = mean(square(mlp_forward(arch, leaf, Xb) - ad::Tensor(yb.transpose())));
        // The RMSE gradient is undefined at an exact fit; nothing to correct then.
        if (!(mse.item() > 0.0)) continue;
        backward(ad::sqrt(mse));
        opt.step(theta, leaf.grad().transpose(), config.lr);
      }
    }
    members.push_back(std::move(theta));
  }
  double sigma = config.sigma;
  if (config.sigma_mode == NoiseMode::learned) {
    Eigen::RowVectorXd mean_pred = Eigen::RowVectorXd::Zero(N);
    for (const auto& m : members) mean_pred += predict_batch(arch, m.transpose(), data.X);
    mean_pred /= static_cast<double>(members.size());
    sigma = std::sqrt((mean_pred.transpose() - data.y).squaredNorm() / static_cast<double>(N));
  }
  return Posterior::from_ensemble(arch, std::move(members), sigma);
}

double default_dropout_weight_decay(Index n) {
  if (n < 1) throw PreconditionError("default_dropout_weight_decay: n must be positive");
  return std::pow(10.0, -1.0 / std::sqrt(static_cast<double>(n)));
}

Posterior train_mc_dropout(const Dataset& data, const PredictorArch& arch, const DropoutConfig& config) {
  if (!(config.p_drop >= 0.0 && config.p_drop < 1.0)) throw PreconditionError("train_mc_dropout: p_drop in [0, 1)");
  if (config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0) || !(config.sigma > 0.0))
    throw PreconditionError("train_mc_dropout: invalid config");
  if (data.size() < 1) throw PreconditionError("train_mc_dropout: empty dataset");
  const Index N = data.size();
  const Index d = arch.num_params();
  const bool learned = config.sigma_mode == NoiseMode::learned;
  const double wd = config.weight_decay.value_or(default_dropout_weight_decay(N));

  Rng rng(config.seed);
  ParamVector params(d + (learned ? 1 : 0));
  params.head(d) = init_params(arch, rng);
  if (learned) params(d) = LikelihoodNoise::from_sigma(config.sigma, NoiseMode::learned).raw;
  Adam adam(params.size());
  std::bernoulli_distribution keep(1.0 - config.p_drop);
  const double kept_scale = 1.0 / (1.0 - config.p_drop);
  Eigen::MatrixXd Xb;
  Eigen::VectorXd yb;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_indices(N, rng);
    for (Index start = 0; start < N; start += config.batch_size) {
      const Index nb = std::min(config.batch_size, N - start);
      gather_batch(data, order, start, nb, Xb, yb);
      // One mask entry per example and hidden unit, drawn row by row.
      std::vector<Eigen::MatrixXd> masks;
      for (Index width : arch.hidden_widths) {
        Eigen::MatrixXd mask(nb, width);
        for (Index i = 0; i < nb; ++i)
          for (Index j = 0; j < width; ++j) mask(i, j) = keep(rng) ? kept_scale : 0.0;
        masks.push_back(std::move(mask));
      }
      const ad::Tensor leaf = ad::Tensor::variable(params);
      const ad::Tensor theta = slice(leaf, 0, 0, d, 1);
      const ad::Tensor sigma = learned ? softplus(slice(leaf, d, 0, 1, 1)) : ad::Tensor::scalar(config.sigma);
      const ad::Tensor pred = mlp_forward_graph(arch, theta, ad::Tensor(Xb), masks);
      const double nbd = static_cast<double>(nb);
      // mean over the batch of -ln N(y | pred, sigma^2)
      const ad::Tensor nll = add_scalar(
          log(sigma) + div(scale(sum(square(pred - ad::Tensor(yb))), 0.5 / nbd), square(sigma)),
          0.5 * std::log(2.0 * std::numbers::pi));
      backward(nll);
      Eigen::VectorXd grad = leaf.grad();
      grad.head(d) += wd * params.head(d);
      adam.step(params, grad, config.lr);
    }
  }
  const double sigma = learned ? ad::softplus(params(d)) : config.sigma;
  return Posterior::from_dropout(arch, params.head(d), config.p_drop, sigma);
}

}  // namespace hyvi
