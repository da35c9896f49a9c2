#include "hyvi/inference.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>

#include "hyvi/optim.hpp"

namespace hyvi {

std::string to_string(Method m) {
  switch (m) {
    case Method::nn_hyvi: return "nn-hyvi";
    case Method::funn_hyvi: return "funn-hyvi";
    case Method::mfvi: return "mfvi";
    case Method::funn_mfvi: return "funn-mfvi";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  if (s == "nn-hyvi") return Method::nn_hyvi;
  if (s == "funn-hyvi") return Method::funn_hyvi;
  if (s == "mfvi") return Method::mfvi;
  if (s == "funn-mfvi") return Method::funn_mfvi;
  throw PreconditionError("unknown variational method '" + s + "'");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw PreconditionError(std::string("invalid training config: ") + what);
  };
  require(arch.input_dim >= 1 && arch.output_dim == 1, "arch needs input_dim >= 1 and output_dim 1");
  for (Index w : arch.hidden_widths) require(w >= 1, "hidden widths must be positive");
  require(n_ll_samples >= 1, "n_ll_samples must be positive");
  require(n_kl_samples >= k + 1, "n_kl_samples must exceed k");
  require(k >= 1, "k must be >= 1");
  require(batch_size >= 1, "batch_size must be positive");
  require(lr_init > 0.0 && lr_min > 0.0 && lr_min < lr_init, "need 0 < lr_min < lr_init");
  require(lr_factor > 0.0 && lr_factor < 1.0, "lr_factor must lie in (0, 1)");
  require(patience_epochs >= 1, "patience_epochs must be positive");
  require(plateau_threshold >= 0.0, "plateau_threshold must be non-negative");
  require(max_epochs >= 1, "max_epochs must be positive");
  require(T >= 1, "T must be positive");
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
  require(prior_variance > 0.0, "prior_variance must be positive");
  require(noise_dim >= 1, "noise_dim must be positive");
  for (Index w : hypernet_widths) require(w >= 1, "hypernet widths must be positive");
  require(mf_init_sigma > 0.0, "mf_init_sigma must be positive");
}

Index ObjectiveSpec::num_variational_params(Method m) const {
  const Index extra = sigma_mode == NoiseMode::learned ? 1 : 0;
  return (is_mean_field(m) ? 2 * arch.num_params() : hypernet.num_params()) + extra;
}

ObjectiveSpec make_objective_spec(const TrainConfig& config) {
  ObjectiveSpec spec;
  spec.arch = config.arch;
  spec.hypernet = PredictorArch{config.noise_dim, config.hypernet_widths, Activation::relu, config.arch.num_params()};
  spec.sigma_mode = config.sigma_mode;
  spec.fixed_sigma = config.sigma;
  spec.prior_variance = config.prior_variance;
  spec.k = config.k;
  return spec;
}

StepNoise draw_step_noise(Method m, const ObjectiveSpec& spec, const TrainConfig& config,
                          const InputDistribution* nu, Rng& rng) {
  const Index d = spec.arch.num_params();
  const Index width = is_mean_field(m) ? d : spec.hypernet.input_dim;
  const bool predictor = m == Method::funn_hyvi || m == Method::funn_mfvi;
  StepNoise s;
  s.eps_ll = standard_normal(rng, config.n_ll_samples, width);
  s.eps_kl = standard_normal(rng, config.n_kl_samples, width);
  if (m != Method::mfvi) s.prior = GaussianPrior{spec.prior_variance}.sample(d, config.n_kl_samples, rng);
  if (predictor) {
    if (!nu) throw PreconditionError(to_string(m) + " needs an input distribution");
    s.inputs = nu->sample(config.T, rng);
  }
  return s;
}

ad::Tensor expected_log_lik(const PredictorArch& arch, const ad::Tensor& thetas, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, const ad::Tensor& sigma) {
  if (X.rows() != y.size()) throw ShapeError("expected_log_lik", "X rows", "y size");
  const Index S = thetas.rows();
  const double n = static_cast<double>(X.rows());
  const ad::Tensor pred = mlp_forward(arch, thetas, X);  // S x n
  const ad::Tensor target(y.transpose().replicate(S, 1));
  const ad::Tensor sq = scale(sum(square(pred - target)), 1.0 / static_cast<double>(S));
  const ad::Tensor quad = div(sq, scale(square(sigma), 2.0));
  return add_scalar(neg(scale(log(sigma), n) + quad), -0.5 * n * std::log(2.0 * std::numbers::pi));
}

ad::Tensor sigma_node(const ad::Tensor& params, const ObjectiveSpec& spec) {
  if (spec.sigma_mode == NoiseMode::fixed) return ad::Tensor::scalar(spec.fixed_sigma);
  return softplus(slice(params, params.rows() - 1, 0, 1, 1));
}

namespace {

void check_params(const ad::Tensor& params, Index expected, const char* op) {
  if (params.cols() != 1 || params.rows() != expected)
    throw ShapeError(op, params.shape_string(), std::to_string(expected) + "x1");
}

double batch_scale(Index batch, Index dataset_size) {
  if (dataset_size < 1) throw PreconditionError("dataset_size must be positive");
  return static_cast<double>(batch) / static_cast<double>(dataset_size);
}

ObjectiveTerms combine(ad::Tensor kl, ad::Tensor ll, double s) {
  ObjectiveTerms t{scale(kl, s) - ll, kl, ll, s};
  return t;
}

ObjectiveTerms elbo_hyvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                         const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise, Space space) {
  const Method m = space == Space::parameter ? Method::nn_hyvi : Method::funn_hyvi;
  check_params(params, spec.num_variational_params(m), "elbo_hyvi");
  const ad::Tensor lambda = slice(params, 0, 0, spec.hypernet.num_params(), 1);
  const ad::Tensor sigma = sigma_node(params, spec);
  const ad::Tensor theta_ll = hypernet_forward(spec.hypernet, lambda, noise.eps_ll);
  const ad::Tensor theta_kl = hypernet_forward(spec.hypernet, lambda, noise.eps_kl);
  ad::Tensor kl;
  if (space == Space::parameter) {
    kl = knn::kl_knn(theta_kl, ad::Tensor(noise.prior), spec.k);
  } else {
    const ad::Tensor fq = mlp_forward(spec.arch, theta_kl, noise.inputs);
    const ad::Tensor fp(predict_batch(spec.arch, noise.prior, noise.inputs));
    kl = knn::kl_knn(fq, fp, spec.k);
  }
  const ad::Tensor ll = expected_log_lik(spec.arch, theta_ll, X, y, sigma);
  return combine(kl, ll, batch_scale(X.rows(), dataset_size));
}

}  // namespace

ObjectiveTerms elbo_nn_hyvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise) {
  return elbo_hyvi(params, spec, X, y, dataset_size, noise, Space::parameter);
}

ObjectiveTerms elbo_funn_hyvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise) {
  return elbo_hyvi(params, spec, X, y, dataset_size, noise, Space::predictor);
}

ObjectiveTerms elbo_mfvi(const ad::Tensor& params, const ObjectiveSpec& spec, const Eigen::MatrixXd& X,
                         const Eigen::VectorXd& y, Index dataset_size, const StepNoise& noise, Space space) {
  const Method m = space == Space::parameter ? Method::mfvi : Method::funn_mfvi;
  check_params(params, spec.num_variational_params(m), "elbo_mfvi");
  const Index d = spec.arch.num_params();
  const ad::Tensor mu = transpose(slice(params, 0, 0, d, 1));
  const ad::Tensor sd = softplus(transpose(slice(params, d, 0, d, 1)));
  const ad::Tensor sigma = sigma_node(params, spec);
  auto draw = [&](const Eigen::MatrixXd& eps) {
    const ad::Tensor spread = add_row(ad::Tensor(Eigen::MatrixXd::Zero(eps.rows(), d)), sd);
    return add_row(mul(ad::Tensor(eps), spread), mu);
  };
  const ad::Tensor theta_ll = draw(noise.eps_ll);
  const ad::Tensor theta_kl = draw(noise.eps_kl);
  ad::Tensor kl;
  if (space == Space::parameter) {
    // mean_s [ln q(theta_s) - ln p(theta_s)]; the 2*pi terms cancel.
    const double S = static_cast<double>(noise.eps_kl.rows());
    const double vp = spec.prior_variance;
    const double constant = -0.5 * noise.eps_kl.squaredNorm() / S + 0.5 * static_cast<double>(d) * std::log(vp);
    kl = add_scalar(scale(sum(square(theta_kl)), 1.0 / (2.0 * vp * S)) - sum(log(sd)), constant);
  } else {
    const ad::Tensor fq = mlp_forward(spec.arch, theta_kl, noise.inputs);
    const ad::Tensor fp(predict_batch(spec.arch, noise.prior, noise.inputs));
    kl = knn::kl_knn(fq, fp, spec.k);
  }
  const ad::Tensor ll = expected_log_lik(spec.arch, theta_ll, X, y, sigma);
  return combine(kl, ll, batch_scale(X.rows(), dataset_size));
}

ObjectiveTerms evaluate_objective(Method m, const ad::Tensor& params, const ObjectiveSpec& spec,
                                  const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Index dataset_size,
                                  const StepNoise& noise) {
  switch (m) {
    case Method::nn_hyvi: return elbo_nn_hyvi(params, spec, X, y, dataset_size, noise);
    case Method::funn_hyvi: return elbo_funn_hyvi(params, spec, X, y, dataset_size, noise);
    case Method::mfvi: return elbo_mfvi(params, spec, X, y, dataset_size, noise, Space::parameter);
    case Method::funn_mfvi: return elbo_mfvi(params, spec, X, y, dataset_size, noise, Space::predictor);
  }
  throw PreconditionError("unknown method");
}

void TrainingTrace::write_csv(const std::filesystem::path& path, const std::string& comment) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "epoch,objective,kl_term,ll_term,lr,sigma_l\n" << std::setprecision(17);
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.objective << ',' << e.kl_term << ',' << e.ll_term << ',' << e.lr << ','
        << e.sigma_l << '\n';
}

namespace {

double current_sigma(const ParamVector& params, const ObjectiveSpec& spec) {
  return spec.sigma_mode == NoiseMode::learned ? ad::softplus(params(params.size() - 1)) : spec.fixed_sigma;
}

}  // namespace

TrainResult train(Method m, const Dataset& data, const TrainConfig& config, const InputDistribution* nu) {
  config.validate();
  if (data.size() < 1) throw PreconditionError("train: empty dataset");
  if (data.dim() != config.arch.input_dim)
    throw ShapeError("train", "data dim " + std::to_string(data.dim()),
                     "arch input_dim " + std::to_string(config.arch.input_dim));
  const bool predictor = m == Method::funn_hyvi || m == Method::funn_mfvi;
  if (predictor && !nu) throw PreconditionError(to_string(m) + " needs an input distribution");
  if (predictor && nu->dim() != data.dim()) throw ShapeError("train", "nu dim", "data dim");

  const ObjectiveSpec spec = make_objective_spec(config);
  const Index d = spec.arch.num_params();
  Rng rng(config.seed);

  ParamVector params(spec.num_variational_params(m));
  if (is_mean_field(m)) {
    params.head(d) = init_params(spec.arch, rng);
    params.segment(d, d).setConstant(LikelihoodNoise::from_sigma(config.mf_init_sigma, NoiseMode::fixed).raw);
  } else {
    const HyperNet h = HyperNet::initialize(d, config.prior_variance, rng, config.noise_dim, config.hypernet_widths);
    params.head(h.lambda.size()) = h.lambda;
  }
  if (config.sigma_mode == NoiseMode::learned)
    params(params.size() - 1) = LikelihoodNoise::from_sigma(config.sigma, NoiseMode::learned).raw;

  Adam adam(params.size());
  PlateauScheduler scheduler(config.lr_init, config.lr_factor, config.effective_patience(m), config.plateau_threshold);
  TrainingTrace trace;
  const Index N = data.size();

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = shuffled_indices(N, rng);
    double obj_sum = 0.0, kl_sum = 0.0, ll_sum = 0.0;
    int steps = 0;
    for (Index start = 0; start < N; start += config.batch_size) {
      const Index nb = std::min(config.batch_size, N - start);
      Eigen::MatrixXd X(nb, data.dim());
      Eigen::VectorXd y(nb);
      for (Index i = 0; i < nb; ++i) {
        X.row(i) = data.X.row(order[static_cast<std::size_t>(start + i)]);
        y(i) = data.y(order[static_cast<std::size_t>(start + i)]);
      }
      const StepNoise noise = draw_step_noise(m, spec, config, nu, rng);
      const ad::Tensor leaf = ad::Tensor::variable(params);
      const ObjectiveTerms terms = evaluate_objective(m, leaf, spec, X, y, N, noise);
      const double value = terms.total.item();
      if (!std::isfinite(value)) {
        trace.epochs.push_back({epoch, value, terms.scale * terms.kl.item(), terms.ll.item(), scheduler.lr(),
                                current_sigma(params, spec)});
        throw TrainingAborted(to_string(m) + ": non-finite objective at epoch " + std::to_string(epoch),
                              std::move(trace));
      }
      backward(terms.total);
      adam.step(params, leaf.grad(), scheduler.lr());
      if (!params.allFinite()) {
        trace.epochs.push_back({epoch, std::nan(""), terms.scale * terms.kl.item(), terms.ll.item(), scheduler.lr(),
                                std::nan("")});
        throw TrainingAborted(to_string(m) + ": non-finite parameters at epoch " + std::to_string(epoch),
                              std::move(trace));
      }
      obj_sum += value;
      kl_sum += terms.scale * terms.kl.item();
      ll_sum += terms.ll.item();
      ++steps;
    }
    const double inv = 1.0 / steps;
    trace.epochs.push_back(
        {epoch, obj_sum * inv, kl_sum * inv, ll_sum * inv, scheduler.lr(), current_sigma(params, spec)});
    scheduler.update(obj_sum * inv);
    if (scheduler.lr() < config.lr_min) break;
  }

  const double sigma = current_sigma(params, spec);
  if (is_mean_field(m)) {
    MeanFieldParams mf{params.head(d), params.segment(d, d)};
    return {Posterior::from_meanfield(spec.arch, std::move(mf), sigma), std::move(trace), params};
  }
  HyperNet h{spec.hypernet, params.head(spec.hypernet.num_params())};
  return {Posterior::from_hypernet(spec.arch, std::move(h), sigma), std::move(trace), params};
}

}  // namespace hyvi
