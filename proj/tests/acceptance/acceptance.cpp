// Acceptance checks: one PASS/FAIL line per criterion, exit status 0 only when all pass.
//
// Usage: hyvi_acceptance [--work DIR] [--only N[,N...]]

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hyvi/baselines.hpp"
#include "hyvi/experiment.hpp"
#include "hyvi/inference.hpp"
#include "hyvi/knn.hpp"
#include "hyvi/runtime.hpp"

using namespace hyvi;
using namespace hyvi::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. kNN estimators against closed forms.
Outcome estimators() {
  const auto t0 = std::chrono::steady_clock::now();
  double kl_sum = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(derive_seed(100, s));
    const Eigen::MatrixXd q = standard_normal(rng, 2000, 2);
    Eigen::MatrixXd p = standard_normal(rng, 2000, 2);
    p.col(0).array() += 1.0;
    kl_sum += knn::kl_knn(q, p, 1);
  }
  const double kl = kl_sum / 50;
  Rng rng(200);
  const double h = knn::entropy_knn(standard_normal(rng, 4000, 5), 1);
  const double h_true = 2.5 * std::log(2 * std::numbers::pi * std::numbers::e);
  const double t = seconds_since(t0);
  return {std::abs(kl - 0.5) <= 0.07 && std::abs(h - h_true) <= 0.1 && t < 60,
          fmt("mean KL %.4f (target 0.5 +-0.07), entropy %.4f (target %.4f +-0.1), %.1f s", kl, h, h_true, t)};
}

// 2. Sign-flip symmetry of tanh hidden units.
Outcome symmetry() {
  const PredictorArch arch{1, {6}, Activation::tanh, 1};
  const Index d = arch.num_params();
  Rng rng(300);
  const ParamBatch f = (0.3 * standard_normal(rng, 300, d)).array() + 0.8;
  const ParamBatch g = (0.3 * standard_normal(rng, 300, d)).array() + 0.8;
  ParamBatch flipped = f;
  for (Index i = 0; i < flipped.rows(); ++i) {
    auto layers = unflatten(arch, flipped.row(i).transpose());
    for (Index unit = 0; unit < 6; unit += 2) {
      layers[0].W.row(unit) *= -1.0;
      layers[0].b(unit) *= -1.0;
      layers[1].W.col(unit) *= -1.0;
    }
    flipped.row(i) = flatten(arch, layers).transpose();
  }
  const double param_change = std::abs(knn::kl_knn(flipped, g, 1) - knn::kl_knn(f, g, 1));
  knn::EvalDesign design;
  design.T = 50;
  design.n_draws = 5;
  design.nu = wave_ood();
  const auto gc = knn::predictor_cloud(arch, g);
  const double fun_change = std::abs(knn::functional_kl(knn::predictor_cloud(arch, flipped), gc, design, 1, 7).value -
                                     knn::functional_kl(knn::predictor_cloud(arch, f), gc, design, 1, 7).value);
  return {param_change > 1.0 && fun_change < 1e-9,
          fmt("parameter KL change %.3f (> 1.0), functional KL change %.2e (< 1e-9)", param_change, fun_change)};
}

// 3. Finite-difference checks of the four training objectives.
Outcome gradients() {
  const PredictorArch arch{1, {4}, Activation::tanh, 1};
  Rng data_rng(400);
  const Eigen::MatrixXd X = uniform(data_rng, 9, 1, -1.0, 1.0);
  const Eigen::VectorXd y = standard_normal(data_rng, 9, 1).col(0);
  const InputDistribution nu(Eigen::VectorXd::Constant(1, -2.0), Eigen::VectorXd::Constant(1, 2.0));
  double worst = 0;
  std::string where;
  for (NoiseMode mode : {NoiseMode::fixed, NoiseMode::learned}) {
    TrainConfig c;
    c.arch = arch;
    c.n_ll_samples = 8;
    c.n_kl_samples = 30;
    c.hypernet_widths = {4, 4};
    c.noise_dim = 3;
    c.T = 6;
    c.sigma = 0.3;
    c.sigma_mode = mode;
    const ObjectiveSpec spec = make_objective_spec(c);
    for (Method m : {Method::nn_hyvi, Method::funn_hyvi, Method::mfvi, Method::funn_mfvi}) {
      Rng rng(401);
      const StepNoise noise = draw_step_noise(m, spec, c, &nu, rng);
      Rng init_rng(402);
      ParamVector p(spec.num_variational_params(m));
      if (is_mean_field(m)) {
        p.head(arch.num_params()) = init_params(arch, init_rng);
        p.segment(arch.num_params(), arch.num_params()).setConstant(-2.0);
      } else {
        const HyperNet h = HyperNet::initialize(arch.num_params(), c.prior_variance, init_rng, c.noise_dim,
                                                c.hypernet_widths);
        auto layers = unflatten(spec.hypernet, h.lambda);
        layers.back().W *= 30.0;
        p.head(h.lambda.size()) = flatten(spec.hypernet, layers);
      }
      if (mode == NoiseMode::learned) p(p.size() - 1) = 0.2;
      const auto f = [&](const ad::Tensor& x) { return evaluate_objective(m, x, spec, X, y, 30, noise).total; };
      const double err = ad::finite_difference_check(f, p, 1e-6);
      if (!(err <= worst)) {
        worst = err;
        where = to_string(m) + "/" + to_string(mode);
      }
    }
  }
  return {worst < 1e-3, fmt("predictor with %d parameters, worst relative error %.2e (%s)",
                            static_cast<int>(arch.num_params()), worst, where.c_str())};
}

// 4. HMC against the closed-form posterior of Bayesian linear regression.
Outcome hmc() {
  const auto t0 = std::chrono::steady_clock::now();
  const PredictorArch arch{1, {}, Activation::tanh, 1};
  const double sigma = 0.5, prior_var = 0.5;
  Rng rng(500);
  Dataset data;
  data.X = uniform(rng, 40, 1, -2.0, 2.0);
  data.y = (1.3 * data.X.col(0)).array() - 0.4;
  data.y += sigma * standard_normal(rng, 40, 1).col(0);
  data.norm = NormStats::identity(1);
  Eigen::MatrixXd Phi(40, 2);
  Phi.col(0) = data.X.col(0);
  Phi.col(1).setOnes();
  const Eigen::Matrix2d cov =
      (Phi.transpose() * Phi / (sigma * sigma) + Eigen::Matrix2d::Identity() / prior_var).inverse();
  const Eigen::Vector2d mean = cov * Phi.transpose() * data.y / (sigma * sigma);

  const LogTarget target = make_log_posterior(arch, data, GaussianPrior{prior_var}, sigma);
  HmcConfig cfg;
  cfg.n_iterations = 12000;
  cfg.n_burnin = 2000;
  cfg.seed = 501;
  const Chain chain = hmc_sample(target, ParamVector::Zero(2), cfg);
  const Eigen::RowVector2d m = chain.samples.colwise().mean();
  const Eigen::MatrixXd centred = chain.samples.rowwise() - m;
  const Eigen::Matrix2d c = centred.transpose() * centred / (chain.samples.rows() - 1.0);
  const double mean_err = (m.transpose() - mean).cwiseAbs().maxCoeff();
  double cov_err = 0;
  for (Index i = 0; i < 2; ++i) cov_err = std::max(cov_err, std::abs(c(i, i) / cov(i, i) - 1.0));
  cov_err = std::max(cov_err, std::abs(c(0, 1) - cov(0, 1)) / std::sqrt(cov(0, 0) * cov(1, 1)));

  PhaseState start;
  start.q = Eigen::Vector2d(0.3, -0.2);
  start.p = Eigen::Vector2d(0.7, 1.1);
  start.at_q = target(start.q);
  PhaseState fwd = leapfrog(target, start, 0.01, 50);
  fwd.p = -fwd.p;
  const PhaseState back = leapfrog(target, fwd, 0.01, 50);
  const double rev = std::max((back.q - start.q).cwiseAbs().maxCoeff(), (back.p + start.p).cwiseAbs().maxCoeff());
  const double t = seconds_since(t0);
  return {chain.samples.rows() == 10000 && mean_err <= 0.05 && cov_err <= 0.1 && rev < 1e-8 && t < 120,
          fmt("%d retained, mean error %.4f (<= 0.05), covariance error %.3f (<= 0.1), reversibility %.1e, %.1f s",
              static_cast<int>(chain.samples.rows()), mean_err, cov_err, rev, t)};
}

// Per-seed results of the wave runs shared by criteria 5, 6 and 8.
struct WaveRun {
  double epi_train = NAN, epi_ood = NAN;
  double entropy_param = NAN, entropy_pred = NAN;
  double rmse = NAN;
  double runtime_s = 0;
};

const std::vector<std::uint64_t> kWaveSeeds{0, 1, 2, 3, 4};

WaveRun wave_run(MethodId method, std::uint64_t seed, bool full_metrics) {
  ExperimentConfig config = parse_config(Json{{"method", to_string(method)}});
  const PreparedData data = prepare_data(config.dataset, seed);
  const RunResult run = run_method(config, data, seed);
  WaveRun out;
  out.runtime_s = run.runtime_s;
  const EvalSettings& ev = config.eval;
  // OOD inputs: nu samples in the gap between the patches or outside [-1, 1].
  const Eigen::MatrixXd nu_x = sample_inputs(*data.nu, ev.ood_samples, derive_seed(seed, 25));
  std::vector<Index> keep;
  for (Index i = 0; i < nu_x.rows(); ++i)
    if (std::abs(nu_x(i, 0)) < 0.5 || std::abs(nu_x(i, 0)) > 1.0) keep.push_back(i);
  const Eigen::MatrixXd ood_x = nu_x(keep, Eigen::all);
  const auto med = [&](const Eigen::MatrixXd& X) {
    std::vector<double> v;
    for (const auto& e : epistemic_profile(run.posterior, X, ev.n_samples, ev.k, derive_seed(seed, 24)))
      v.push_back(e.value);
    return median(v);
  };
  out.epi_train = med(data.train.X);
  out.epi_ood = med(ood_x);
  if (full_metrics) {
    MetricSet metrics = MetricSet::parse("rmse,entropy_param,entropy_pred");
    const MetricReport r = evaluate(run.posterior, config, data, seed, to_string(method), run.runtime_s, metrics);
    out.rmse = r.rmse;
    out.entropy_param = r.entropy_param.value;
    out.entropy_pred = r.entropy_pred.value;
  }
  std::cout << "  " << to_string(method) << " seed " << seed << ": train " << run.runtime_s << " s, epistemic train "
            << out.epi_train << " ood " << out.epi_ood;
  if (full_metrics)
    std::cout << ", rmse " << out.rmse << ", entropy_param " << out.entropy_param << ", entropy_pred "
              << out.entropy_pred;
  std::cout << std::endl;
  return out;
}

struct WaveResults {
  std::vector<WaveRun> funn, nn, mfvi;
  std::vector<double> ensemble_rmse;
  double funn_mfvi_seconds = 0;
};

WaveResults& wave_results() {
  static WaveResults r = [] {
    WaveResults w;
    for (std::uint64_t s : kWaveSeeds) {
      w.funn.push_back(wave_run(MethodId::funn_hyvi, s, true));
      w.mfvi.push_back(wave_run(MethodId::mfvi, s, false));
      w.nn.push_back(wave_run(MethodId::nn_hyvi, s, true));
      w.funn_mfvi_seconds += w.funn.back().runtime_s + w.mfvi.back().runtime_s;
    }
    for (std::uint64_t s : kWaveSeeds) {
      ExperimentConfig config = parse_config(Json{{"method", "ensemble"}});
      const PreparedData data = prepare_data(config.dataset, s);
      const RunResult run = run_method(config, data, s);
      w.ensemble_rmse.push_back(rmse(run.posterior, data.test, config.eval.n_samples, derive_seed(s, 21)));
      std::cout << "  ensemble seed " << s << ": rmse " << w.ensemble_rmse.back() << std::endl;
    }
    return w;
  }();
  return r;
}

// 5. Epistemic uncertainty grows away from the data for FuNN-HyVI but not for MFVI.
Outcome wave_ood_ratio() {
  const WaveResults& w = wave_results();
  const auto diff = [](const std::vector<WaveRun>& runs) {
    std::vector<double> d;
    for (const auto& r : runs) d.push_back(r.epi_ood - r.epi_train);
    return median(d);
  };
  const double funn = diff(w.funn), mf = diff(w.mfvi), threshold = std::log(2.0);
  const double minutes = w.funn_mfvi_seconds / 60;
  return {funn >= threshold && mf < threshold && minutes < 15,
          fmt("median entropy gap OOD - train: funn-hyvi %.3f (>= ln 2 = %.3f), mfvi %.3f (< ln 2), training %.1f min",
              funn, threshold, mf, minutes)};
}

// 6. Entropy ordering between NN-HyVI and FuNN-HyVI.
Outcome entropy_ordering() {
  const WaveResults& w = wave_results();
  int pred = 0, param = 0;
  for (std::size_t i = 0; i < kWaveSeeds.size(); ++i) {
    pred += w.funn[i].entropy_pred > w.nn[i].entropy_pred;
    param += w.nn[i].entropy_param > w.funn[i].entropy_param;
  }
  return {pred >= 4 && param >= 4,
          fmt("entropy_pred funn > nn in %d/5 seeds, entropy_param nn > funn in %d/5 seeds (need >= 4 each)", pred,
              param)};
}

// 8. In-distribution test RMSE on wave.
Outcome wave_rmse() {
  const WaveResults& w = wave_results();
  double worst = 0;
  for (std::size_t i = 0; i < kWaveSeeds.size(); ++i)
    worst = std::max({worst, w.funn[i].rmse, w.nn[i].rmse, w.ensemble_rmse[i]});
  std::vector<double> f, n;
  for (std::size_t i = 0; i < kWaveSeeds.size(); ++i) {
    f.push_back(w.funn[i].rmse);
    n.push_back(w.nn[i].rmse);
  }
  return {worst < 0.2, fmt("worst test RMSE over 5 seeds %.4f (< 0.2); medians funn-hyvi %.4f, nn-hyvi %.4f, ensemble %.4f",
                           worst, median(f), median(n), median(w.ensemble_rmse))};
}

// 7. Separation of OOD and train epistemic uncertainty on a concrete subsample.
Outcome concrete_separation() {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig base = parse_config(Json{{"dataset", {{"name", "concrete"}, {"subsample", 200}}}});
  PreparedData data;
  try {
    data = prepare_data(base.dataset, 0);
  } catch (const DataError& e) {
    return {false, std::string("concrete data unavailable: ") + e.what()};
  }
  const auto iqr = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto q = [&](double p) {
      const double pos = p * static_cast<double>(v.size() - 1);
      const std::size_t lo = static_cast<std::size_t>(pos);
      const std::size_t hi = std::min(lo + 1, v.size() - 1);
      return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    return std::pair{q(0.25), q(0.75)};
  };
  const auto separated = [&](MethodId m, std::string& note) {
    ExperimentConfig config = base;
    config.method = m;
    const RunResult run = run_method(config, data, 0);
    const MetricReport r = evaluate(run.posterior, config, data, 0, to_string(m), run.runtime_s,
                                    MetricSet::parse("epistemic"));
    std::vector<double> train, ood;
    for (const auto& g : r.epistemic) {
      if (g.name == "train") train = g.values;
      if (g.name == "ood") ood = g.values;
    }
    const auto [t25, t75] = iqr(train);
    const auto [o25, o75] = iqr(ood);
    note += fmt(" %s train IQR [%.3f, %.3f] ood IQR [%.3f, %.3f];", to_string(m).c_str(), t25, t75, o25, o75);
    return o25 > t75 || t25 > o75;
  };
  std::string note;
  const bool funn = separated(MethodId::funn_hyvi, note);
  const bool mf = separated(MethodId::mfvi, note);
  const double t = seconds_since(t0);
  return {funn && !mf && t < 20 * 60, note + fmt(" %.1f min", t / 60)};
}

std::string bytes_of(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// 9. Posterior files are bit-identical across two runs of the same (config, seed).
Outcome determinism(const std::filesystem::path& work) {
  const Json budget{{"train", {{"max_epochs", 15}}},
                    {"hmc", {{"n_iterations", 600}, {"n_burnin", 200}, {"n_leapfrog", 10}}},
                    {"ensemble", {{"n_models", 3}, {"epochs", 50}}},
                    {"dropout", {{"epochs", 50}}}};
  std::string detail;
  bool ok = true;
  for (MethodId m : all_methods()) {
    ExperimentConfig config = parse_config(budget);
    config.method = m;
    const std::uint64_t seed = 9;
    const PreparedData data = prepare_data(config.dataset, seed);
    std::vector<PosteriorFiles> files;
    for (const char* run_name : {"a", "b"}) {
      const auto dir = work / "determinism" / to_string(m) / run_name;
      std::filesystem::remove_all(dir);
      files.push_back(save_run(dir, run_method(config, data, seed), config, data, seed));
    }
    bool same = bytes_of(files[0].bin) == bytes_of(files[1].bin);
    if (files[0].trace) same = same && bytes_of(*files[0].trace) == bytes_of(*files[1].trace);
    // The sidecar records wall-clock runtime; every other field must match.
    Json s0 = Json::parse(bytes_of(files[0].sidecar)), s1 = Json::parse(bytes_of(files[1].sidecar));
    s0.erase("runtime_s");
    s1.erase("runtime_s");
    same = same && s0 == s1;
    ok = ok && same;
    detail += " " + to_string(m) + (same ? " identical;" : " DIFFERS;");
  }
  return {ok, detail.substr(1)};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  std::filesystem::path work = std::filesystem::temp_directory_path() / "hyvi_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string item; std::getline(list, item, ',');) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: hyvi_acceptance [--work DIR] [--only N[,N...]]\n";
      return 2;
    }
  }
  std::filesystem::create_directories(work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, estimators},
      {2, symmetry},
      {3, gradients},
      {4, hmc},
      {5, wave_ood_ratio},
      {6, entropy_ordering},
      {7, concrete_separation},
      {8, wave_rmse},
      {9, [&] { return determinism(work); }},
  };
  int failed = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " ["
              << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
