#include "reproduce.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace hyvi::cli {

namespace {

std::filesystem::path fixture_dir() {
  const char* env = std::getenv("HYVI_FIXTURE_DIR");
  if (env && *env) return env;
#ifdef HYVI_FIXTURE_DIR
  return HYVI_FIXTURE_DIR;
#else
  return "data/fixtures";
#endif
}

struct Plan {
  std::vector<DatasetSpec> datasets;
  std::vector<MethodId> methods;
};

// Full CSV files are subsampled to 200 rows; without them the committed 20-row fixtures are used.
std::vector<DatasetSpec> uci_datasets() {
  std::vector<DatasetSpec> out;
  for (const char* name : {"boston", "concrete"}) {
    DatasetSpec d;
    d.name = name;
    if (std::filesystem::exists(data_dir() / (std::string(name) + ".csv"))) {
      d.subsample = 200;
      out.push_back(d);
    } else if (std::filesystem::exists(fixture_dir() / (std::string(name) + ".csv"))) {
      d.path = (fixture_dir() / (std::string(name) + ".csv")).string();
      std::cerr << "reproduce: " << name << ".csv not in " << data_dir() << ", using the 20-row fixture\n";
      out.push_back(d);
    } else {
      std::cerr << "reproduce: skipping " << name << ": no data in " << data_dir() << " and no fixture\n";
    }
  }
  return out;
}

Plan plan_for(const std::string& which) {
  if (which == "wave") return {{DatasetSpec{}}, all_methods()};
  if (which == "exp1-small") return {uci_datasets(), {MethodId::nn_hyvi, MethodId::funn_hyvi, MethodId::hmc}};
  if (which == "exp2-small")
    return {uci_datasets(),
            {MethodId::mc_dropout, MethodId::ensemble, MethodId::mfvi, MethodId::funn_mfvi, MethodId::nn_hyvi,
             MethodId::funn_hyvi}};
  throw UsageError("unknown pipeline '" + which + "' (expected wave, exp1-small or exp2-small)");
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? ";" : "") + std::to_string(seeds[i]);
  return s;
}

std::string file_fnv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return hex64(fnv1a(s.str()));
}

// A finished run whose sidecar carries the same config hash and whose posterior file is intact.
std::optional<std::pair<Posterior, double>> reuse(const std::filesystem::path& dir, const ExperimentConfig& config) {
  const auto bin = dir / "posterior.bin";
  if (!std::filesystem::exists(bin) || !std::filesystem::exists(dir / "posterior.json")) return std::nullopt;
  try {
    Json side;
    Posterior post = load_posterior(bin, &side);
    if (side.value("config_hash", "") != config.hash() || side.value("posterior_fnv1a", "") != file_fnv(bin))
      return std::nullopt;
    return std::pair{std::move(post), side.value("runtime_s", 0.0)};
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

Json reproduce_defaults(const std::string& which) {
  if (which == "wave")
    return Json{{"ensemble", {{"n_models", 10}}},
                {"hmc", {{"n_iterations", 20000}, {"n_burnin", 5000}, {"n_leapfrog", 100}}},
                {"seeds", {0}}};
  if (which == "exp1-small")
    return Json{{"train", {{"max_epochs", 300}}},
                {"hmc", {{"n_iterations", 4000}, {"n_burnin", 1000}, {"n_leapfrog", 50}}},
                {"eval", {{"n_draws", 20}}},
                {"seeds", {0}}};
  if (which == "exp2-small")
    return Json{{"sigma", {{"mode", "learned"}}},
                {"train", {{"max_epochs", 300}}},
                {"ensemble", {{"epochs", 500}}},
                {"dropout", {{"epochs", 500}}},
                {"eval", {{"n_draws", 20}}},
                {"seeds", {0, 1, 2}}};
  throw UsageError("unknown pipeline '" + which + "' (expected wave, exp1-small or exp2-small)");
}

int reproduce(const std::string& which, const Json& overrides, const std::optional<std::uint64_t>& seed_override,
              const std::filesystem::path& out_dir) {
  if (overrides.contains("dataset") || overrides.contains("method"))
    throw UsageError("reproduce chooses datasets and methods itself; drop 'dataset'/'method' from the config");
  ExperimentConfig base = parse_config(reproduce_defaults(which));
  base = parse_config(overrides, base);
  if (seed_override) base.seeds = {*seed_override};
  base.out = out_dir.string();
  const Plan plan = plan_for(which);
  if (plan.datasets.empty()) {
    std::cerr << "reproduce: no dataset available for " << which << '\n';
    return kExitData;
  }

  const std::string comment =
      "pipeline=" + which + " config_hash=" + base.hash() + " seeds=" + join_seeds(base.seeds);
  std::vector<MetricReport> reports;
  std::vector<KlRecord> kl;
  std::vector<BandPanel> panels;
  int status = kExitOk;

  for (const DatasetSpec& spec : plan.datasets) {
    for (std::uint64_t seed : base.seeds) {
      PreparedData data;
      try {
        data = prepare_data(spec, seed);
      } catch (const DataError& e) {
        std::cerr << "reproduce: " << e.what() << '\n';
        status = kExitData;
        continue;
      }
      std::vector<std::pair<std::string, Posterior>> done;
      for (MethodId method : plan.methods) {
        ExperimentConfig config = base;
        config.dataset = spec;
        config.method = method;
        const std::string label = to_string(method);
        const auto dir = out_dir / spec.name / label / ("seed_" + std::to_string(seed));
        try {
          std::optional<Posterior> post;
          double runtime = 0.0;
          if (auto cached = reuse(dir, config)) {
            std::cerr << "reproduce: reusing " << dir.string() << '\n';
            post = std::move(cached->first);
            runtime = cached->second;
          } else {
            std::cerr << "reproduce: training " << label << " on " << spec.name << " seed " << seed << '\n';
            RunResult run = run_method(config, data, seed);
            save_run(dir, run, config, data, seed);
            runtime = run.runtime_s;
            post = std::move(run.posterior);
          }
          reports.push_back(evaluate(*post, config, data, seed, label, runtime));
          if (data.train.dim() == 1 && seed == base.seeds.front())
            panels.push_back(predictive_band(label, *post, band_grid(data), data.train, config.eval.n_samples,
                                             derive_seed(seed, 26)));
          done.emplace_back(label, std::move(*post));
        } catch (const TrainingAborted& e) {
          std::filesystem::create_directories(dir);
          e.trace().write_csv(dir / "trace_aborted.csv", config.provenance(seed));
          std::cerr << "reproduce: " << label << " aborted: " << e.what() << " (trace in "
                    << (dir / "trace_aborted.csv").string() << ")\n";
          status = kExitNaN;
        } catch (const UsageError&) {
          throw;
        } catch (const Error& e) {
          std::cerr << "reproduce: " << label << " failed: " << e.what() << '\n';
          if (status == kExitOk) status = kExitFailure;
        }
      }

      // Cross-model KL: every ordered pair in parameter space, HMC against each model in predictor space.
      knn::EvalDesign design;
      design.T = base.eval.T;
      design.n_draws = base.eval.n_draws;
      if (data.nu) design.nu = *data.nu;
      for (const auto& [a_name, a] : done)
        for (const auto& [b_name, b] : done) {
          if (a_name == b_name) continue;
          const std::uint64_t s = derive_seed(seed, 30);
          kl.push_back({"parameter", spec.name, a_name, b_name, seed,
                        cross_model_kl(a, b, Space::parameter, design, base.eval.n_samples, s)});
          if (data.nu && (a_name == "hmc" || b_name == "hmc"))
            kl.push_back({"predictor", spec.name, a_name, b_name, seed,
                          cross_model_kl(a, b, Space::predictor, design, base.eval.n_samples, s)});
        }
    }
  }

  emit_report(reports, out_dir, comment, panels);
  if (!kl.empty()) emit_kl_table(kl, out_dir, comment);
  std::cout << "report written to " << out_dir.string() << '\n';
  return status;
}

}  // namespace hyvi::cli
