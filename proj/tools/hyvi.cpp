// hyvi: data | train | eval | reproduce.
//
// Exit codes: 0 success, 1 other failure, 2 dataset error, 3 training aborted on a
// non-finite objective, 4 posterior/dataset architecture mismatch, 5 usage error.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hyvi/experiment.hpp"
#include "hyvi/runtime.hpp"
#include "reproduce.hpp"

namespace {

using namespace hyvi;
using namespace hyvi::cli;

// Flags shared by the subcommands; each one, when given, wins over the config file.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string dataset;
  std::string target;
  std::string out;
  std::string sigma_mode;
  std::optional<double> sigma;
  std::optional<Index> ood_samples;

  void attach(CLI::App& app, bool with_method, bool with_dataset) {
    app.add_option("--config", config, "JSON experiment config");
    app.add_option("--seed", seed, "run seed (replaces the config's seed list)");
    if (with_method) app.add_option("--method", method, "nn-hyvi|funn-hyvi|mfvi|funn-mfvi|hmc|ensemble|mc-dropout");
    if (with_dataset) {
      app.add_option("--dataset", dataset, "wave, a known dataset name, or a CSV path");
      app.add_option("--target", target, "target column for CSV paths");
    }
    app.add_option("--out", out, "output directory (or file for `data`)");
    app.add_option("--sigma-mode", sigma_mode, "fixed|learned");
    app.add_option("--sigma", sigma, "likelihood noise (initial value when learned)");
    app.add_option("--ood-samples", ood_samples, "number of nu samples for the OOD group");
  }

  // Config document: the file, then the flags.
  Json document() const {
    Json doc = Json::object();
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw UsageError("cannot open config '" + config + "'");
      try {
        doc = Json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config '" + config + "' is not valid JSON: " + e.what());
      }
      if (!doc.is_object()) throw UsageError("config '" + config + "' must hold a JSON object");
    }
    if (!method.empty()) doc["method"] = method;
    if (!dataset.empty()) {
      Json d = doc.contains("dataset") && doc["dataset"].is_object() ? doc["dataset"] : Json::object();
      const std::filesystem::path p(dataset);
      if (p.extension() == ".csv") {
        d["name"] = p.stem().string();
        d["path"] = dataset;
      } else {
        d["name"] = dataset;
        d.erase("path");
      }
      doc["dataset"] = d;
    }
    if (!target.empty()) {
      if (!doc.contains("dataset") || doc["dataset"].is_string())
        doc["dataset"] = Json{{"name", doc.value("dataset", Json("wave"))}};
      doc["dataset"]["target"] = target;
    }
    if (!sigma_mode.empty()) doc["sigma"]["mode"] = sigma_mode;
    if (sigma) doc["sigma"]["value"] = *sigma;
    if (ood_samples) doc["eval"]["ood_samples"] = *ood_samples;
    if (seed) doc["seeds"] = Json::array({*seed});
    if (!out.empty()) doc["out"] = out;
    return doc;
  }
};

std::string bounds(const InputDistribution& nu) {
  std::ostringstream s;
  for (Index j = 0; j < nu.dim(); ++j) s << (j ? " " : "") << '[' << nu.lower(j) << ", " << nu.upper(j) << ']';
  return s.str();
}

int cmd_data(const CommonFlags& flags, bool fetch) {
  const ExperimentConfig config = parse_config(flags.document());
  if (fetch) {
    if (config.dataset.name == "wave") throw UsageError("wave is generated, not fetched");
    const std::string cmd = std::string("python3 \"") + HYVI_TOOLS_DIR + "/fetch_uci.py\" \"" + config.dataset.name +
                            "\" --dest \"" + data_dir().string() + "\"";
    if (std::system(cmd.c_str()) != 0) throw DataError("fetching '" + config.dataset.name + "' failed");
  }
  const std::uint64_t seed = config.seeds.front();
  DatasetSpec spec = config.dataset;
  if (spec.name == "wave" && spec.path.empty() && flags.seed) spec.seed = *flags.seed;
  const PreparedData data = prepare_data(spec, seed);
  std::cout << "dataset " << data.name << ": D=" << data.full.dim() << " N=" << data.full.size()
            << " train=" << data.train.size() << " test=" << data.test.size() << '\n';
  if (data.nu) std::cout << "nu bounds " << bounds(*data.nu) << '\n';
  if (!flags.out.empty()) {
    const std::filesystem::path path(flags.out);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_csv(path, destandardize(data.full), "y");
    std::cout << "wrote " << path.string() << '\n';
  }
  return kExitOk;
}

int cmd_train(const CommonFlags& flags) {
  const ExperimentConfig config = parse_config(flags.document());
  for (std::uint64_t seed : config.seeds) {
    const std::filesystem::path dir = config.seeds.size() == 1 ? std::filesystem::path(config.out)
                                                                : std::filesystem::path(config.out) /
                                                                      ("seed_" + std::to_string(seed));
    const PreparedData data = prepare_data(config.dataset, seed);
    try {
      const RunResult run = run_method(config, data, seed);
      const PosteriorFiles files = save_run(dir, run, config, data, seed);
      std::cout << to_string(config.method) << " seed " << seed << ": " << files.bin.string() << " ("
                << run.runtime_s << " s)\n";
    } catch (const TrainingAborted& e) {
      std::filesystem::create_directories(dir);
      const auto trace = dir / "trace_aborted.csv";
      e.trace().write_csv(trace, config.provenance(seed));
      std::cerr << "hyvi: training aborted: " << e.what() << "\ntrace: " << trace.string() << '\n';
      return kExitNaN;
    }
  }
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::vector<std::string>& posteriors, const std::string& metric_list,
             bool with_kl) {
  if (posteriors.empty()) throw UsageError("eval needs at least one --posterior");
  if (with_kl && posteriors.size() != 2) throw UsageError("cross-model KL needs exactly two posteriors");
  const MetricSet metrics = MetricSet::parse(metric_list);

  std::vector<std::pair<std::string, Posterior>> loaded;
  Json first_side;
  for (const auto& p : posteriors) {
    Json side;
    Posterior post = load_posterior(p, &side);
    if (loaded.empty()) first_side = side;
    loaded.emplace_back(side.value("method", to_string(post.kind())), std::move(post));
  }
  // The dataset comes from the flags/config when given, else from the first posterior's run.
  const bool own_data = !flags.config.empty() || !flags.dataset.empty();
  Json doc = flags.document();
  if (!own_data) {
    Json from_run = first_side.at("config");
    from_run.merge_patch(doc);
    doc = from_run;
  }
  ExperimentConfig config = parse_config(doc);
  const std::uint64_t seed = flags.seed ? *flags.seed : first_side.value("seed", config.seeds.front());
  if (flags.out.empty() && !doc.contains("out")) config.out = "eval";
  const PreparedData data = prepare_data(config.dataset, seed);

  std::vector<MetricReport> reports;
  std::vector<BandPanel> panels;
  for (const auto& [label, post] : loaded) {
    check_arch(post, data.train);
    reports.push_back(evaluate(post, config, data, seed, label, 0.0, metrics));
    if (data.train.dim() == 1)
      panels.push_back(
          predictive_band(label, post, band_grid(data), data.train, config.eval.n_samples, derive_seed(seed, 26)));
  }
  const std::string comment = config.provenance(seed);
  emit_report(reports, config.out, comment, panels);
  if (with_kl) {
    knn::EvalDesign design;
    design.T = config.eval.T;
    design.n_draws = config.eval.n_draws;
    std::vector<KlRecord> kl;
    const std::uint64_t s = derive_seed(seed, 30);
    for (int dir = 0; dir < 2; ++dir) {
      const auto& [from, p] = dir == 0 ? loaded[0] : loaded[1];
      const auto& [to, q] = dir == 0 ? loaded[1] : loaded[0];
      kl.push_back({"parameter", data.name, from, to, seed,
                    cross_model_kl(p, q, Space::parameter, design, config.eval.n_samples, s)});
      if (data.nu) {
        design.nu = *data.nu;
        kl.push_back({"predictor", data.name, from, to, seed,
                      cross_model_kl(p, q, Space::predictor, design, config.eval.n_samples, s)});
      }
    }
    emit_kl_table(kl, config.out, comment);
  }
  for (const auto& r : reports)
    std::cout << r.method << ": rmse=" << r.rmse << " lpp=" << r.lpp << " entropy_param=" << r.entropy_param.value
              << " entropy_pred=" << r.entropy_pred.value << '\n';
  std::cout << "report written to " << config.out << '\n';
  return kExitOk;
}

int cmd_reproduce(const CommonFlags& flags, const std::string& which) {
  if (!flags.method.empty() || !flags.dataset.empty())
    throw UsageError("reproduce does not take --method or --dataset");
  Json doc = flags.document();
  const std::filesystem::path out = doc.contains("out") ? doc["out"].get<std::string>() : "runs/" + which;
  doc.erase("out");
  std::optional<std::uint64_t> seed = flags.seed;
  if (seed) doc.erase("seeds");
  return reproduce(which, doc, seed, out);
}

}  // namespace

int main(int argc, char** argv) {
  hyvi::tune_allocator();
  CLI::App app{"Implicit variational inference for Bayesian neural regression"};
  app.require_subcommand(1);

  CommonFlags data_flags, train_flags, eval_flags, repro_flags;
  bool fetch = false, with_kl = false;
  std::vector<std::string> posteriors;
  std::string metric_list = "all", which;

  auto* data = app.add_subcommand("data", "generate wave data or validate/fetch a CSV dataset");
  data_flags.attach(*data, false, true);
  data->add_flag("--fetch", fetch, "download the dataset into $HYVI_DATA_DIR first");

  auto* train = app.add_subcommand("train", "train one method; writes posterior.bin, posterior.json, trace");
  train_flags.attach(*train, true, true);

  auto* eval = app.add_subcommand("eval", "metrics for one or more posterior files");
  eval_flags.attach(*eval, false, true);
  eval->add_option("--posterior", posteriors, "posterior .bin file (repeatable)");
  eval->add_option("--metrics", metric_list, "all, or a list of rmse,lpp,entropy_param,entropy_pred,epistemic");
  eval->add_flag("--kl", with_kl, "cross-model KL between exactly two posteriors");

  auto* repro = app.add_subcommand("reproduce", "run a scaled-down experiment pipeline");
  repro_flags.attach(*repro, true, true);
  repro->add_option("pipeline", which, "wave | exp1-small | exp2-small")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitUsage;
  }

  try {
    if (data->parsed()) return cmd_data(data_flags, fetch);
    if (train->parsed()) return cmd_train(train_flags);
    if (eval->parsed()) return cmd_eval(eval_flags, posteriors, metric_list, with_kl);
    if (repro->parsed()) return cmd_reproduce(repro_flags, which);
  } catch (const cli::UsageError& e) {
    std::cerr << "hyvi: " << e.what() << '\n';
    return cli::kExitUsage;
  } catch (const cli::DataError& e) {
    std::cerr << "hyvi: " << e.what() << '\n';
    return cli::kExitData;
  } catch (const cli::ArchMismatch& e) {
    std::cerr << "hyvi: " << e.what() << '\n';
    return cli::kExitArchMismatch;
  } catch (const hyvi::TrainingAborted& e) {
    std::cerr << "hyvi: training aborted: " << e.what() << '\n';
    return cli::kExitNaN;
  } catch (const hyvi::PreconditionError& e) {
    std::cerr << "hyvi: " << e.what() << '\n';
    return cli::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "hyvi: " << e.what() << '\n';
    return cli::kExitFailure;
  }
  return cli::kExitUsage;
}
