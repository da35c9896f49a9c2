#include "hyvi/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace hyvi::cli {

std::string to_string(MethodId m) {
  switch (m) {
    case MethodId::nn_hyvi: return "nn-hyvi";
    case MethodId::funn_hyvi: return "funn-hyvi";
    case MethodId::mfvi: return "mfvi";
    case MethodId::funn_mfvi: return "funn-mfvi";
    case MethodId::hmc: return "hmc";
    case MethodId::ensemble: return "ensemble";
    case MethodId::mc_dropout: return "mc-dropout";
  }
  return "unknown";
}

const std::vector<MethodId>& all_methods() {
  static const std::vector<MethodId> methods{MethodId::nn_hyvi, MethodId::funn_hyvi, MethodId::mfvi,
                                             MethodId::funn_mfvi, MethodId::hmc,      MethodId::ensemble,
                                             MethodId::mc_dropout};
  return methods;
}

MethodId method_id_from_string(const std::string& s) {
  for (MethodId m : all_methods())
    if (to_string(m) == s) return m;
  throw UsageError("unknown method '" + s +
                   "' (expected nn-hyvi, funn-hyvi, mfvi, funn-mfvi, hmc, ensemble or mc-dropout)");
}

std::optional<Method> variational_method(MethodId m) {
  switch (m) {
    case MethodId::nn_hyvi: return Method::nn_hyvi;
    case MethodId::funn_hyvi: return Method::funn_hyvi;
    case MethodId::mfvi: return Method::mfvi;
    case MethodId::funn_mfvi: return Method::funn_mfvi;
    default: return std::nullopt;
  }
}

bool uses_nu(MethodId m) { return m == MethodId::funn_hyvi || m == MethodId::funn_mfvi; }

const std::vector<KnownDataset>& known_datasets() {
  static const std::vector<KnownDataset> sets{{"boston", "MEDV", 2.5},
                                              {"concrete", "strength", 4.5},
                                              {"energy", "heating_load", 1.4},
                                              {"wine", "quality", 0.5},
                                              {"yacht", "resistance", 1.4}};
  return sets;
}

namespace {

const KnownDataset* find_known(const std::string& name) {
  for (const auto& k : known_datasets())
    if (k.name == name) return &k;
  return nullptr;
}

// ---- JSON reading with strict key checks ---------------------------------------------

void only_keys(const Json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw UsageError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  const std::string name = where.empty() ? key : where + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw UsageError("config: '" + name + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw UsageError("config: '" + name + "' must be an integer");
    if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
      throw UsageError("config: '" + name + "' must be non-negative");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw UsageError("config: '" + name + "' must be a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw UsageError("config: '" + name + "' must be a string");
  }
  try {
    out = v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError("config: '" + name + "' has the wrong type");
  }
}

template <typename T>
void read_optional(const Json& obj, const char* key, std::optional<T>& out, const std::string& where) {
  if (!obj.contains(key)) return;
  if (obj.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(obj, key, v, where);
  out = v;
}

template <typename T>
void read_list(const Json& obj, const char* key, std::vector<T>& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  const std::string name = where.empty() ? key : where + "." + key;
  if (!v.is_array()) throw UsageError("config: '" + name + "' must be an array");
  std::vector<T> values;
  for (const auto& e : v) {
    if constexpr (std::is_integral_v<T>) {
      if (!e.is_number_integer()) throw UsageError("config: '" + name + "' must hold integers");
    } else {
      if (!e.is_number()) throw UsageError("config: '" + name + "' must hold numbers");
    }
    values.push_back(e.get<T>());
  }
  out = std::move(values);
}

void parse_dataset(const Json& j, DatasetSpec& d) {
  if (j.is_string()) {
    d.name = j.get<std::string>();
    return;
  }
  only_keys(j, {"name", "path", "target", "subsample", "train_fraction", "seed", "nu"}, "dataset");
  read(j, "name", d.name, "dataset");
  read(j, "path", d.path, "dataset");
  read(j, "target", d.target, "dataset");
  read_optional(j, "subsample", d.subsample, "dataset");
  read(j, "train_fraction", d.train_fraction, "dataset");
  read(j, "seed", d.seed, "dataset");
  if (j.contains("nu")) {
    const Json& nu = j.at("nu");
    if (nu.is_string()) {
      d.nu = nu.get<std::string>();
      if (d.nu != "auto" && d.nu != "none") throw UsageError("config: 'dataset.nu' must be auto, none or bounds");
    } else {
      only_keys(nu, {"lower", "upper"}, "dataset.nu");
      d.nu = "box";
      read_list(nu, "lower", d.nu_lower, "dataset.nu");
      read_list(nu, "upper", d.nu_upper, "dataset.nu");
      if (d.nu_lower.size() != d.nu_upper.size() || d.nu_lower.empty())
        throw UsageError("config: 'dataset.nu' lower and upper need the same non-zero length");
    }
  }
}

Json arch_json(const PredictorArch& a) {
  return Json{{"input_dim", a.input_dim},
              {"hidden", a.hidden_widths},
              {"activation", to_string(a.activation)},
              {"output_dim", a.output_dim}};
}

PredictorArch arch_from_json(const Json& j) {
  PredictorArch a;
  a.input_dim = j.at("input_dim").get<Index>();
  a.hidden_widths = j.at("hidden").get<std::vector<Index>>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.output_dim = j.at("output_dim").get<Index>();
  return a;
}

bool is_wave(const DatasetSpec& d) { return d.name == "wave" && d.path.empty(); }

}  // namespace

double ExperimentConfig::resolved_sigma() const {
  if (sigma) return *sigma;
  if (sigma_mode == NoiseMode::learned) return 1.0;
  if (is_wave(dataset)) return 0.1;
  if (const auto* k = find_known(dataset.name)) return k->sigma;
  return 1.0;
}

PredictorArch ExperimentConfig::arch(Index input_dim) const {
  PredictorArch a;
  a.input_dim = input_dim;
  a.hidden_widths = hidden.empty() ? std::vector<Index>{50} : hidden;
  a.activation = activation.value_or(is_wave(dataset) ? Activation::tanh : Activation::relu);
  a.output_dim = 1;
  return a;
}

Json ExperimentConfig::canonical() const {
  Json d{{"name", dataset.name},     {"path", dataset.path},
         {"target", dataset.target}, {"train_fraction", dataset.train_fraction},
         {"seed", dataset.seed},     {"subsample", dataset.subsample ? Json(*dataset.subsample) : Json(nullptr)}};
  if (dataset.nu == "box")
    d["nu"] = Json{{"lower", dataset.nu_lower}, {"upper", dataset.nu_upper}};
  else
    d["nu"] = dataset.nu;
  const PredictorArch a = arch(0);
  const Json t{{"n_ll_samples", train.n_ll_samples},
               {"n_kl_samples", train.n_kl_samples},
               {"k", train.k},
               {"batch_size", train.batch_size},
               {"lr_init", train.lr_init},
               {"lr_min", train.lr_min},
               {"lr_factor", train.lr_factor},
               {"patience_epochs", train.patience_epochs},
               {"plateau_threshold", train.plateau_threshold},
               {"max_epochs", train.max_epochs},
               {"T", train_T.value_or(is_wave(dataset) ? 50 : 200)},
               {"prior_variance", train.prior_variance},
               {"noise_dim", train.noise_dim},
               {"hypernet_widths", train.hypernet_widths},
               {"mf_init_sigma", train.mf_init_sigma}};
  const Json h{{"n_iterations", hmc.n_iterations}, {"n_burnin", hmc.n_burnin},
               {"n_leapfrog", hmc.n_leapfrog},     {"target_accept", hmc.target_accept},
               {"max_retained", hmc.max_retained}, {"initial_step_size", hmc.initial_step_size}};
  const Json e{{"n_models", ensemble.n_models},
               {"epochs", ensemble.epochs},
               {"batch_size", ensemble.batch_size},
               {"lr", ensemble.lr},
               {"momentum", ensemble.momentum}};
  const Json dr{{"p_drop", dropout.p_drop},
                {"epochs", dropout.epochs},
                {"batch_size", dropout.batch_size},
                {"lr", dropout.lr},
                {"weight_decay", dropout.weight_decay ? Json(*dropout.weight_decay) : Json(nullptr)}};
  const Json ev{{"n_samples", eval.n_samples},
                {"k", eval.k},
                {"T", eval.T},
                {"n_draws", eval.n_draws},
                {"ood_samples", eval.ood_samples}};
  return Json{{"dataset", d},
              {"method", to_string(method)},
              {"arch", Json{{"hidden", a.hidden_widths}, {"activation", to_string(a.activation)}}},
              {"sigma", Json{{"mode", to_string(sigma_mode)}, {"value", resolved_sigma()}}},
              {"train", t},
              {"hmc", h},
              {"ensemble", e},
              {"dropout", dr},
              {"eval", ev},
              {"seeds", seeds}};
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(canonical().dump())); }

std::string ExperimentConfig::provenance(std::uint64_t seed) const {
  return "config_hash=" + hash() + " seed=" + std::to_string(seed);
}

ExperimentConfig parse_config(const Json& doc, ExperimentConfig c) {
  only_keys(doc,
            {"dataset", "method", "arch", "sigma", "train", "hmc", "ensemble", "dropout", "eval", "seeds", "out"}, "");
  if (doc.contains("dataset")) parse_dataset(doc.at("dataset"), c.dataset);
  if (doc.contains("method")) {
    std::string m;
    read(doc, "method", m, "");
    c.method = method_id_from_string(m);
  }
  if (doc.contains("arch")) {
    const Json& a = doc.at("arch");
    only_keys(a, {"hidden", "activation"}, "arch");
    read_list(a, "hidden", c.hidden, "arch");
    for (Index w : c.hidden)
      if (w < 1) throw UsageError("config: 'arch.hidden' widths must be positive");
    if (a.contains("activation")) {
      std::string s;
      read(a, "activation", s, "arch");
      try {
        c.activation = activation_from_string(s);
      } catch (const Error& e) {
        throw UsageError(std::string("config: ") + e.what());
      }
    }
  }
  if (doc.contains("sigma")) {
    const Json& s = doc.at("sigma");
    only_keys(s, {"mode", "value"}, "sigma");
    if (s.contains("mode")) {
      std::string m;
      read(s, "mode", m, "sigma");
      try {
        c.sigma_mode = noise_mode_from_string(m);
      } catch (const Error& e) {
        throw UsageError(std::string("config: ") + e.what());
      }
    }
    read_optional(s, "value", c.sigma, "sigma");
  }
  if (doc.contains("train")) {
    const Json& t = doc.at("train");
    only_keys(t,
              {"n_ll_samples", "n_kl_samples", "k", "batch_size", "lr_init", "lr_min", "lr_factor", "patience_epochs",
               "plateau_threshold", "max_epochs", "T", "prior_variance", "noise_dim", "hypernet_widths",
               "mf_init_sigma"},
              "train");
    read(t, "n_ll_samples", c.train.n_ll_samples, "train");
    read(t, "n_kl_samples", c.train.n_kl_samples, "train");
    read(t, "k", c.train.k, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "lr_init", c.train.lr_init, "train");
    read(t, "lr_min", c.train.lr_min, "train");
    read(t, "lr_factor", c.train.lr_factor, "train");
    read(t, "patience_epochs", c.train.patience_epochs, "train");
    read(t, "plateau_threshold", c.train.plateau_threshold, "train");
    read(t, "max_epochs", c.train.max_epochs, "train");
    read_optional(t, "T", c.train_T, "train");
    read(t, "prior_variance", c.train.prior_variance, "train");
    read(t, "noise_dim", c.train.noise_dim, "train");
    read_list(t, "hypernet_widths", c.train.hypernet_widths, "train");
    read(t, "mf_init_sigma", c.train.mf_init_sigma, "train");
  }
  if (doc.contains("hmc")) {
    const Json& h = doc.at("hmc");
    only_keys(h, {"n_iterations", "n_burnin", "n_leapfrog", "target_accept", "max_retained", "initial_step_size"},
              "hmc");
    read(h, "n_iterations", c.hmc.n_iterations, "hmc");
    read(h, "n_burnin", c.hmc.n_burnin, "hmc");
    read(h, "n_leapfrog", c.hmc.n_leapfrog, "hmc");
    read(h, "target_accept", c.hmc.target_accept, "hmc");
    read(h, "max_retained", c.hmc.max_retained, "hmc");
    read(h, "initial_step_size", c.hmc.initial_step_size, "hmc");
  }
  if (doc.contains("ensemble")) {
    const Json& e = doc.at("ensemble");
    only_keys(e, {"n_models", "epochs", "batch_size", "lr", "momentum"}, "ensemble");
    read(e, "n_models", c.ensemble.n_models, "ensemble");
    read(e, "epochs", c.ensemble.epochs, "ensemble");
    read(e, "batch_size", c.ensemble.batch_size, "ensemble");
    read(e, "lr", c.ensemble.lr, "ensemble");
    read(e, "momentum", c.ensemble.momentum, "ensemble");
  }
  if (doc.contains("dropout")) {
    const Json& d = doc.at("dropout");
    only_keys(d, {"p_drop", "epochs", "batch_size", "lr", "weight_decay"}, "dropout");
    read(d, "p_drop", c.dropout.p_drop, "dropout");
    read(d, "epochs", c.dropout.epochs, "dropout");
    read(d, "batch_size", c.dropout.batch_size, "dropout");
    read(d, "lr", c.dropout.lr, "dropout");
    read_optional(d, "weight_decay", c.dropout.weight_decay, "dropout");
  }
  if (doc.contains("eval")) {
    const Json& e = doc.at("eval");
    only_keys(e, {"n_samples", "k", "T", "n_draws", "ood_samples"}, "eval");
    read(e, "n_samples", c.eval.n_samples, "eval");
    read(e, "k", c.eval.k, "eval");
    read(e, "T", c.eval.T, "eval");
    read(e, "n_draws", c.eval.n_draws, "eval");
    read(e, "ood_samples", c.eval.ood_samples, "eval");
  }
  if (doc.contains("seeds")) {
    read_list(doc, "seeds", c.seeds, "");
    if (c.seeds.empty()) throw UsageError("config: 'seeds' must not be empty");
  }
  read(doc, "out", c.out, "");
  // Cross-field checks that the individual configs cannot make on their own.
  if (c.sigma && !(*c.sigma > 0.0)) throw UsageError("config: 'sigma.value' must be positive");
  if (c.eval.n_samples < c.eval.k + 1) throw UsageError("config: 'eval.n_samples' must exceed eval.k");
  if (c.eval.k < 1 || c.eval.T < 1 || c.eval.n_draws < 1 || c.eval.ood_samples < 1)
    throw UsageError("config: eval counts must be positive");
  if (!(c.dataset.train_fraction > 0.0 && c.dataset.train_fraction <= 1.0))
    throw UsageError("config: 'dataset.train_fraction' must lie in (0, 1]");
  if (c.train_T && *c.train_T < 1) throw UsageError("config: 'train.T' must be positive");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path.string() + "'");
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc, std::move(base));
}

std::filesystem::path data_dir() {
  const char* env = std::getenv("HYVI_DATA_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("data");
}

PreparedData prepare_data(const DatasetSpec& spec, std::uint64_t split_seed) {
  PreparedData out;
  out.name = spec.name;
  if (is_wave(spec)) {
    out.full = make_wave(spec.seed);
    out.train = out.full;
    out.test = make_wave(derive_seed(spec.seed, 1));
    out.test.name = "wave-test";
    if (spec.nu == "auto") out.nu = wave_ood();
  } else {
    std::filesystem::path path;
    const KnownDataset* known = find_known(spec.name);
    if (!spec.path.empty()) {
      path = spec.path;
      if (path.is_relative() && !std::filesystem::exists(path)) path = data_dir() / path;
    } else if (known) {
      path = data_dir() / (known->name + ".csv");
    } else {
      throw UsageError("dataset '" + spec.name + "' is neither wave nor a known CSV dataset; give dataset.path");
    }
    if (!std::filesystem::exists(path))
      throw DataError("dataset file '" + path.string() +
                      "' not found; run tools/fetch_uci.py or set HYVI_DATA_DIR");
    const std::string target = !spec.target.empty() ? spec.target : known ? known->target : "";
    if (target.empty()) throw UsageError("dataset '" + spec.name + "' needs dataset.target");
    Dataset raw;
    try {
      raw = load_csv(path, target);
    } catch (const ParseError& e) {
      throw DataError(e.what());
    }
    raw.name = spec.name;
    if (spec.subsample && *spec.subsample < raw.size()) raw = subsample(raw, *spec.subsample, spec.seed);
    try {
      std::tie(out.train, out.test) = split_standardize(raw, spec.train_fraction, split_seed);
      out.full = standardize(raw, *out.train.norm);
    } catch (const PreconditionError& e) {
      throw DataError(e.what());
    }
    if (spec.nu == "auto") out.nu = hyperrectangle_from(out.full);
  }
  if (spec.nu == "box") {
    if (static_cast<Index>(spec.nu_lower.size()) != out.train.dim())
      throw UsageError("dataset.nu bounds have " + std::to_string(spec.nu_lower.size()) + " entries, data has " +
                       std::to_string(out.train.dim()) + " features");
    out.nu = InputDistribution(Eigen::Map<const Eigen::VectorXd>(spec.nu_lower.data(), out.train.dim()),
                               Eigen::Map<const Eigen::VectorXd>(spec.nu_upper.data(), out.train.dim()));
  }
  return out;
}

RunResult run_method(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed) {
  const PredictorArch arch = config.arch(data.train.dim());
  const double sigma = config.resolved_sigma();
  if (uses_nu(config.method) && !data.nu)
    throw UsageError(to_string(config.method) + " needs an OOD distribution; dataset.nu is 'none'");
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  if (const auto m = variational_method(config.method)) {
    TrainConfig t = config.train;
    t.arch = arch;
    t.T = config.train_T.value_or(is_wave(config.dataset) ? 50 : 200);
    t.sigma_mode = config.sigma_mode;
    t.sigma = sigma;
    t.seed = seed;
    TrainResult r = train(*m, data.train, t, data.nu ? &*data.nu : nullptr);
    RunResult out{std::move(r.posterior), std::move(r.trace), std::nullopt, 0.0};
    out.runtime_s = elapsed();
    return out;
  }
  switch (config.method) {
    case MethodId::hmc: {
      if (config.sigma_mode == NoiseMode::learned) throw UsageError("hmc samples with a fixed sigma only");
      HmcConfig h = config.hmc;
      h.seed = seed;
      const GaussianPrior prior{config.train.prior_variance};
      Rng rng(derive_seed(seed, 7));
      const ParamVector init = init_params(arch, rng);
      Chain chain = hmc_sample(make_log_posterior(arch, data.train, prior, sigma), init, h);
      Posterior post = Posterior::from_samples(arch, chain.samples, sigma);
      RunResult out{std::move(post), std::nullopt, std::move(chain), 0.0};
      out.runtime_s = elapsed();
      return out;
    }
    case MethodId::ensemble: {
      EnsembleConfig e = config.ensemble;
      e.sigma_mode = config.sigma_mode;
      e.sigma = sigma;
      e.seed = seed;
      RunResult out{train_ensemble(data.train, arch, e), std::nullopt, std::nullopt, 0.0};
      out.runtime_s = elapsed();
      return out;
    }
    case MethodId::mc_dropout: {
      DropoutConfig d = config.dropout;
      d.sigma_mode = config.sigma_mode;
      d.sigma = sigma;
      d.seed = seed;
      RunResult out{train_mc_dropout(data.train, arch, d), std::nullopt, std::nullopt, 0.0};
      out.runtime_s = elapsed();
      return out;
    }
    default: break;
  }
  throw UsageError("unsupported method");
}

namespace {

// Writes through a sibling temporary file so readers never see a partial file.
template <typename Writer>
void write_atomic(const std::filesystem::path& path, Writer&& write) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  write(tmp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

PosteriorFiles save_run(const std::filesystem::path& dir, const RunResult& run, const ExperimentConfig& config,
                        const PreparedData& data, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");
  PosteriorFiles files{dir / "posterior.bin", dir / "posterior.json", std::nullopt};
  const std::string prov = config.provenance(seed);
  write_atomic(files.bin, [&](const std::filesystem::path& p) { write_param_batch(p, run.posterior.state()); });

  if (run.trace) {
    files.trace = dir / "trace.csv";
    write_atomic(*files.trace, [&](const std::filesystem::path& p) { run.trace->write_csv(p, prov); });
  } else if (run.chain) {
    files.trace = dir / "hmc_trace.csv";
    write_atomic(*files.trace, [&](const std::filesystem::path& p) {
      std::ofstream out(p);
      if (!out) throw Error("cannot open '" + p.string() + "' for writing");
      out << "# " << prov << '\n' << "iteration,step_size\n" << std::setprecision(17);
      for (std::size_t i = 0; i < run.chain->step_size_trace.size(); ++i)
        out << i << ',' << run.chain->step_size_trace[i] << '\n';
    });
  }

  const Posterior& post = run.posterior;
  Json side{{"method", to_string(config.method)},
            {"kind", to_string(post.kind())},
            {"arch", arch_json(post.arch())},
            {"sigma_l", post.sigma_l()},
            {"sigma_mode", to_string(config.sigma_mode)},
            {"dataset", data.name},
            {"seed", seed},
            {"config_hash", config.hash()},
            {"config", config.canonical()},
            {"posterior_fnv1a", hex64(fnv1a(file_bytes(files.bin)))},
            {"runtime_s", run.runtime_s}};
  if (const HyperNet* h = post.hypernet()) side["hypernet"] = arch_json(h->net);
  if (post.kind() == PosteriorKind::dropout) side["p_drop"] = post.p_drop();
  if (run.trace) side["epochs"] = run.trace->epochs.size();
  if (run.chain) {
    side["hmc"] = Json{{"accept_rate", run.chain->accept_rate},
                       {"divergences", run.chain->divergences},
                       {"thinning", run.chain->thinning},
                       {"retained", run.chain->samples.rows()}};
  }
  write_atomic(files.sidecar, [&](const std::filesystem::path& p) {
    std::ofstream out(p);
    if (!out) throw Error("cannot open '" + p.string() + "' for writing");
    out << side.dump(2) << '\n';
  });
  return files;
}

Posterior load_posterior(const std::filesystem::path& bin, Json* sidecar) {
  std::filesystem::path side_path = bin;
  side_path.replace_extension(".json");
  std::ifstream in(side_path);
  if (!in) throw UsageError("posterior sidecar '" + side_path.string() + "' not found");
  Json side;
  try {
    side = Json::parse(in);
    const PredictorArch arch = arch_from_json(side.at("arch"));
    const PosteriorKind kind = posterior_kind_from_string(side.at("kind").get<std::string>());
    const PredictorArch hyper = side.contains("hypernet") ? arch_from_json(side.at("hypernet")) : PredictorArch{};
    const double p_drop = side.value("p_drop", 0.0);
    Posterior post = Posterior::restore(kind, arch, read_param_batch(bin), side.at("sigma_l").get<double>(), hyper,
                                        p_drop);
    if (sidecar) *sidecar = std::move(side);
    return post;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("posterior sidecar '" + side_path.string() + "' is malformed: " + e.what());
  }
}

void check_arch(const Posterior& posterior, const Dataset& data) {
  if (posterior.arch().input_dim != data.dim())
    throw ArchMismatch("posterior expects " + std::to_string(posterior.arch().input_dim) +
                       " input features, dataset '" + data.name + "' has " + std::to_string(data.dim()));
}

MetricSet MetricSet::parse(const std::string& list) {
  if (list == "all") return {};
  MetricSet m{false, false, false, false, false};
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "rmse") m.rmse = true;
    else if (item == "lpp") m.lpp = true;
    else if (item == "entropy_param") m.entropy_param = true;
    else if (item == "entropy_pred") m.entropy_pred = true;
    else if (item == "epistemic") m.epistemic = true;
    else throw UsageError("unknown metric '" + item + "'");
  }
  return m;
}

MetricReport evaluate(const Posterior& posterior, const ExperimentConfig& config, const PreparedData& data,
                      std::uint64_t seed, const std::string& method, double runtime_s, const MetricSet& metrics) {
  check_arch(posterior, data.train);
  if (metrics.entropy_pred && !data.nu)
    throw UsageError("predictor-space entropy needs an OOD distribution; dataset.nu is 'none'");
  const EvalSettings& ev = config.eval;
  MetricReport r;
  r.method = method;
  r.dataset = data.name;
  r.seed = seed;
  r.runtime_s = runtime_s;
  if (data.test.size() > 0) {
    if (metrics.rmse) r.rmse = rmse(posterior, data.test, ev.n_samples, derive_seed(seed, 21));
    if (metrics.lpp) r.lpp = lpp(posterior, data.test, ev.n_samples, derive_seed(seed, 22));
  }
  knn::EvalDesign design;
  design.T = ev.T;
  design.n_draws = ev.n_draws;
  if (metrics.entropy_param)
    r.entropy_param = posterior_entropy(posterior, Space::parameter, design, ev.n_samples, ev.k, derive_seed(seed, 23));
  if (metrics.entropy_pred) {
    design.nu = *data.nu;
    r.entropy_pred = posterior_entropy(posterior, Space::predictor, design, ev.n_samples, ev.k, derive_seed(seed, 23));
  }
  if (!metrics.epistemic) return r;
  const auto group = [&](const std::string& name, const Eigen::MatrixXd& X) {
    EpistemicGroup g;
    g.name = name;
    if (X.rows() == 0) return g;
    for (const auto& v : epistemic_profile(posterior, X, ev.n_samples, ev.k, derive_seed(seed, 24))) {
      g.values.push_back(v.value);
      if (g.flag.empty()) g.flag = v.flag;
    }
    return g;
  };
  r.epistemic.push_back(group("train", data.train.X));
  r.epistemic.push_back(group("test", data.test.X));
  if (data.nu) r.epistemic.push_back(group("ood", sample_inputs(*data.nu, ev.ood_samples, derive_seed(seed, 25))));
  return r;
}

Eigen::VectorXd band_grid(const PreparedData& data) {
  if (data.train.dim() != 1) throw PreconditionError("band_grid: 1-D inputs only");
  double lo = data.full.X.minCoeff(), hi = data.full.X.maxCoeff();
  if (data.nu) {
    lo = std::min(lo, data.nu->lower(0));
    hi = std::max(hi, data.nu->upper(0));
  }
  return Eigen::VectorXd::LinSpaced(400, lo, hi);
}

}  // namespace hyvi::cli
