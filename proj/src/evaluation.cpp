#include "hyvi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <tuple>

#include "hyvi/error.hpp"

namespace hyvi {

namespace {

// Draws used by every metric. Finite-support posteriors contribute each distinct draw once.
ParamBatch metric_draws(const Posterior& posterior, Index n, std::uint64_t seed, std::string& flag) {
  if (n < 1) throw PreconditionError("n_samples must be positive");
  const auto support = posterior.support_size();
  if (support && posterior.kind() == PosteriorKind::ensemble && *support < n) {
    flag = "finite-support";
    return posterior.sample(*support, seed);
  }
  if (support && *support < n) flag = "finite-support";
  return posterior.sample(support ? std::min(n, *support) : n, seed);
}

FlaggedValue flagged(const knn::Estimate& e, std::string flag) {
  if (flag.empty() && e.clamped > 0) flag = "degenerate";
  return {e.value, std::move(flag)};
}

FlaggedValue too_few(std::string flag) { return {std::numeric_limits<double>::quiet_NaN(), flag.empty() ? "degenerate" : flag}; }

double y_scale(const Dataset& ds) { return ds.norm ? ds.norm->y_std : 1.0; }

}  // namespace

double rmse(const Posterior& posterior, const Dataset& test, Index n_samples, std::uint64_t seed) {
  if (test.size() < 1) throw PreconditionError("rmse: empty test set");
  std::string flag;
  const ParamBatch draws = metric_draws(posterior, n_samples, seed, flag);
  const Eigen::RowVectorXd mean = predict_batch(posterior.arch(), draws, test.X).colwise().mean();
  const double mse = (mean.transpose() - test.y).squaredNorm() / static_cast<double>(test.size());
  return std::sqrt(mse) * y_scale(test);
}

double lpp(const Posterior& posterior, const Dataset& test, Index n_samples, std::uint64_t seed) {
  if (test.size() < 1) throw PreconditionError("lpp: empty test set");
  const double sigma = posterior.sigma_l();
  if (!(sigma > 0.0)) throw DomainError("lpp: sigma_l", sigma);
  std::string flag;
  const ParamBatch draws = metric_draws(posterior, n_samples, seed, flag);
  const Eigen::MatrixXd pred = predict_batch(posterior.arch(), draws, test.X);  // S x n
  const double S = static_cast<double>(pred.rows());
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma);
  double total = 0.0;
  for (Index i = 0; i < test.size(); ++i) {
    const Eigen::ArrayXd logp = norm - (pred.col(i).array() - test.y(i)).square() / (2.0 * sigma * sigma);
    const double top = logp.maxCoeff();
    total += top + std::log((logp - top).exp().sum()) - std::log(S);
  }
  return total / static_cast<double>(test.size()) - std::log(y_scale(test));
}

FlaggedValue posterior_entropy(const Posterior& posterior, Space space, const knn::EvalDesign& design,
                               Index n_samples, int k, std::uint64_t seed) {
  std::string flag;
  ParamBatch draws = metric_draws(posterior, n_samples, seed, flag);
  if (draws.rows() < k + 1) return too_few(flag);
  if (space == Space::parameter) return flagged(knn::entropy_knn_estimate(draws, k), flag);
  return flagged(knn::functional_entropy(knn::predictor_cloud(posterior.arch(), std::move(draws)), design, k,
                                         derive_seed(seed, 1)),
                 flag);
}

std::vector<FlaggedValue> epistemic_profile(const Posterior& posterior, const Eigen::MatrixXd& X, Index n_samples,
                                            int k, std::uint64_t seed) {
  std::string flag;
  const ParamBatch draws = metric_draws(posterior, n_samples, seed, flag);
  std::vector<FlaggedValue> out;
  out.reserve(static_cast<std::size_t>(X.rows()));
  if (draws.rows() < k + 1) {
    out.assign(static_cast<std::size_t>(X.rows()), too_few(flag));
    return out;
  }
  const Eigen::MatrixXd pred = predict_batch(posterior.arch(), draws, X);
  for (Index j = 0; j < X.rows(); ++j) out.push_back(flagged(knn::entropy_knn_estimate(pred.col(j), k), flag));
  return out;
}

FlaggedValue epistemic_uncertainty(const Posterior& posterior, const Eigen::RowVectorXd& x, Index n_samples, int k,
                                   std::uint64_t seed) {
  return epistemic_profile(posterior, Eigen::MatrixXd(x), n_samples, k, seed).front();
}

FlaggedValue cross_model_kl(const Posterior& a, const Posterior& b, Space space, const knn::EvalDesign& design,
                            Index n_samples, std::uint64_t seed) {
  if (!(a.arch() == b.arch())) throw ShapeError("cross_model_kl", describe(a.arch()), describe(b.arch()));
  std::string flag_a, flag_b;
  ParamBatch da = metric_draws(a, n_samples, derive_seed(seed, 0), flag_a);
  ParamBatch db = metric_draws(b, n_samples, derive_seed(seed, 1), flag_b);
  const std::string flag = !flag_a.empty() ? flag_a : flag_b;
  if (da.rows() < 2) return too_few(flag);
  if (space == Space::parameter) return flagged(knn::kl_knn_estimate(da, db, 1), flag);
  return flagged(knn::functional_kl(knn::predictor_cloud(a.arch(), std::move(da)),
                                    knn::predictor_cloud(b.arch(), std::move(db)), design, 1, derive_seed(seed, 2)),
                 flag);
}

double median(std::vector<double> values) {
  std::erase_if(values, [](double v) { return !std::isfinite(v); });
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

double MetricReport::epistemic_median(const std::string& group) const {
  for (const auto& g : epistemic)
    if (g.name == group) return g.median();
  return std::numeric_limits<double>::quiet_NaN();
}

BandPanel predictive_band(const std::string& title, const Posterior& posterior, const Eigen::VectorXd& grid,
                          const Dataset& train, Index n_samples, std::uint64_t seed) {
  if (posterior.arch().input_dim != 1) throw PreconditionError("predictive_band: 1-D inputs only");
  std::string flag;
  const ParamBatch draws = metric_draws(posterior, n_samples, seed, flag);
  const Eigen::MatrixXd pred = predict_batch(posterior.arch(), draws, Eigen::MatrixXd(grid));
  BandPanel p;
  p.title = title;
  p.grid = grid;
  p.mean = pred.colwise().mean().transpose();
  p.sd = ((pred.rowwise() - p.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  p.train_x = train.X_original().col(0);
  p.train_y = train.y_original();
  if (train.norm) {
    p.mean = p.mean.array() * train.norm->y_std + train.norm->y_mean;
    p.sd *= train.norm->y_std;
  }
  return p;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

// Mean and standard error of the mean; NaN where undefined.
std::pair<double, double> mean_stderr(const std::vector<double>& v) {
  double mean = std::numeric_limits<double>::quiet_NaN(), se = mean;
  if (v.empty()) return {mean, se};
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return {mean, se};
}

void write_number(std::ostream& out, double v) {
  if (std::isfinite(v))
    out << v;
  else
    out << "nan";
}

}  // namespace

void write_band_svg(const std::filesystem::path& path, const std::vector<BandPanel>& panels, double y_lo,
                    double y_hi) {
  constexpr double kW = 360, kH = 240, kPad = 36, kCols = 3;
  const auto n = static_cast<double>(panels.size());
  const double cols = std::min(kCols, std::max(1.0, n));
  const double rows = std::ceil(std::max(1.0, n) / cols);
  const double width = cols * (kW + kPad) + kPad;
  const double height = rows * (kH + 2 * kPad) + kPad;
  std::ofstream out = open_out(path);
  out << std::fixed << std::setprecision(2);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"yes\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const BandPanel& p = panels[i];
    const double ox = kPad + static_cast<double>(i % static_cast<std::size_t>(cols)) * (kW + kPad);
    const double oy = kPad + static_cast<double>(i / static_cast<std::size_t>(cols)) * (kH + 2 * kPad);
    const double x_lo = p.grid.size() ? p.grid.minCoeff() : 0.0;
    const double x_hi = p.grid.size() ? p.grid.maxCoeff() : 1.0;
    const auto sx = [&](double x) { return ox + (x - x_lo) / std::max(x_hi - x_lo, 1e-12) * kW; };
    const auto sy = [&](double y) { return oy + (y_hi - std::clamp(y, y_lo, y_hi)) / (y_hi - y_lo) * kH; };
    out << "<g>\n<text x=\"" << ox << "\" y=\"" << oy - 8 << "\" font-family=\"sans-serif\" font-size=\"13\">"
        << xml_escape(p.title) << "</text>\n"
        << "<rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << kW << "\" height=\"" << kH
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int band = 3; band >= 1; --band) {
      out << "<polygon fill=\"#1f77b4\" fill-opacity=\"" << 0.12 * (4 - band) << "\" stroke=\"none\" points=\"";
      for (Index j = 0; j < p.grid.size(); ++j) out << sx(p.grid(j)) << ',' << sy(p.mean(j) + band * p.sd(j)) << ' ';
      for (Index j = p.grid.size(); j-- > 0;) out << sx(p.grid(j)) << ',' << sy(p.mean(j) - band * p.sd(j)) << ' ';
      out << "\"/>\n";
    }
    out << "<polyline fill=\"none\" stroke=\"#08306b\" stroke-width=\"1.5\" points=\"";
    for (Index j = 0; j < p.grid.size(); ++j) out << sx(p.grid(j)) << ',' << sy(p.mean(j)) << ' ';
    out << "\"/>\n";
    for (Index j = 0; j < p.train_x.size(); ++j)
      if (p.train_x(j) >= x_lo && p.train_x(j) <= x_hi)
        out << "<circle cx=\"" << sx(p.train_x(j)) << "\" cy=\"" << sy(p.train_y(j))
            << "\" r=\"1.8\" fill=\"#d62728\"/>\n";
    out << "<text x=\"" << ox << "\" y=\"" << oy + kH + 14 << "\" font-family=\"sans-serif\" font-size=\"10\">"
        << x_lo << "</text>\n<text x=\"" << ox + kW - 24 << "\" y=\"" << oy + kH + 14
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << x_hi << "</text>\n</g>\n";
  }
  out << "</svg>\n";
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

void emit_report(const std::vector<MetricReport>& reports, const std::filesystem::path& out_dir,
                 const std::string& comment, const std::vector<BandPanel>& panels) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw Error("cannot create report directory '" + out_dir.string() + "'");
  const auto header = [&](std::ostream& o) {
    if (!comment.empty()) o << "# " << comment << '\n';
    o << std::setprecision(10);
  };

  {
    std::ofstream out = open_out(out_dir / "metrics.csv");
    header(out);
    out << "method,dataset,seed,rmse,lpp,entropy_param,entropy_pred,epi_train_med,epi_test_med,epi_ood_med,"
           "runtime_s\n";
    for (const auto& r : reports) {
      out << r.method << ',' << r.dataset << ',' << r.seed;
      for (double v : {r.rmse, r.lpp, r.entropy_param.value, r.entropy_pred.value, r.epistemic_median("train"),
                       r.epistemic_median("test"), r.epistemic_median("ood"), r.runtime_s}) {
        out << ',';
        write_number(out, v);
      }
      out << '\n';
    }
  }
  {
    std::ofstream out = open_out(out_dir / "metric_flags.csv");
    header(out);
    out << "method,dataset,seed,metric,flag\n";
    for (const auto& r : reports) {
      const auto emit = [&](const std::string& metric, const std::string& flag) {
        if (!flag.empty()) out << r.method << ',' << r.dataset << ',' << r.seed << ',' << metric << ',' << flag << '\n';
      };
      emit("entropy_param", r.entropy_param.flag);
      emit("entropy_pred", r.entropy_pred.flag);
      for (const auto& g : r.epistemic) emit("epi_" + g.name, g.flag);
    }
  }
  {
    std::ofstream out = open_out(out_dir / "epistemic_values.csv");
    header(out);
    out << "method,dataset,seed,group,value\n";
    for (const auto& r : reports)
      for (const auto& g : r.epistemic)
        for (double v : g.values) {
          out << r.method << ',' << r.dataset << ',' << r.seed << ',' << g.name << ',';
          write_number(out, v);
          out << '\n';
        }
  }

  // Histograms share one set of bin edges across every group and report.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : reports)
    for (const auto& g : r.epistemic)
      for (double v : g.values)
        if (std::isfinite(v)) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
  if (std::isfinite(lo)) {
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    constexpr int kBins = 30;
    const double w = (hi - lo) / kBins;
    for (const auto& r : reports) {
      if (r.epistemic.empty()) continue;
      std::ofstream out =
          open_out(out_dir / ("epistemic_hist_" + slug(r.method) + "_" + slug(r.dataset) + "_" + std::to_string(r.seed) + ".csv"));
      header(out);
      out << "bin_lo,bin_hi";
      std::vector<std::vector<long>> counts;
      for (const auto& g : r.epistemic) {
        out << ',' << g.name;
        std::vector<long> c(kBins, 0);
        for (double v : g.values)
          if (std::isfinite(v)) ++c[static_cast<std::size_t>(std::clamp(static_cast<int>((v - lo) / w), 0, kBins - 1))];
        counts.push_back(std::move(c));
      }
      out << '\n';
      for (int b = 0; b < kBins; ++b) {
        out << lo + b * w << ',' << (b + 1 == kBins ? hi : lo + (b + 1) * w);
        for (const auto& c : counts) out << ',' << c[static_cast<std::size_t>(b)];
        out << '\n';
      }
    }
  }

  // Mean and standard error over seeds, one row per (dataset, method).
  const auto summarise = [&](const std::filesystem::path& path, const char* key,
                             const std::vector<std::pair<std::string, double MetricReport::*>>& plain,
                             const std::vector<std::pair<std::string, FlaggedValue MetricReport::*>>& flaggable) {
    std::ofstream out = open_out(path);
    header(out);
    out << key << ",dataset,method,mean,stderr,runs\n";
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& r : reports)
      if (std::find(order.begin(), order.end(), std::pair{r.dataset, r.method}) == order.end())
        order.emplace_back(r.dataset, r.method);
    const auto row = [&](const std::string& name, const auto& get) {
      for (const auto& [dataset, method] : order) {
        std::vector<double> v;
        for (const auto& r : reports)
          if (r.dataset == dataset && r.method == method && std::isfinite(get(r))) v.push_back(get(r));
        const auto [mean, se] = mean_stderr(v);
        out << name << ',' << dataset << ',' << method << ',';
        write_number(out, mean);
        out << ',';
        write_number(out, se);
        out << ',' << v.size() << '\n';
      }
    };
    for (const auto& [name, member] : plain) row(name, [&](const MetricReport& r) { return r.*member; });
    for (const auto& [name, member] : flaggable) row(name, [&](const MetricReport& r) { return (r.*member).value; });
  };
  summarise(out_dir / "entropy_table.csv", "space", {},
            {{"parameter", &MetricReport::entropy_param}, {"predictor", &MetricReport::entropy_pred}});
  summarise(out_dir / "rmse_lpp_table.csv", "metric", {{"rmse", &MetricReport::rmse}, {"lpp", &MetricReport::lpp}},
            {});

  if (!panels.empty()) write_band_svg(out_dir / "bands.svg", panels);
}

void emit_kl_table(const std::vector<KlRecord>& records, const std::filesystem::path& out_dir,
                   const std::string& comment) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw Error("cannot create report directory '" + out_dir.string() + "'");
  std::ofstream raw = open_out(out_dir / "kl_values.csv");
  std::ofstream table = open_out(out_dir / "kl_table.csv");
  for (std::ostream* o : {static_cast<std::ostream*>(&raw), static_cast<std::ostream*>(&table)}) {
    if (!comment.empty()) *o << "# " << comment << '\n';
    *o << std::setprecision(10);
  }
  raw << "space,dataset,from,to,seed,value,flag\n";
  table << "space,dataset,from,to,mean,stderr,runs\n";
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::vector<Key> order;
  for (const auto& r : records) {
    raw << r.space << ',' << r.dataset << ',' << r.from << ',' << r.to << ',' << r.seed << ',';
    write_number(raw, r.value.value);
    raw << ',' << r.value.flag << '\n';
    const Key key{r.space, r.dataset, r.from, r.to};
    if (std::find(order.begin(), order.end(), key) == order.end()) order.push_back(key);
  }
  for (const auto& key : order) {
    std::vector<double> v;
    for (const auto& r : records)
      if (Key{r.space, r.dataset, r.from, r.to} == key && std::isfinite(r.value.value)) v.push_back(r.value.value);
    const auto [mean, se] = mean_stderr(v);
    table << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << std::get<3>(key) << ',';
    write_number(table, mean);
    table << ',';
    write_number(table, se);
    table << ',' << v.size() << '\n';
  }
  if (!raw || !table) throw Error("failed writing KL tables in '" + out_dir.string() + "'");
}

}  // namespace hyvi
