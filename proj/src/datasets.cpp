#include "hyvi/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "hyvi/error.hpp"

namespace hyvi {

NormStats NormStats::identity(Eigen::Index dim) {
  return {Eigen::RowVectorXd::Zero(dim), Eigen::RowVectorXd::Ones(dim), 0.0, 1.0};
}

Eigen::VectorXd Dataset::y_original() const {
  if (!norm) return y;
  return (y.array() * norm->y_std + norm->y_mean).matrix();
}

Eigen::MatrixXd Dataset::X_original() const {
  if (!norm) return X;
  Eigen::MatrixXd out = X.array().rowwise() * norm->x_std.array();
  out.rowwise() += norm->x_mean;
  return out;
}

double wave_clean(double x) { return std::cos(4.0 * (x + 0.2)); }

Dataset make_wave(std::uint64_t seed, Eigen::Index n, double noise_sd) {
  Rng rng(seed);
  std::bernoulli_distribution left(0.5);
  std::uniform_real_distribution<double> patch(0.5, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.name = "wave";
  ds.X.resize(n, 1);
  ds.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool l = left(rng);
    const double u = patch(rng);
    const double x = l ? -u : u;
    ds.X(i, 0) = x;
    ds.y(i) = wave_clean(x) + noise_sd * noise(rng);
  }
  ds.feature_names = {"x"};
  ds.norm = NormStats::identity(1);
  return ds;
}

InputDistribution wave_ood() {
  return InputDistribution(Eigen::VectorXd::Constant(1, -4.0), Eigen::VectorXd::Constant(1, 2.0));
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == ',' && !quoted) {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& target_column) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV '" + path.string() + "'");
  std::vector<std::string> header = split_line(line);
  for (auto& h : header) h = trim(h);
  const auto it = std::find(header.begin(), header.end(), target_column);
  if (it == header.end()) throw ParseError("target column '" + target_column + "' not found", ParseError::npos);
  const std::size_t target = static_cast<std::size_t>(it - header.begin());

  std::vector<std::vector<double>> rows;
  // Rows and columns in errors are zero-based data-row and column indices.
  for (std::size_t row = 0; std::getline(in, line); ++row) {
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw ParseError("ragged row: expected " + std::to_string(header.size()) + " cells, found " +
                           std::to_string(cells.size()),
                       row);
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || std::isnan(v))
        throw ParseError("non-numeric cell '" + cell + "'", row, c);
      values[c] = v;
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw ParseError("CSV has no data rows");

  Dataset ds;
  ds.name = path.stem().string();
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(header.size() - 1);
  ds.X.resize(n, d);
  ds.y.resize(n);
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != target) ds.feature_names.push_back(header[c]);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index j = 0;
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == target)
        ds.y(i) = rows[static_cast<std::size_t>(i)][c];
      else
        ds.X(i, j++) = rows[static_cast<std::size_t>(i)][c];
    }
  }
  return ds;
}

void write_csv(const std::filesystem::path& path, const Dataset& ds, const std::string& target_name) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (Eigen::Index j = 0; j < ds.dim(); ++j)
    out << (static_cast<std::size_t>(j) < ds.feature_names.size() ? ds.feature_names[j] : "x" + std::to_string(j))
        << ',';
  out << target_name << '\n' << std::setprecision(17);
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) out << ds.X(i, j) << ',';
    out << ds.y(i) << '\n';
  }
}

NormStats compute_norm_stats(const Dataset& ds) {
  if (ds.size() < 2) throw PreconditionError("compute_norm_stats: need at least 2 rows");
  NormStats s;
  s.x_mean = ds.X.colwise().mean();
  s.x_std = ((ds.X.rowwise() - s.x_mean).array().square().colwise().mean()).sqrt().matrix();
  s.y_mean = ds.y.mean();
  s.y_std = std::sqrt((ds.y.array() - s.y_mean).square().mean());
  for (Eigen::Index j = 0; j < s.x_std.size(); ++j)
    if (!(s.x_std(j) > 0.0))
      throw PreconditionError("constant feature " + std::to_string(j) + " cannot be standardised");
  if (!(s.y_std > 0.0)) throw PreconditionError("constant target cannot be standardised");
  return s;
}

Dataset standardize(const Dataset& ds, const NormStats& stats) {
  if (ds.norm) throw PreconditionError("standardize: dataset is already standardised");
  Dataset out = ds;
  out.X = ((ds.X.rowwise() - stats.x_mean).array().rowwise() / stats.x_std.array()).matrix();
  out.y = ((ds.y.array() - stats.y_mean) / stats.y_std).matrix();
  out.norm = stats;
  return out;
}

Dataset destandardize(const Dataset& ds) {
  Dataset out = ds;
  out.X = ds.X_original();
  out.y = ds.y_original();
  out.norm.reset();
  return out;
}

namespace {

std::vector<Eigen::Index> permutation(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return shuffled_indices(n, rng);
}

Dataset take_rows(const Dataset& ds, const std::vector<Eigen::Index>& rows) {
  Dataset out;
  out.name = ds.name;
  out.feature_names = ds.feature_names;
  out.norm = ds.norm;
  out.X.resize(static_cast<Eigen::Index>(rows.size()), ds.dim());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.X.row(static_cast<Eigen::Index>(i)) = ds.X.row(rows[i]);
    out.y(static_cast<Eigen::Index>(i)) = ds.y(rows[i]);
  }
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> split_standardize(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (ds.norm) throw PreconditionError("split_standardize expects raw data");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0))
    throw PreconditionError("split_standardize: train_fraction must be in (0, 1]");
  const auto n_train = static_cast<Eigen::Index>(std::floor(static_cast<double>(ds.size()) * train_fraction));
  if (n_train < 2) throw PreconditionError("split_standardize: train split smaller than 2 rows");
  const auto perm = permutation(ds.size(), seed);
  const std::vector<Eigen::Index> train_rows(perm.begin(), perm.begin() + n_train);
  const std::vector<Eigen::Index> test_rows(perm.begin() + n_train, perm.end());
  const Dataset train_raw = take_rows(ds, train_rows);
  const Dataset test_raw = take_rows(ds, test_rows);
  const NormStats stats = compute_norm_stats(train_raw);
  return {standardize(train_raw, stats), standardize(test_raw, stats)};
}

Dataset subsample(const Dataset& ds, Eigen::Index n, std::uint64_t seed) {
  if (n > ds.size()) throw PreconditionError("subsample: n exceeds dataset size");
  auto perm = permutation(ds.size(), seed);
  perm.resize(static_cast<std::size_t>(n));
  return take_rows(ds, perm);
}

InputDistribution hyperrectangle_from(const Dataset& ds) {
  if (ds.size() == 0) throw PreconditionError("hyperrectangle_from: empty dataset");
  return InputDistribution(ds.X.colwise().minCoeff().transpose(), ds.X.colwise().maxCoeff().transpose());
}

}  // namespace hyvi
