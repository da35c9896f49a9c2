#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "hyvi/datasets.hpp"
#include "hyvi/error.hpp"

using namespace hyvi;
using Index = Eigen::Index;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << content;
  return p;
}

// Full dataset file from HYVI_DATA_DIR, if configured and present.
std::optional<std::filesystem::path> full_data(const std::string& name) {
  const char* dir = std::getenv("HYVI_DATA_DIR");
  if (!dir || !*dir) return std::nullopt;
  const auto p = std::filesystem::path(dir) / (name + ".csv");
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd da = a.array() - a.mean(), db = b.array() - b.mean();
  return (da * db).sum() / std::sqrt(da.square().sum() * db.square().sum());
}

}  // namespace

TEST_SUITE("datasets") {
  TEST_CASE("make_wave") {
    const Dataset w = make_wave(0);
    CHECK(w.size() == 120);
    CHECK(w.dim() == 1);
    for (Index i = 0; i < w.size(); ++i) {
      const double x = w.X(i, 0);
      CHECK(((x >= -1.0 && x <= -0.5) || (x >= 0.5 && x <= 1.0)));
    }
    CHECK(wave_clean(-0.2) == 1.0);
    Eigen::VectorXd clean(w.size());
    for (Index i = 0; i < w.size(); ++i) clean(i) = std::cos(4 * (w.X(i, 0) + 0.2));
    const Eigen::VectorXd resid = w.y - clean;
    const double sd = std::sqrt((resid.array() - resid.mean()).square().sum() / (w.size() - 1.0));
    CHECK(sd >= 0.07);
    CHECK(sd <= 0.13);
    CHECK(pearson(w.y, clean) > 0.95);
    CHECK(make_wave(0).X == w.X);
    CHECK(make_wave(0).y == w.y);
    CHECK(make_wave(1).X != w.X);
    // Both patches are used.
    CHECK((w.X.array() < 0).count() > 30);
    CHECK((w.X.array() > 0).count() > 30);
  }

  TEST_CASE("wave_ood") {
    const InputDistribution nu = wave_ood();
    CHECK(nu.dim() == 1);
    CHECK(nu.lower(0) == -4.0);
    CHECK(nu.upper(0) == 2.0);
    const Eigen::MatrixXd s = sample_inputs(nu, 100000, 3);
    CHECK(s.minCoeff() >= -4.0);
    CHECK(s.maxCoeff() <= 2.0);
    CHECK(std::abs(s.mean() + 1.0) < 0.05);
  }

  TEST_CASE("load_csv") {
    SUBCASE("hand-written file") {
      const auto p = write_temp("hyvi_ok.csv", "a,target,b\n1,2,3\n4.5,-5,6e1\n7,8,9\n");
      const Dataset ds = load_csv(p, "target");
      REQUIRE(ds.size() == 3);
      REQUIRE(ds.dim() == 2);
      Eigen::MatrixXd X(3, 2);
      X << 1, 3, 4.5, 60, 7, 9;
      CHECK(ds.X == X);
      CHECK(ds.y == Eigen::Vector3d(2, -5, 8));
      CHECK(ds.feature_names == std::vector<std::string>{"a", "b"});
      CHECK_FALSE(ds.norm.has_value());
    }
    SUBCASE("non-numeric cell reports row and column") {
      const auto p = write_temp("hyvi_bad.csv", "a,y\n1,2\n3,oops\n");
      try {
        (void)load_csv(p, "y");
        FAIL("expected ParseError");
      } catch (const ParseError& e) {
        CHECK(e.row() == 1);
        CHECK(e.col() == 1);
      }
    }
    SUBCASE("ragged row") {
      const auto p = write_temp("hyvi_ragged.csv", "a,y\n1,2\n3\n");
      try {
        (void)load_csv(p, "y");
        FAIL("expected ParseError");
      } catch (const ParseError& e) {
        CHECK(e.row() == 1);
      }
    }
    SUBCASE("missing target") {
      const auto p = write_temp("hyvi_notarget.csv", "a,b\n1,2\n");
      CHECK_THROWS_AS((void)load_csv(p, "y"), ParseError);
    }
    SUBCASE("boston fixture") {
      const Dataset ds = load_csv(std::filesystem::path(HYVI_FIXTURE_DIR) / "boston.csv", "MEDV");
      CHECK(ds.dim() == 13);
      CHECK(ds.size() == 20);
      CHECK(ds.y(0) == 24.0);
      CHECK(ds.X(0, 0) == 0.00632);
    }
  }

  TEST_CASE("full boston: D=13, N=506") {
    const auto p = full_data("boston");
    if (!p) {
      FAIL_CHECK("boston.csv not found in HYVI_DATA_DIR");
      return;
    }
    const Dataset ds = load_csv(*p, "MEDV");
    CHECK(ds.dim() == 13);
    CHECK(ds.size() == 506);
    const auto [train, test] = split_standardize(ds, 0.9, 0);
    CHECK(train.size() == 455);
    CHECK(test.size() == 51);
  }

  TEST_CASE("full concrete: D=8, N=1030") {
    const auto p = full_data("concrete");
    if (!p) {
      FAIL_CHECK("concrete.csv not found in HYVI_DATA_DIR");
      return;
    }
    const Dataset ds = load_csv(*p, "strength");
    CHECK(ds.dim() == 8);
    CHECK(ds.size() == 1030);
  }

  TEST_CASE("split_standardize") {
    Rng rng(4);
    Dataset raw;
    raw.X = 3.0 * standard_normal(rng, 506, 3);
    raw.X.col(1).array() += 10.0;
    raw.y = 2.0 * standard_normal(rng, 506, 1).col(0);
    raw.y.array() += 5.0;
    const auto [train, test] = split_standardize(raw, 0.9, 11);
    CHECK(train.size() == 455);
    CHECK(test.size() == 51);
    REQUIRE(train.norm.has_value());
    for (Index j = 0; j < 3; ++j) {
      const Eigen::VectorXd c = train.X.col(j);
      CHECK(std::abs(c.mean()) < 1e-9);
      CHECK(std::abs(std::sqrt((c.array() - c.mean()).square().mean()) - 1.0) < 1e-9);
    }
    CHECK(std::abs(train.y.mean()) < 1e-9);
    CHECK(std::abs(test.X.col(1).mean()) > 1e-6);
    CHECK(test.norm->x_mean == train.norm->x_mean);

    const auto [train2, test2] = split_standardize(raw, 0.9, 11);
    CHECK(train2.X == train.X);
    CHECK(test2.y == test.y);
    CHECK(split_standardize(raw, 0.9, 12).first.X != train.X);

    // The split is a partition of the original rows.
    Dataset back_train = destandardize(train), back_test = destandardize(test);
    std::multiset<double> seen(back_train.y.data(), back_train.y.data() + back_train.size());
    seen.insert(back_test.y.data(), back_test.y.data() + back_test.size());
    CHECK(seen.size() == 506);
    double total = 0;
    for (double v : seen) total += v;
    CHECK(total == doctest::Approx(raw.y.sum()).epsilon(1e-12));

    Dataset tiny;
    tiny.X = Eigen::MatrixXd::Random(2, 1);
    tiny.y = Eigen::VectorXd::Random(2);
    CHECK_THROWS_AS((void)split_standardize(tiny, 0.9, 0), PreconditionError);
  }

  TEST_CASE("standardize round trip and constant features") {
    Rng rng(5);
    Dataset raw;
    raw.X = 7.0 * standard_normal(rng, 40, 4);
    raw.y = standard_normal(rng, 40, 1).col(0);
    const Dataset s = standardize(raw, compute_norm_stats(raw));
    const Dataset back = destandardize(s);
    CHECK((back.X - raw.X).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back.y - raw.y).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s.X_original() - raw.X).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s.y_original() - raw.y).cwiseAbs().maxCoeff() < 1e-12);
    raw.X.col(2).setConstant(3.0);
    CHECK_THROWS_AS((void)compute_norm_stats(raw), PreconditionError);
  }

  TEST_CASE("hyperrectangle_from") {
    Dataset ds;
    ds.X = Eigen::Vector3d(0, 1, 2);
    ds.y = Eigen::Vector3d(0, 0, 1);
    const InputDistribution nu = hyperrectangle_from(ds);
    CHECK(nu.lower(0) == 0.0);
    CHECK(nu.upper(0) == 2.0);
    const Eigen::MatrixXd s = sample_inputs(nu, 1000, 1);
    for (Index i = 0; i < s.rows(); ++i) CHECK(nu.contains(s.row(i)));

    const Dataset w = make_wave(2);
    const InputDistribution wb = hyperrectangle_from(w);
    CHECK(wb.lower(0) >= -1.0);
    CHECK(wb.lower(0) < -0.95);
    CHECK(wb.upper(0) <= 1.0);
    CHECK(wb.upper(0) > 0.95);
    for (Index i = 0; i < w.size(); ++i) CHECK(wb.contains(w.X.row(i)));
  }

  TEST_CASE("sample_inputs") {
    Eigen::VectorXd lo(3), hi(3);
    lo << -1, 0, 5;
    hi << 1, 10, 5;
    const InputDistribution nu(lo, hi);
    const Index n = 20000;
    const Eigen::MatrixXd s = sample_inputs(nu, n, 8);
    CHECK(s == sample_inputs(nu, n, 8));
    for (Index j = 0; j < 3; ++j) {
      CHECK(s.col(j).minCoeff() >= lo(j));
      CHECK(s.col(j).maxCoeff() <= hi(j));
      const double mid = 0.5 * (lo(j) + hi(j));
      const double se = (hi(j) - lo(j)) / std::sqrt(12.0 * static_cast<double>(n));
      CHECK(std::abs(s.col(j).mean() - mid) <= 3 * se + 1e-15);
    }
    CHECK_THROWS_AS(InputDistribution(hi, lo), PreconditionError);
  }

  TEST_CASE("subsample") {
    const Dataset w = make_wave(0);
    const Dataset s = subsample(w, 50, 3);
    CHECK(s.size() == 50);
    CHECK(subsample(w, 50, 3).X == s.X);
    for (Index i = 0; i < s.size(); ++i) {
      bool found = false;
      for (Index j = 0; j < w.size() && !found; ++j) found = w.X(j, 0) == s.X(i, 0) && w.y(j) == s.y(i);
      CHECK(found);
    }
    CHECK_THROWS_AS((void)subsample(w, 121, 0), PreconditionError);
  }

  TEST_CASE("write_csv round trip") {
    const Dataset w = make_wave(4);
    const auto p = std::filesystem::temp_directory_path() / "hyvi_wave_rt.csv";
    write_csv(p, w, "y");
    const Dataset back = load_csv(p, "y");
    CHECK((back.X - w.X).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.y - w.y).cwiseAbs().maxCoeff() == 0.0);
  }
}
