#include <Eigen/QR>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "hyvi/knn.hpp"

using namespace hyvi;

namespace {

Eigen::MatrixXd gaussian_cloud(Index n, Index dim, std::uint64_t seed, double shift = 0.0, double scale = 1.0) {
  Rng rng(seed);
  Eigen::MatrixXd c = scale * standard_normal(rng, n, dim);
  c.col(0).array() += shift;
  return c;
}

Eigen::MatrixXd col(std::initializer_list<double> v) {
  Eigen::MatrixXd m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Brute-force k-th neighbour distance, written independently of the library.
double brute_kth(const Eigen::MatrixXd& cloud, const Eigen::RowVectorXd& q, int k, Index skip) {
  std::vector<double> d;
  for (Index j = 0; j < cloud.rows(); ++j)
    if (j != skip) d.push_back((cloud.row(j) - q).norm());
  std::sort(d.begin(), d.end());
  return d[static_cast<std::size_t>(k - 1)];
}

double brute_kl(const Eigen::MatrixXd& q, const Eigen::MatrixXd& p, int k) {
  const double n = static_cast<double>(q.rows());
  double acc = 0;
  for (Index i = 0; i < q.rows(); ++i)
    acc += std::log(std::max(brute_kth(p, q.row(i), k, -1), 1e-10)) -
           std::log(std::max(brute_kth(q, q.row(i), k, i), 1e-10));
  return std::log(static_cast<double>(p.rows()) / (n - 1)) + static_cast<double>(q.cols()) / n * acc;
}

Eigen::MatrixXd random_rotation(Index dim, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(standard_normal(rng, dim, dim));
  return qr.householderQ();
}

constexpr double kEulerGamma = 0.57721566490153286;

// Predictors f_theta(x) = c_theta for every input.
knn::CloudMap constant_map(const Eigen::MatrixXd& c) {
  return [c](const Eigen::MatrixXd& X) { return Eigen::MatrixXd(c.replicate(1, X.rows())); };
}

}  // namespace

TEST_SUITE("knn") {
  TEST_CASE("knn_distance examples") {
    const Eigen::MatrixXd cloud = col({0, 1, 3});
    const Eigen::VectorXd origin = Eigen::VectorXd::Zero(1);
    CHECK(knn::knn_distance(cloud, origin, 1, true) == 1.0);
    CHECK(knn::knn_distance(cloud, origin, 2, true) == 3.0);
    CHECK(knn::knn_distance(cloud, origin, 1, false) == 0.0);
    CHECK_THROWS_AS((void)knn::knn_distance(cloud, origin, 3, true), PreconditionError);

    const Eigen::MatrixXd dup = Eigen::MatrixXd::Zero(4, 2);
    const Eigen::VectorXd o2 = Eigen::VectorXd::Zero(2);
    CHECK(knn::knn_distance(dup, o2, 1, true) == 0.0);
    CHECK(knn::clamp_distance(knn::knn_distance(dup, o2, 1, true)) == 1e-10);
    const auto est = knn::entropy_knn_estimate(dup, 1);
    CHECK(est.clamped == 4);
    CHECK(est.degenerate());
    CHECK(est.value == doctest::Approx(std::log(4.0) + kEulerGamma + std::log(std::numbers::pi) + 2 * std::log(1e-10)));
  }

  TEST_CASE("kth_neighbors agrees with brute force, including near ties") {
    Eigen::MatrixXd cloud = gaussian_cloud(300, 3, 5);
    cloud.row(7) = cloud.row(3);  // exact duplicate
    cloud.row(8) = cloud.row(3) + Eigen::RowVectorXd::Constant(3, 1e-13);
    cloud *= 1e4;  // large magnitudes stress the Gram expansion
    for (int k : {1, 2, 5}) {
      const auto nb = knn::kth_neighbors(cloud, cloud, k, true);
      for (Index i = 0; i < cloud.rows(); ++i)
        CHECK(nb[static_cast<std::size_t>(i)].distance == doctest::Approx(brute_kth(cloud, cloud.row(i), k, i)).epsilon(1e-12));
    }
  }

  TEST_CASE("kl_knn hand example") {
    CHECK(knn::kl_knn(col({0, 1}), col({0.5, 1.5}), 1) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
    CHECK_THROWS_AS((void)knn::kl_knn(col({0, 1}), Eigen::MatrixXd::Zero(2, 2), 1), ShapeError);
  }

  TEST_CASE("kl_knn matches a brute-force evaluation of the formula") {
    const Eigen::MatrixXd q = gaussian_cloud(150, 4, 1);
    const Eigen::MatrixXd p = gaussian_cloud(90, 4, 2, 0.5);
    for (int k : {1, 3}) CHECK(knn::kl_knn(q, p, k) == doctest::Approx(brute_kl(q, p, k)).epsilon(1e-12));
  }

  TEST_CASE("kl_knn Monte Carlo oracles") {
    double same = 0, shifted = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
      same += knn::kl_knn(gaussian_cloud(2000, 1, 100 + s), gaussian_cloud(2000, 1, 200 + s), 1);
      shifted += knn::kl_knn(gaussian_cloud(2000, 1, 300 + s), gaussian_cloud(2000, 1, 400 + s, 1.0), 1);
    }
    CHECK(std::abs(same / 50) < 0.05);
    CHECK(std::abs(shifted / 50 - 0.5) < 0.07);
  }

  TEST_CASE("entropy_knn examples") {
    const double expected = std::log(3.0) + kEulerGamma + std::log(2.0) + std::log(2.0) / 3.0;
    CHECK(std::abs(knn::entropy_knn(col({0, 1, 3}), 1) - expected) < 1e-10);
    CHECK(expected == doctest::Approx(2.600).epsilon(1e-3));

    double acc = 0;
    for (std::uint64_t s = 0; s < 50; ++s) acc += knn::entropy_knn(gaussian_cloud(4000, 5, 500 + s), 1);
    CHECK(std::abs(acc / 50 - 2.5 * (1 + std::log(2 * std::numbers::pi))) < 0.1);

    const Eigen::MatrixXd c = gaussian_cloud(300, 3, 9);
    for (double a : {0.5, 3.0})
      CHECK(knn::entropy_knn(a * c, 2) - knn::entropy_knn(c, 2) == doctest::Approx(3 * std::log(a)).epsilon(1e-10));
  }

  TEST_CASE("digamma") {
    CHECK(knn::digamma(1.0) == doctest::Approx(-0.5772156649).epsilon(1e-10));
    CHECK(knn::digamma(2.0) == doctest::Approx(0.4227843351).epsilon(1e-10));
    CHECK(knn::digamma(10.0) == doctest::Approx(2.2517525891).epsilon(1e-10));
    CHECK(knn::digamma(0.5) == doctest::Approx(-kEulerGamma - 2 * std::log(2.0)).epsilon(1e-10));
    // Recurrence across the series switch point.
    for (double x : {0.3, 2.7, 5.5, 6.5, 40.0}) CHECK(knn::digamma(x + 1) - knn::digamma(x) == doctest::Approx(1 / x).epsilon(1e-10));
    CHECK_THROWS_AS((void)knn::digamma(0.0), DomainError);
    CHECK_THROWS_AS((void)knn::digamma(-1.0), DomainError);
  }

  TEST_CASE("log unit ball volume") {
    CHECK(knn::log_unit_ball_volume(1) == doctest::Approx(std::log(2.0)));
    CHECK(knn::log_unit_ball_volume(2) == doctest::Approx(std::log(std::numbers::pi)));
    CHECK(knn::log_unit_ball_volume(3) == doctest::Approx(std::log(4.0 / 3.0 * std::numbers::pi)));
  }

  TEST_CASE("isometry and scale invariance") {
    const Eigen::MatrixXd q = gaussian_cloud(200, 3, 11);
    const Eigen::MatrixXd p = gaussian_cloud(180, 3, 12, 0.7);
    const double base = knn::kl_knn(q, p, 1);
    const Eigen::MatrixXd R = random_rotation(3, 13);
    const Eigen::RowVectorXd t = Eigen::RowVectorXd::LinSpaced(3, -2, 5);
    CHECK(knn::kl_knn(Eigen::MatrixXd((q * R).rowwise() + t), Eigen::MatrixXd((p * R).rowwise() + t), 1) ==
          doctest::Approx(base).epsilon(1e-9));
    CHECK(knn::kl_knn(Eigen::MatrixXd(4.0 * q), Eigen::MatrixXd(4.0 * p), 1) == doctest::Approx(base).epsilon(1e-9));
    CHECK(knn::entropy_knn(Eigen::MatrixXd((q * R).rowwise() + t), 1) == doctest::Approx(knn::entropy_knn(q, 1)).epsilon(1e-9));
  }

  TEST_CASE("estimator bias shrinks with N") {
    // A shift of 3 (KL 4.5) makes the bias large against the Monte Carlo error of 50 seeds.
    std::vector<double> bias;
    for (Index n : {250, 1000, 4000}) {
      double acc = 0;
      for (std::uint64_t s = 0; s < 50; ++s)
        acc += knn::kl_knn(gaussian_cloud(n, 2, 1000 + s), gaussian_cloud(n, 2, 2000 + s, 3.0), 1);
      bias.push_back(std::abs(acc / 50 - 4.5));
    }
    CAPTURE(bias[0]);
    CAPTURE(bias[1]);
    CAPTURE(bias[2]);
    CHECK(bias[0] > bias[1]);
    CHECK(bias[1] > bias[2]);
  }

  TEST_CASE("differentiable kl_knn") {
    const Eigen::MatrixXd q0 = gaussian_cloud(12, 2, 21);
    const Eigen::MatrixXd p0 = gaussian_cloud(15, 2, 22, 0.4);
    const ad::Tensor q(q0), p(p0);
    CHECK(knn::kl_knn(q, p, 1).item() == doctest::Approx(knn::kl_knn(q0, p0, 1)).epsilon(1e-13));
    const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(q0.data(), q0.size());
    const auto fq = [&](const ad::Tensor& t) {
      return knn::kl_knn(ad::transpose(ad::reshape(t, 2, 12)), p, 1);
    };
    // reshape is row-major, so transpose a 2 x 12 view of the column-major data.
    CHECK(ad::finite_difference_check(fq, flat, 1e-6) < 1e-4);
    const Eigen::VectorXd pflat = Eigen::Map<const Eigen::VectorXd>(p0.data(), p0.size());
    const auto fp = [&](const ad::Tensor& t) {
      return knn::kl_knn(q, ad::transpose(ad::reshape(t, 2, 15)), 1);
    };
    CHECK(ad::finite_difference_check(fp, pflat, 1e-6) < 1e-4);
  }

  TEST_CASE("functional_kl of identical clouds is bounded by ln(N/(N-1))") {
    const PredictorArch arch{1, {4}, Activation::tanh, 1};
    const ParamBatch thetas = gaussian_cloud(100, arch.num_params(), 31);
    knn::EvalDesign design{20, 5, InputDistribution(Eigen::VectorXd::Constant(1, -2), Eigen::VectorXd::Constant(1, 2))};
    const auto f = knn::predictor_cloud(arch, thetas);
    CHECK(knn::functional_kl(f, f, design, 1, 4).value <= std::log(100.0 / 99.0) + 1e-12);
  }

  TEST_CASE("functional_kl on constant predictors: ratios of the 1-D clouds, weighted by T") {
    // Constant predictors embed on the diagonal, so every distance scales by sqrt(T) and the
    // neighbour ratios are those of the 1-D clouds; the estimator weights their mean log by dim = T.
    const Eigen::MatrixXd a = gaussian_cloud(300, 1, 41);
    const Eigen::MatrixXd b = gaussian_cloud(250, 1, 42, 0.8);
    const InputDistribution nu(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1));
    const double offset = std::log(250.0 / 299.0);
    const double mean_log_ratio = knn::kl_knn(a, b, 1) - offset;
    for (Index T : {1, 7, 200}) {
      const knn::EvalDesign design{T, 3, nu};
      CHECK(knn::functional_kl(constant_map(a), constant_map(b), design, 1, 5).value ==
            doctest::Approx(offset + static_cast<double>(T) * mean_log_ratio).epsilon(1e-9));
    }
  }

  TEST_CASE("functional_kl on linear families") {
    const Eigen::MatrixXd ta = gaussian_cloud(1000, 1, 51);
    const Eigen::MatrixXd tb = gaussian_cloud(1000, 1, 52, 2.0);
    const InputDistribution nu(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1));
    const knn::EvalDesign design{200, 4, nu};
    // Predictors theta * x: one weight, no bias, identity output.
    const auto linear = [](const Eigen::MatrixXd& th) -> knn::CloudMap {
      return [th](const Eigen::MatrixXd& X) { return Eigen::MatrixXd(th * X.transpose()); };
    };
    const double functional = knn::functional_kl(linear(ta), linear(tb), design, 1, 6).value;
    // Embedding oracle: evaluate each predictor at explicit uniform inputs and run the plain estimator.
    Rng rng(77);
    const Eigen::MatrixXd X = nu.sample(200, rng);
    const double embedded = knn::kl_knn(Eigen::MatrixXd(ta * X.transpose()), Eigen::MatrixXd(tb * X.transpose()), 1);
    // theta * X lies on a line through the origin, so the 1-D ratios carry over with weight T.
    const double offset = std::log(1000.0 / 999.0);
    const double on_theta_scaled = offset + 200.0 * (knn::kl_knn(ta, tb, 1) - offset);
    CHECK(std::abs(functional - on_theta_scaled) < 0.15);
    CHECK(std::abs(embedded - on_theta_scaled) < 0.15);
    CHECK(functional == doctest::Approx(embedded).epsilon(1e-9));
  }

  TEST_CASE("functional_kl ignores the tanh sign-flip symmetry") {
    const PredictorArch arch{1, {6}, Activation::tanh, 1};
    const ParamBatch f = gaussian_cloud(200, arch.num_params(), 61);
    const ParamBatch g = gaussian_cloud(200, arch.num_params(), 62, 0.0, 1.3);
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
    const knn::EvalDesign design{50, 3, InputDistribution(Eigen::VectorXd::Constant(1, -4), Eigen::VectorXd::Constant(1, 2))};
    const double before = knn::functional_kl(knn::predictor_cloud(arch, f), knn::predictor_cloud(arch, g), design, 1, 8).value;
    const double after =
        knn::functional_kl(knn::predictor_cloud(arch, flipped), knn::predictor_cloud(arch, g), design, 1, 8).value;
    CHECK(std::abs(before - after) < 1e-9);
    CHECK(std::abs(knn::kl_knn(f, g, 1) - knn::kl_knn(flipped, g, 1)) > 1e-3);
  }

  TEST_CASE("functional_kl invariant under isometries of both evaluation clouds") {
    const PredictorArch arch{1, {3}, Activation::tanh, 1};
    const ParamBatch f = gaussian_cloud(80, arch.num_params(), 71);
    const ParamBatch g = gaussian_cloud(90, arch.num_params(), 72, 0.5);
    const knn::EvalDesign design{10, 3, InputDistribution(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1))};
    const Eigen::MatrixXd R = random_rotation(10, 73);
    const auto moved = [&](const ParamBatch& th) -> knn::CloudMap {
      const auto base = knn::predictor_cloud(arch, th);
      return [base, R](const Eigen::MatrixXd& X) {
        return Eigen::MatrixXd((base(X) * R).array() + 3.0);
      };
    };
    const double a = knn::functional_kl(knn::predictor_cloud(arch, f), knn::predictor_cloud(arch, g), design, 1, 2).value;
    const double b = knn::functional_kl(moved(f), moved(g), design, 1, 2).value;
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
  }

  TEST_CASE("functional_entropy") {
    const InputDistribution nu(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1));
    SUBCASE("identical predictors are degenerate") {
      const PredictorArch arch{1, {2}, Activation::tanh, 1};
      ParamBatch same = ParamBatch::Ones(30, arch.num_params());
      const knn::EvalDesign design{5, 2, nu};
      const auto e = knn::functional_entropy(knn::predictor_cloud(arch, same), design, 1, 1);
      CHECK(e.degenerate());
      const double floor_value = std::log(30.0) + kEulerGamma + knn::log_unit_ball_volume(5) + 5 * std::log(1e-10) -
                                 0.5 * std::log(5.0);
      CHECK(e.value == doctest::Approx(floor_value).epsilon(1e-12));
    }
    SUBCASE("constant predictors: 1-D spacings embedded in T dimensions") {
      const Eigen::MatrixXd c = gaussian_cloud(400, 1, 81);
      const Index T = 30;
      const knn::EvalDesign design{T, 2, nu};
      double mean_log_r = 0;
      for (Index i = 0; i < c.rows(); ++i) mean_log_r += std::log(brute_kth(c, c.row(i), 1, i));
      mean_log_r /= static_cast<double>(c.rows());
      const double expected = std::log(400.0) + kEulerGamma + knn::log_unit_ball_volume(T) +
                              static_cast<double>(T) * (mean_log_r + 0.5 * std::log(static_cast<double>(T))) -
                              0.5 * std::log(static_cast<double>(T));
      CHECK(knn::functional_entropy(constant_map(c), design, 1, 3).value == doctest::Approx(expected).epsilon(1e-9));
    }
    SUBCASE("wider linear families have larger entropy") {
      const Eigen::MatrixXd th = gaussian_cloud(500, 1, 82);
      const auto linear = [](const Eigen::MatrixXd& t) -> knn::CloudMap {
        return [t](const Eigen::MatrixXd& X) { return Eigen::MatrixXd(t * X.transpose()); };
      };
      const knn::EvalDesign design{50, 3, nu};
      const double narrow = knn::functional_entropy(linear(th), design, 1, 9).value;
      const double wide = knn::functional_entropy(linear(Eigen::MatrixXd(2.5 * th)), design, 1, 9).value;
      CHECK(wide > narrow);
      CHECK(wide - narrow == doctest::Approx(50 * std::log(2.5)).epsilon(1e-9));
    }
  }
}

// Documented examples that read the estimator dimension as the intrinsic dimension of the
// clouds. The estimator uses the ambient dimension T, so these do not hold; kept as written.
TEST_SUITE("knn_intrinsic_dim_examples") {
  TEST_CASE("constant predictors: functional_kl equals kl_knn on the constants for any T") {
    const Eigen::MatrixXd a = gaussian_cloud(300, 1, 41);
    const Eigen::MatrixXd b = gaussian_cloud(250, 1, 42, 0.8);
    const InputDistribution nu(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1));
    const knn::EvalDesign design{200, 3, nu};
    CHECK(knn::functional_kl(constant_map(a), constant_map(b), design, 1, 5).value ==
          doctest::Approx(knn::kl_knn(a, b, 1)).epsilon(1e-9));
  }

  TEST_CASE("constant Gaussian predictors: functional_entropy near the 1-D Gaussian entropy") {
    const Eigen::MatrixXd c = gaussian_cloud(4000, 1, 81);
    const InputDistribution nu(Eigen::VectorXd::Constant(1, -1), Eigen::VectorXd::Constant(1, 1));
    const knn::EvalDesign design{200, 2, nu};
    CHECK(std::abs(knn::functional_entropy(constant_map(c), design, 1, 3).value -
                   0.5 * (1 + std::log(2 * std::numbers::pi))) < 0.15);
  }
}
