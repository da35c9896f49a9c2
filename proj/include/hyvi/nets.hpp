#pragma once

// Predictor MLPs, the hypernetwork family, the Gaussian prior and likelihood.
//
// Parameter layout (shared by every module that exchanges ParamVectors): layers in
// order from input to output; for each layer the weight matrix (fan_out x fan_in)
// in row-major order, followed by its bias vector (fan_out).

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "hyvi/diffmath.hpp"
#include "hyvi/error.hpp"
#include "hyvi/rng.hpp"

namespace hyvi {

using Index = Eigen::Index;
using ParamVector = Eigen::VectorXd;
/// One parameter draw per row.
using ParamBatch = Eigen::MatrixXd;

enum class Activation { tanh, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct LayerSpan {
  Index fan_in;
  Index fan_out;
  Index weight_offset;
  Index bias_offset;
};

struct PredictorArch {
  Index input_dim = 1;
  std::vector<Index> hidden_widths;
  Activation activation = Activation::tanh;
  Index output_dim = 1;

  /// Sum over layers of (fan_in + 1) * fan_out.
  Index num_params() const;
  std::vector<LayerSpan> layers() const;
  bool operator==(const PredictorArch&) const = default;
};

std::string describe(const PredictorArch& arch);

template <typename Scalar>
Scalar apply_activation(Activation a, Scalar z) {
  using std::tanh;
  return a == Activation::tanh ? tanh(z) : (z > Scalar(0) ? z : Scalar(0));
}

/// Evaluates f_theta on every row of X; returns n x output_dim.
template <typename DerivedTheta, typename DerivedX>
Eigen::Matrix<typename DerivedX::Scalar, Eigen::Dynamic, Eigen::Dynamic> mlp_forward(
    const PredictorArch& arch, const Eigen::MatrixBase<DerivedTheta>& theta,
    const Eigen::MatrixBase<DerivedX>& X) {
  using Scalar = typename DerivedX::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (theta.size() != arch.num_params())
    throw ShapeError("mlp_forward", "theta(" + std::to_string(theta.size()) + ")",
                     "arch(" + std::to_string(arch.num_params()) + ")");
  if (X.cols() != arch.input_dim)
    throw ShapeError("mlp_forward", "X(" + std::to_string(X.cols()) + " cols)",
                     "arch(" + std::to_string(arch.input_dim) + " inputs)");
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> flat = theta.template cast<Scalar>().reshaped();
  const auto spans = arch.layers();
  Mat act = X;
  for (std::size_t l = 0; l < spans.size(); ++l) {
    const auto& s = spans[l];
    const Eigen::Map<const RowMat> W(flat.data() + s.weight_offset, s.fan_out, s.fan_in);
    const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(flat.data() + s.bias_offset,
                                                                        s.fan_out);
    Mat z = act * W.transpose();
    z.rowwise() += b;
    if (l + 1 < spans.size()) z = z.unaryExpr([&](Scalar v) { return apply_activation(arch.activation, v); });
    act = std::move(z);
  }
  return act;
}

/// Predictions of every draw at every input: S x n (requires output_dim == 1).
Eigen::MatrixXd predict_batch(const PredictorArch& arch, const ParamBatch& thetas,
                              const Eigen::MatrixXd& X);

/// Differentiable batched forward pass: thetas (S x d) -> predictions (S x n).
/// Gradients flow to thetas only; X is a constant.
ad::Tensor mlp_forward(const PredictorArch& arch, const ad::Tensor& thetas, const Eigen::MatrixXd& X);

/// Differentiable single-network forward built from primitive ops. theta is a d x 1 or
/// 1 x d tensor; X is n x input_dim; returns n x output_dim. When `hidden_masks` is
/// non-empty it holds one n x width multiplier matrix per hidden layer (dropout).
ad::Tensor mlp_forward_graph(const PredictorArch& arch, const ad::Tensor& theta, const ad::Tensor& X,
                             const std::vector<Eigen::MatrixXd>& hidden_masks = {});

/// Weight matrix (fan_out x fan_in) and bias of one layer.
struct LayerParams {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

/// Splits theta into per-layer weights and biases following the documented layout.
std::vector<LayerParams> unflatten(const PredictorArch& arch, const ParamVector& theta);
/// Inverse of unflatten; exact.
ParamVector flatten(const PredictorArch& arch, const std::vector<LayerParams>& layers);

/// Glorot-uniform (tanh) or He-uniform (relu) weights, zero biases.
ParamVector init_params(const PredictorArch& arch, Rng& rng);

/// Generative network mapping N(0, I_noise_dim) noise to ParamVectors.
/// Hidden layers use relu, the output layer is linear.
struct HyperNet {
  PredictorArch net;  // input = noise_dim, output = predictor parameter count
  ParamVector lambda;

  Index noise_dim() const { return net.input_dim; }
  Index output_dim() const { return net.output_dim; }

  /// He-uniform hidden layers, output weights scaled by 0.01, output bias ~ N(0, prior_variance).
  static HyperNet initialize(Index param_dim, double prior_variance, Rng& rng, Index noise_dim = 5,
                             std::vector<Index> hidden_widths = {20, 40});
};

/// Draws n noise vectors from a fresh engine seeded with `seed` and maps them through h.
ParamBatch hypernet_sample(const HyperNet& h, Index n, std::uint64_t seed);
/// Maps given noise (n x noise_dim) through h with lambda supplied as a graph node (size x 1).
ad::Tensor hypernet_forward(const PredictorArch& hypernet_arch, const ad::Tensor& lambda,
                            const Eigen::MatrixXd& noise);

struct GaussianPrior {
  double variance = 0.5;

  ParamBatch sample(Index dim, Index n, Rng& rng) const;
  double log_density(const Eigen::Ref<const Eigen::VectorXd>& theta) const;
};

ParamBatch prior_sample(const GaussianPrior& prior, Index dim, Index n, std::uint64_t seed);

enum class NoiseMode { fixed, learned };

std::string to_string(NoiseMode m);
NoiseMode noise_mode_from_string(const std::string& s);

/// Observation noise sigma_l = softplus(raw).
struct LikelihoodNoise {
  double raw = 0.0;
  NoiseMode mode = NoiseMode::fixed;

  double sigma() const { return ad::softplus(raw); }
  static LikelihoodNoise from_sigma(double sigma, NoiseMode mode);
};

/// log N(y | pred, sigma^2). Throws DomainError when sigma <= 0.
double gaussian_log_lik(double pred, double y, double sigma);

/// Writes "HYVIPB01", d and n as little-endian uint64, then n*d little-endian doubles (row by row).
void write_param_batch(const std::filesystem::path& path, const ParamBatch& batch);
ParamBatch read_param_batch(const std::filesystem::path& path);

}  // namespace hyvi
