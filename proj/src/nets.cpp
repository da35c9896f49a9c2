#include "hyvi/nets.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace hyvi {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw PreconditionError("unknown activation '" + s + "'");
}

std::string to_string(NoiseMode m) { return m == NoiseMode::fixed ? "fixed" : "learned"; }

NoiseMode noise_mode_from_string(const std::string& s) {
  if (s == "fixed") return NoiseMode::fixed;
  if (s == "learned") return NoiseMode::learned;
  throw PreconditionError("unknown noise mode '" + s + "'");
}

std::vector<LayerSpan> PredictorArch::layers() const {
  std::vector<LayerSpan> out;
  Index fan_in = input_dim;
  Index offset = 0;
  auto push = [&](Index fan_out) {
    out.push_back({fan_in, fan_out, offset, offset + fan_in * fan_out});
    offset += (fan_in + 1) * fan_out;
    fan_in = fan_out;
  };
  for (Index w : hidden_widths) push(w);
  push(output_dim);
  return out;
}

Index PredictorArch::num_params() const {
  Index d = 0;
  Index fan_in = input_dim;
  for (Index w : hidden_widths) {
    d += (fan_in + 1) * w;
    fan_in = w;
  }
  return d + (fan_in + 1) * output_dim;
}

std::string describe(const PredictorArch& arch) {
  std::string s = std::to_string(arch.input_dim) + "-[";
  for (std::size_t i = 0; i < arch.hidden_widths.size(); ++i)
    s += (i ? "," : "") + std::to_string(arch.hidden_widths[i]);
  return s + "]-" + std::to_string(arch.output_dim) + "/" + to_string(arch.activation);
}

namespace {

// tanh(z) = 1 - 2 / (exp(2z) + 1). Vectorises through Eigen's exp (std::tanh does not),
// is exactly 0 at 0 and saturates to +-1 without overflow.
void tanh_inplace(Eigen::MatrixXd& z) { z = (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix(); }

// Forward pass of S draws at once. Hidden activations use a block layout: n x (S * width),
// draw s in columns [s * width, (s + 1) * width). acts[l] is the input of layer l (kept
// only when requested); activation derivatives are recovered from acts in the backward pass.
struct BatchedPass {
  std::vector<Eigen::MatrixXd> acts;
  Eigen::MatrixXd out;  // S x n
};

// Multiplies dA in place by the derivative of the activation whose output is `a`.
void apply_activation_derivative(Activation act, const Eigen::MatrixXd& a, Eigen::MatrixXd& dA) {
  if (act == Activation::tanh)
    dA.array() *= 1.0 - a.array().square();
  else
    dA.array() *= (a.array() > 0.0).cast<double>();
}

BatchedPass batched_forward(const PredictorArch& arch, const RowMat& T, const Eigen::MatrixXd& X, bool keep) {
  const auto spans = arch.layers();
  const std::size_t L = spans.size();
  const Index S = T.rows();
  const Index n = X.rows();
  BatchedPass p;
  if (keep) p.acts.resize(L);
  p.out.resize(S, n);
  Eigen::MatrixXd a;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& sp = spans[l];
    const Eigen::MatrixXd& src = l == 0 ? X : a;
    const auto offset = [&](Index s) { return l == 0 ? Index{0} : s * sp.fan_in; };
    if (l + 1 == L) {
      for (Index s = 0; s < S; ++s) {
        const Eigen::Map<const Eigen::RowVectorXd> w(T.row(s).data() + sp.weight_offset, sp.fan_in);
        p.out.row(s).noalias() = w * src.middleCols(offset(s), sp.fan_in).transpose();
        p.out.row(s).array() += T(s, sp.bias_offset);
      }
      if (keep) p.acts[l] = l == 0 ? X : std::move(a);
      break;
    }
    Eigen::MatrixXd z(n, S * sp.fan_out);
    if (l == 0) {
      // One GEMM for every draw: column s * fan_out + j of Wcat is row j of W_s.
      Eigen::MatrixXd Wcat(sp.fan_in, S * sp.fan_out);
      Eigen::RowVectorXd bcat(S * sp.fan_out);
      for (Index s = 0; s < S; ++s)
        for (Index j = 0; j < sp.fan_out; ++j) {
          const double* row = T.row(s).data() + sp.weight_offset + j * sp.fan_in;
          for (Index k = 0; k < sp.fan_in; ++k) Wcat(k, s * sp.fan_out + j) = row[k];
          bcat(s * sp.fan_out + j) = T(s, sp.bias_offset + j);
        }
      z.noalias() = X * Wcat;
      z.rowwise() += bcat;
    } else {
      for (Index s = 0; s < S; ++s) {
        const Eigen::Map<const RowMat> W(T.row(s).data() + sp.weight_offset, sp.fan_out, sp.fan_in);
        const Eigen::Map<const Eigen::RowVectorXd> b(T.row(s).data() + sp.bias_offset, sp.fan_out);
        auto zs = z.middleCols(s * sp.fan_out, sp.fan_out);
        zs.noalias() = a.middleCols(s * sp.fan_in, sp.fan_in) * W.transpose();
        zs.rowwise() += b;
      }
    }
    if (arch.activation == Activation::tanh)
      tanh_inplace(z);
    else
      z = z.cwiseMax(0.0);
    if (keep) p.acts[l] = l == 0 ? X : std::move(a);
    a = std::move(z);
  }
  return p;
}

// Accumulates d<g, out>/dT into grad (S x d, row-major).
void batched_backward(const PredictorArch& arch, const RowMat& T, const BatchedPass& p, const Eigen::MatrixXd& g,
                      RowMat& grad) {
  const auto spans = arch.layers();
  const std::size_t L = spans.size();
  const Index S = T.rows();
  const Index n = g.cols();
  Eigen::MatrixXd dz;  // gradient w.r.t. the pre-activations of the layer being processed
  {
    const auto& sp = spans[L - 1];
    const Eigen::MatrixXd& A = p.acts[L - 1];
    Eigen::MatrixXd dA;
    if (L > 1) dA.resize(n, S * sp.fan_in);
    for (Index s = 0; s < S; ++s) {
      const Index off = L == 1 ? 0 : s * sp.fan_in;
      Eigen::Map<Eigen::RowVectorXd>(grad.row(s).data() + sp.weight_offset, sp.fan_in).noalias() +=
          g.row(s) * A.middleCols(off, sp.fan_in);
      grad(s, sp.bias_offset) += g.row(s).sum();
      if (L > 1) {
        const Eigen::Map<const Eigen::RowVectorXd> w(T.row(s).data() + sp.weight_offset, sp.fan_in);
        dA.middleCols(off, sp.fan_in).noalias() = g.row(s).transpose() * w;
      }
    }
    if (L > 1) {
      apply_activation_derivative(arch.activation, A, dA);
      dz = std::move(dA);
    }
  }
  for (std::size_t l = L - 1; l-- > 0;) {
    const auto& sp = spans[l];
    if (l == 0) {
      const Eigen::MatrixXd G = p.acts[0].transpose() * dz;  // fan_in x (S * fan_out)
      const Eigen::RowVectorXd gb = dz.colwise().sum();
      for (Index s = 0; s < S; ++s)
        for (Index j = 0; j < sp.fan_out; ++j) {
          double* row = grad.row(s).data() + sp.weight_offset + j * sp.fan_in;
          for (Index k = 0; k < sp.fan_in; ++k) row[k] += G(k, s * sp.fan_out + j);
          grad(s, sp.bias_offset + j) += gb(s * sp.fan_out + j);
        }
      break;
    }
    Eigen::MatrixXd dA(n, S * sp.fan_in);
    for (Index s = 0; s < S; ++s) {
      const auto dzs = dz.middleCols(s * sp.fan_out, sp.fan_out);
      Eigen::Map<RowMat>(grad.row(s).data() + sp.weight_offset, sp.fan_out, sp.fan_in).noalias() +=
          dzs.transpose() * p.acts[l].middleCols(s * sp.fan_in, sp.fan_in);
      Eigen::Map<Eigen::RowVectorXd>(grad.row(s).data() + sp.bias_offset, sp.fan_out) += dzs.colwise().sum();
      const Eigen::Map<const RowMat> W(T.row(s).data() + sp.weight_offset, sp.fan_out, sp.fan_in);
      dA.middleCols(s * sp.fan_in, sp.fan_in).noalias() = dzs * W;
    }
    apply_activation_derivative(arch.activation, p.acts[l], dA);
    dz = std::move(dA);
  }
}

void check_batch_shapes(const char* op, const PredictorArch& arch, Index theta_cols, const Eigen::MatrixXd& X) {
  if (theta_cols != arch.num_params())
    throw ShapeError(op, "thetas(" + std::to_string(theta_cols) + " cols)",
                     "arch(" + std::to_string(arch.num_params()) + " params)");
  if (X.cols() != arch.input_dim)
    throw ShapeError(op, "X(" + std::to_string(X.rows()) + "x" + std::to_string(X.cols()) + ")",
                     "arch(" + std::to_string(arch.input_dim) + " inputs)");
  if (arch.output_dim != 1) throw PreconditionError(std::string(op) + ": batched pass needs output_dim 1");
}

}  // namespace

Eigen::MatrixXd predict_batch(const PredictorArch& arch, const ParamBatch& thetas, const Eigen::MatrixXd& X) {
  check_batch_shapes("predict_batch", arch, thetas.cols(), X);
  Index widest = 1;
  for (Index w : arch.hidden_widths) widest = std::max(widest, w);
  // Bound the block-layout buffers to about 4M doubles.
  const Index chunk = std::max<Index>(1, 4'000'000 / std::max<Index>(1, X.rows() * widest));
  Eigen::MatrixXd out(thetas.rows(), X.rows());
  for (Index s0 = 0; s0 < thetas.rows(); s0 += chunk) {
    const Index m = std::min(chunk, thetas.rows() - s0);
    const RowMat T = thetas.middleRows(s0, m);
    out.middleRows(s0, m) = batched_forward(arch, T, X, false).out;
  }
  return out;
}

ad::Tensor mlp_forward(const PredictorArch& arch, const ad::Tensor& thetas, const Eigen::MatrixXd& X) {
  check_batch_shapes("mlp_forward", arch, thetas.cols(), X);
  RowMat T = thetas.value();
  BatchedPass pass = batched_forward(arch, T, X, true);
  Eigen::MatrixXd out = std::move(pass.out);
  return ad::make_op("mlp_forward", std::move(out), {thetas},
                     [arch, T = std::move(T), pass = std::move(pass)](const Eigen::MatrixXd& g,
                                                                      std::span<Eigen::MatrixXd* const> pg) {
                       RowMat grad = RowMat::Zero(T.rows(), T.cols());
                       batched_backward(arch, T, pass, g, grad);
                       *pg[0] += grad;
                     });
}

ad::Tensor mlp_forward_graph(const PredictorArch& arch, const ad::Tensor& theta, const ad::Tensor& X,
                             const std::vector<Eigen::MatrixXd>& hidden_masks) {
  const Index d = arch.num_params();
  if (theta.size() != d)
    throw ShapeError("mlp_forward_graph", theta.shape_string(), "(" + std::to_string(d) + ")");
  if (X.cols() != arch.input_dim)
    throw ShapeError("mlp_forward_graph", X.shape_string(), "(n x " + std::to_string(arch.input_dim) + ")");
  if (!hidden_masks.empty() && hidden_masks.size() != arch.hidden_widths.size())
    throw PreconditionError("mlp_forward_graph: one mask per hidden layer required");

  const ad::Tensor flat = theta.cols() == 1 ? ad::transpose(theta) : theta;
  const auto spans = arch.layers();
  ad::Tensor act = X;
  for (std::size_t l = 0; l < spans.size(); ++l) {
    const auto& sp = spans[l];
    ad::Tensor W = ad::reshape(ad::slice(flat, 0, sp.weight_offset, 1, sp.fan_in * sp.fan_out),
                               sp.fan_out, sp.fan_in);
    ad::Tensor b = ad::slice(flat, 0, sp.bias_offset, 1, sp.fan_out);
    act = ad::affine(W, b, act);
    if (l + 1 < spans.size()) {
      act = arch.activation == Activation::tanh ? ad::tanh(act) : ad::relu(act);
      if (!hidden_masks.empty()) act = ad::mul(act, ad::Tensor(hidden_masks[l]));
    }
  }
  return act;
}

std::vector<LayerParams> unflatten(const PredictorArch& arch, const ParamVector& theta) {
  if (theta.size() != arch.num_params())
    throw ShapeError("unflatten", std::to_string(theta.size()), std::to_string(arch.num_params()));
  std::vector<LayerParams> out;
  for (const auto& span : arch.layers()) {
    LayerParams l;
    l.W = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        theta.data() + span.weight_offset, span.fan_out, span.fan_in);
    l.b = theta.segment(span.bias_offset, span.fan_out);
    out.push_back(std::move(l));
  }
  return out;
}

ParamVector flatten(const PredictorArch& arch, const std::vector<LayerParams>& layers) {
  const auto spans = arch.layers();
  if (layers.size() != spans.size())
    throw ShapeError("flatten", std::to_string(layers.size()) + " layers", std::to_string(spans.size()) + " layers");
  ParamVector theta(arch.num_params());
  for (std::size_t l = 0; l < spans.size(); ++l) {
    const auto& span = spans[l];
    if (layers[l].W.rows() != span.fan_out || layers[l].W.cols() != span.fan_in || layers[l].b.size() != span.fan_out)
      throw ShapeError("flatten", "layer " + std::to_string(l), "arch");
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        theta.data() + span.weight_offset, span.fan_out, span.fan_in) = layers[l].W;
    theta.segment(span.bias_offset, span.fan_out) = layers[l].b;
  }
  return theta;
}

ParamVector init_params(const PredictorArch& arch, Rng& rng) {
  ParamVector theta = ParamVector::Zero(arch.num_params());
  const auto spans = arch.layers();
  for (std::size_t l = 0; l < spans.size(); ++l) {
    const auto& sp = spans[l];
    const double limit = (arch.activation == Activation::relu && l + 1 < spans.size())
                             ? std::sqrt(6.0 / static_cast<double>(sp.fan_in))
                             : std::sqrt(6.0 / static_cast<double>(sp.fan_in + sp.fan_out));
    theta.segment(sp.weight_offset, sp.fan_in * sp.fan_out) =
        uniform(rng, sp.fan_in * sp.fan_out, 1, -limit, limit);
  }
  return theta;
}

HyperNet HyperNet::initialize(Index param_dim, double prior_variance, Rng& rng, Index noise_dim,
                              std::vector<Index> hidden_widths) {
  HyperNet h;
  h.net = PredictorArch{noise_dim, std::move(hidden_widths), Activation::relu, param_dim};
  h.lambda = ParamVector::Zero(h.net.num_params());
  const auto spans = h.net.layers();
  for (std::size_t l = 0; l < spans.size(); ++l) {
    const auto& sp = spans[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(sp.fan_in));
    const double gain = l + 1 < spans.size() ? 1.0 : 0.01;
    h.lambda.segment(sp.weight_offset, sp.fan_in * sp.fan_out) =
        gain * uniform(rng, sp.fan_in * sp.fan_out, 1, -limit, limit);
    if (l + 1 == spans.size())
      h.lambda.segment(sp.bias_offset, sp.fan_out) =
          std::sqrt(prior_variance) * standard_normal(rng, sp.fan_out, 1);
  }
  return h;
}

ParamBatch hypernet_sample(const HyperNet& h, Index n, std::uint64_t seed) {
  if (n < 1) throw PreconditionError("hypernet_sample: n must be >= 1");
  Rng rng(seed);
  const Eigen::MatrixXd noise = standard_normal(rng, n, h.noise_dim());
  return mlp_forward(h.net, h.lambda, noise);
}

ad::Tensor hypernet_forward(const PredictorArch& hypernet_arch, const ad::Tensor& lambda,
                            const Eigen::MatrixXd& noise) {
  return mlp_forward_graph(hypernet_arch, lambda, ad::Tensor(noise));
}

ParamBatch GaussianPrior::sample(Index dim, Index n, Rng& rng) const {
  return std::sqrt(variance) * standard_normal(rng, n, dim);
}

double GaussianPrior::log_density(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
  const double d = static_cast<double>(theta.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * variance) -
         theta.squaredNorm() / (2.0 * variance);
}

ParamBatch prior_sample(const GaussianPrior& prior, Index dim, Index n, std::uint64_t seed) {
  Rng rng(seed);
  return prior.sample(dim, n, rng);
}

LikelihoodNoise LikelihoodNoise::from_sigma(double sigma, NoiseMode mode) {
  if (!(sigma > 0.0)) throw DomainError("LikelihoodNoise::from_sigma", sigma);
  // inverse softplus; for large sigma expm1 overflows long after log is exact
  const double raw = sigma > 30.0 ? sigma : std::log(std::expm1(sigma));
  return {raw, mode};
}

double gaussian_log_lik(double pred, double y, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("gaussian_log_lik", sigma);
  const double r = y - pred;
  return -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma) - r * r / (2.0 * sigma * sigma);
}

namespace {

constexpr std::array<char, 8> kMagic = {'H', 'Y', 'V', 'I', 'P', 'B', '0', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<unsigned char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes.data()), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!is) throw ParseError("param batch: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_param_batch(const std::filesystem::path& path, const ParamBatch& batch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(kMagic.data(), kMagic.size());
  put_u64(os, static_cast<std::uint64_t>(batch.cols()));
  put_u64(os, static_cast<std::uint64_t>(batch.rows()));
  for (Index i = 0; i < batch.rows(); ++i)
    for (Index j = 0; j < batch.cols(); ++j) put_u64(os, std::bit_cast<std::uint64_t>(batch(i, j)));
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

ParamBatch read_param_batch(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw ParseError("param batch: bad magic in '" + path.string() + "'");
  const auto d = static_cast<Index>(get_u64(is));
  const auto n = static_cast<Index>(get_u64(is));
  ParamBatch batch(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) batch(i, j) = std::bit_cast<double>(get_u64(is));
  return batch;
}

}  // namespace hyvi
