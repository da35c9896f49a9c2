#include "hyvi/diffmath.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "hyvi/error.hpp"

namespace hyvi::ad {

namespace {

std::string shape_of(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

void require_same_or_scalar(const char* op, const Tensor& a, const Tensor& b) {
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  if (!same && !is_scalar(a.value()) && !is_scalar(b.value()))
    throw ShapeError(op, a.shape_string(), b.shape_string());
}

// Reduces an upstream gradient to the operand's shape (sum when the operand was broadcast).
void accumulate(Matrix* target, const Matrix& g) {
  if (!target) return;
  if (target->rows() == g.rows() && target->cols() == g.cols())
    *target += g;
  else
    (*target)(0, 0) += g.sum();
}

// Applies a binary op with scalar broadcasting.
template <typename F>
Matrix broadcast(const Matrix& a, const Matrix& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return a.binaryExpr(b, f);
  if (is_scalar(a)) {
    const double s = a(0, 0);
    return b.unaryExpr([&](double v) { return f(s, v); });
  }
  const double s = b(0, 0);
  return a.unaryExpr([&](double v) { return f(v, s); });
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

}  // namespace

Tensor::Tensor() : Tensor(Matrix::Zero(1, 1), false) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->grad = Matrix::Zero(value.rows(), value.cols());
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->op = "leaf";
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Matrix::Constant(1, 1, v), requires_grad);
}

double Tensor::item() const {
  if (!is_scalar(node_->value)) throw ShapeError("item", shape_string(), "(1x1)");
  return node_->value(0, 0);
}

std::string Tensor::shape_string() const { return shape_of(node_->value); }

Tensor make_op(std::string name, Matrix value, std::vector<Tensor> parents, BackwardFn fn) {
  Tensor out(std::move(value), false);
  auto& node = *out.node_;
  node.op = std::move(name);
  for (const auto& p : parents) {
    node.requires_grad = node.requires_grad || p.requires_grad();
    node.parents.push_back(p.node_);
  }
  if (node.requires_grad) node.backward = std::move(fn);
  return out;
}

void backward(const Tensor& root) {
  if (!is_scalar(root.value())) throw ShapeError("backward", root.shape_string(), "(1x1)");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS over nodes that require gradients.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node_.get(), 0);
  visited.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order)
    if (!node->parents.empty()) node->grad.setZero();
  root.node_->grad(0, 0) += 1.0;

  std::vector<Matrix*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->parents.empty() || !node->backward) continue;
    parent_grads.clear();
    for (const auto& p : node->parents) parent_grads.push_back(p->requires_grad ? &p->grad : nullptr);
    node->backward(node->grad, parent_grads);
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_or_scalar("add", a, b);
  return make_op("add", broadcast(a.value(), b.value(), [](double x, double y) { return x + y; }),
                 {a, b}, [](const Matrix& g, std::span<Matrix* const> pg) {
                   accumulate(pg[0], g);
                   accumulate(pg[1], g);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_or_scalar("sub", a, b);
  return make_op("sub", broadcast(a.value(), b.value(), [](double x, double y) { return x - y; }),
                 {a, b}, [](const Matrix& g, std::span<Matrix* const> pg) {
                   accumulate(pg[0], g);
                   accumulate(pg[1], -g);
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_or_scalar("mul", a, b);
  Matrix av = a.value(), bv = b.value();
  Matrix out = broadcast(av, bv, [](double x, double y) { return x * y; });
  const Index r = out.rows(), c = out.cols();
  return make_op("mul", std::move(out), {a, b},
                 [av = std::move(av), bv = std::move(bv), r, c](const Matrix& g,
                                                                std::span<Matrix* const> pg) {
                   if (pg[0]) accumulate(pg[0], g.cwiseProduct(expand(bv, r, c)));
                   if (pg[1]) accumulate(pg[1], g.cwiseProduct(expand(av, r, c)));
                 });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_or_scalar("div", a, b);
  Matrix av = a.value(), bv = b.value();
  Matrix out = broadcast(av, bv, [](double x, double y) { return x / y; });
  const Index r = out.rows(), c = out.cols();
  return make_op("div", std::move(out), {a, b},
                 [av = std::move(av), bv = std::move(bv), r, c](const Matrix& g,
                                                                std::span<Matrix* const> pg) {
                   const Matrix be = expand(bv, r, c);
                   if (pg[0]) accumulate(pg[0], g.cwiseQuotient(be));
                   if (pg[1]) {
                     const Matrix ae = expand(av, r, c);
                     accumulate(pg[1], -g.cwiseProduct(ae).cwiseQuotient(be.cwiseProduct(be)));
                   }
                 });
}

Tensor scale(const Tensor& a, double c) {
  return make_op("scale", a.value() * c, {a},
                 [c](const Matrix& g, std::span<Matrix* const> pg) { *pg[0] += c * g; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return make_op("add_scalar", (a.value().array() + c).matrix(), {a},
                 [](const Matrix& g, std::span<Matrix* const> pg) { *pg[0] += g; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape_string(), b.shape_string());
  Matrix av = a.value(), bv = b.value();
  Matrix out = av * bv;
  return make_op("matmul", std::move(out), {a, b},
                 [av = std::move(av), bv = std::move(bv)](const Matrix& g,
                                                          std::span<Matrix* const> pg) {
                   if (pg[0]) pg[0]->noalias() += g * bv.transpose();
                   if (pg[1]) pg[1]->noalias() += av.transpose() * g;
                 });
}

Tensor affine(const Tensor& W, const Tensor& b, const Tensor& x) {
  if (x.cols() != W.cols()) throw ShapeError("affine", W.shape_string(), x.shape_string());
  if (b.rows() != 1 || b.cols() != W.rows())
    throw ShapeError("affine", W.shape_string(), b.shape_string());
  Matrix Wv = W.value(), xv = x.value();
  Matrix out = xv * Wv.transpose();
  out.rowwise() += b.value().row(0);
  return make_op("affine", std::move(out), {W, b, x},
                 [Wv = std::move(Wv), xv = std::move(xv)](const Matrix& g,
                                                          std::span<Matrix* const> pg) {
                   if (pg[0]) pg[0]->noalias() += g.transpose() * xv;
                   if (pg[1]) *pg[1] += g.colwise().sum();
                   if (pg[2]) pg[2]->noalias() += g * Wv;
                 });
}

Tensor add_row(const Tensor& m, const Tensor& r) {
  if (r.rows() != 1 || r.cols() != m.cols())
    throw ShapeError("add_row", m.shape_string(), r.shape_string());
  Matrix out = m.value();
  out.rowwise() += r.value().row(0);
  return make_op("add_row", std::move(out), {m, r},
                 [](const Matrix& g, std::span<Matrix* const> pg) {
                   if (pg[0]) *pg[0] += g;
                   if (pg[1]) *pg[1] += g.colwise().sum();
                 });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  Matrix deriv = (1.0 - out.array().square()).matrix();
  return make_op("tanh", std::move(out), {a},
                 [deriv = std::move(deriv)](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += g.cwiseProduct(deriv);
                 });
}

Tensor relu(const Tensor& a) {
  Matrix av = a.value();
  Matrix out = av.cwiseMax(0.0);
  return make_op("relu", std::move(out), {a},
                 [av = std::move(av)](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += (av.array() > 0.0).select(g, 0.0).matrix();
                 });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  Matrix saved = out;
  return make_op("exp", std::move(out), {a},
                 [saved = std::move(saved)](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += g.cwiseProduct(saved);
                 });
}

Tensor log(const Tensor& a) {
  const double lo = a.value().minCoeff();
  if (!(lo > 0.0)) throw DomainError("log", lo);
  Matrix av = a.value();
  return make_op("log", av.array().log().matrix(), {a},
                 [av](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += g.cwiseQuotient(av);
                 });
}

double softplus(double x) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tensor softplus(const Tensor& a) {
  Matrix av = a.value();
  Matrix out = av.unaryExpr([](double x) { return softplus(x); });
  return make_op("softplus", std::move(out), {a},
                 [av = std::move(av)](const Matrix& g, std::span<Matrix* const> pg) {
                   const Matrix sig = av.unaryExpr([](double x) {
                     return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                   });
                   *pg[0] += g.cwiseProduct(sig);
                 });
}

Tensor square(const Tensor& a) {
  Matrix av = a.value();
  Matrix out = av.array().square().matrix();
  return make_op("square", std::move(out), {a},
                 [av = std::move(av)](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += 2.0 * g.cwiseProduct(av);
                 });
}

Tensor sqrt(const Tensor& a) {
  const double lo = a.value().minCoeff();
  if (!(lo > 0.0)) throw DomainError("sqrt", lo);
  Matrix out = a.value().array().sqrt().matrix();
  Matrix saved = out;
  return make_op("sqrt", std::move(out), {a},
                 [saved = std::move(saved)](const Matrix& g, std::span<Matrix* const> pg) {
                   *pg[0] += 0.5 * g.cwiseQuotient(saved);
                 });
}

Tensor sum(const Tensor& a) {
  return make_op("sum", Matrix::Constant(1, 1, a.value().sum()), {a},
                 [](const Matrix& g, std::span<Matrix* const> pg) { pg[0]->array() += g(0, 0); });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  return make_op("mean", Matrix::Constant(1, 1, a.value().mean()), {a},
                 [n](const Matrix& g, std::span<Matrix* const> pg) { pg[0]->array() += g(0, 0) / n; });
}

Tensor sum_rows(const Tensor& a) {
  return make_op("sum_rows", a.value().colwise().sum(), {a},
                 [](const Matrix& g, std::span<Matrix* const> pg) {
                   pg[0]->rowwise() += g.row(0);
                 });
}

Tensor sum_cols(const Tensor& a) {
  return make_op("sum_cols", a.value().rowwise().sum(), {a},
                 [](const Matrix& g, std::span<Matrix* const> pg) {
                   pg[0]->colwise() += g.col(0);
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw PreconditionError("concat_rows: no operands");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows", parts.front().shape_string(), p.shape_string());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op("concat_rows", std::move(out), {parts.begin(), parts.end()},
                 [offsets](const Matrix& g, std::span<Matrix* const> pg) {
                   for (std::size_t i = 0; i < pg.size(); ++i)
                     if (pg[i]) *pg[i] += g.middleRows(offsets[i], pg[i]->rows());
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw PreconditionError("concat_cols: no operands");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols", parts.front().shape_string(), p.shape_string());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op("concat_cols", std::move(out), {parts.begin(), parts.end()},
                 [offsets](const Matrix& g, std::span<Matrix* const> pg) {
                   for (std::size_t i = 0; i < pg.size(); ++i)
                     if (pg[i]) *pg[i] += g.middleCols(offsets[i], pg[i]->cols());
                 });
}

Tensor slice(const Tensor& a, Index row, Index col, Index rows, Index cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > a.rows() || col + cols > a.cols())
    throw ShapeError("slice", a.shape_string(),
                     "[" + std::to_string(row) + "+" + std::to_string(rows) + ", " +
                         std::to_string(col) + "+" + std::to_string(cols) + "]");
  return make_op("slice", a.value().block(row, col, rows, cols), {a},
                 [row, col, rows, cols](const Matrix& g, std::span<Matrix* const> pg) {
                   pg[0]->block(row, col, rows, cols) += g;
                 });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  if (rows * cols != a.size())
    throw ShapeError("reshape", a.shape_string(),
                     "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor src = a.value();
  Matrix out = Eigen::Map<const RowMajor>(src.data(), rows, cols);
  const Index in_rows = a.rows(), in_cols = a.cols();
  return make_op("reshape", std::move(out), {a},
                 [in_rows, in_cols](const Matrix& g, std::span<Matrix* const> pg) {
                   const RowMajor gr = g;
                   *pg[0] += Eigen::Map<const RowMajor>(gr.data(), in_rows, in_cols);
                 });
}

Tensor transpose(const Tensor& a) {
  return make_op("transpose", a.value().transpose(), {a},
                 [](const Matrix& g, std::span<Matrix* const> pg) { *pg[0] += g.transpose(); });
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Eigen::VectorXd& x, double step) {
  Tensor leaf = Tensor::variable(x);
  Tensor out = f(leaf);
  backward(out);
  const Eigen::VectorXd analytic = leaf.grad().col(0);

  double worst = 0.0;
  Eigen::VectorXd probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + step;
    const double up = f(Tensor(probe)).item();
    probe(i) = x(i) - step;
    const double down = f(Tensor(probe)).item();
    probe(i) = x(i);
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic(i) - numeric) / denom;
    if (std::isnan(err)) return std::numeric_limits<double>::quiet_NaN();
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hyvi::ad
