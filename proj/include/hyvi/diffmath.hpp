#pragma once

// Define-by-run reverse-mode automatic differentiation over dense Eigen matrices.
//
// Every value is a 2-D matrix; scalars are 1x1 and vectors are either n x 1 or
// 1 x n. Broadcasting is limited to (1x1 scalar with any array) and
// (1 x cols row vector added to every row of a matrix, see add_row).

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hyvi::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Receives the gradient flowing into an op's output and accumulates into the
/// parents' gradients. Entries of `parent_grads` are null for parents that do
/// not require gradients.
using BackwardFn = std::function<void(const Matrix& upstream, std::span<Matrix* const> parent_grads)>;

namespace detail {
struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  std::string op;
  bool requires_grad = false;
};
}  // namespace detail

/// Handle to a node in the computation graph. Copies share the node.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  /// Leaf holding a trainable value.
  static Tensor variable(Matrix value) { return Tensor(std::move(value), true); }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  /// Value of a 1x1 tensor.
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const std::string& op_name() const { return node_->op; }
  std::size_t num_parents() const { return node_->parents.size(); }

  void zero_grad() { node_->grad.setZero(); }
  std::string shape_string() const;

 private:
  friend Tensor make_op(std::string, Matrix, std::vector<Tensor>, BackwardFn);
  friend void backward(const Tensor&);

  std::shared_ptr<detail::Node> node_;
};

/// Records a new op node. Used by the primitives below and by fused ops in other modules.
Tensor make_op(std::string name, Matrix value, std::vector<Tensor> parents, BackwardFn fn);

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires gradients.
/// Leaf gradients accumulate across calls until zero_grad(); interior nodes hold
/// the gradient of the most recent call only. Throws ShapeError unless root is 1x1.
void backward(const Tensor& root);

// Elementwise binary ops; either operand may be a 1x1 scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

Tensor matmul(const Tensor& a, const Tensor& b);
/// Rows of x are samples: returns x * W^T + b with W (out x in) and b (1 x out).
Tensor affine(const Tensor& W, const Tensor& b, const Tensor& x);
/// Adds the 1 x cols row vector r to every row of m.
Tensor add_row(const Tensor& m, const Tensor& r);

Tensor tanh(const Tensor& a);
/// Gradient at exactly zero is zero.
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws DomainError on any entry <= 0.
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
/// Throws DomainError on any entry <= 0.
Tensor sqrt(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column sums, 1 x cols.
Tensor sum_rows(const Tensor& a);
/// Row sums, rows x 1.
Tensor sum_cols(const Tensor& a);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice(const Tensor& a, Index row, Index col, Index rows, Index cols);
/// Reinterprets the entries in row-major order with a new shape.
Tensor reshape(const Tensor& a, Index rows, Index cols);
Tensor transpose(const Tensor& a);

/// Numerically stable softplus on plain values, shared with callers that do not need a graph.
double softplus(double x);

/// Compares the autodiff gradient of f at x against central differences.
/// Returns max_i |g_i - fd_i| / max(|g_i|, |fd_i|, 1e-8); NaN propagates.
/// f receives an x.size() x 1 leaf and must return a 1x1 tensor.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Eigen::VectorXd& x, double step);

}  // namespace hyvi::ad
