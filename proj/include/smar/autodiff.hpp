#pragma once

// Reverse-mode automatic differentiation over dense 2-D double matrices.
//
// Every op returns a new Tensor whose node remembers its inputs and a
// backward rule. Node ids increase monotonically, so sorting reachable nodes
// by descending id is a valid reverse topological order.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace smar {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::size_t;

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  /// Leaf tensor that accumulates gradients across backward passes.
  static Tensor parameter(Matrix value);
  static Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  Index rows() const;
  Index cols() const;
  const Matrix& value() const;
  /// Mutable access for in-place optimizer updates on leaves.
  Matrix& mutable_value();
  /// Value of a 1x1 tensor.
  double item() const;

  bool requires_grad() const;
  std::uint64_t id() const;
  const std::optional<Matrix>& grad() const;
  void zero_grad();

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Matrix value;
  std::optional<Matrix> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix&)> backward;
};

void accumulate(Node& node, const Matrix& contribution);

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise a + b. `b` may also be a 1 x cols row vector broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul(const Tensor& a, const Tensor& b);
/// Multiplies row i of `a` by s(i, 0); `s` is rows x 1.
Tensor scale_rows(const Tensor& a, const Tensor& s);
Tensor reciprocal(const Tensor& a);

// Reductions.
Tensor row_sum(const Tensor& a);
Tensor col_mean(const Tensor& a);
Tensor sum(const Tensor& a);

// Pointwise.
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);

// Indexing.
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);
/// Inverse of gather_rows: an n_rows x cols tensor with row k of `a` added at rows[k].
Tensor scatter_add_rows(const Tensor& a, std::span<const Index> rows, Index n_rows);
Tensor column(const Tensor& a, Index col);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor detach(const Tensor& a);

// Softmax family, stabilized by row-max subtraction.
Tensor row_softmax(const Tensor& a);
Tensor row_log_softmax(const Tensor& a);

/// Populates gradients of every requires-grad ancestor of a scalar loss.
void backward(const Tensor& loss);

}  // namespace smar
