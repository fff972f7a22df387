#include "smar/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <string>
#include <unordered_set>

#include "smar/error.hpp"

namespace smar {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value()) +
                         " vs " + shape_str(b.value()));
  }
}

std::shared_ptr<detail::Node> new_node(Matrix value) {
  auto node = std::make_shared<detail::Node>();
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->value = std::move(value);
  return node;
}

// Records an op result. The backward rule is only kept when some input
// requires a gradient and recording is enabled.
Tensor record(Matrix value, std::initializer_list<Tensor> inputs,
              std::function<void(const Matrix&)> rule) {
  auto node = new_node(std::move(value));
  node->leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(rule);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace

namespace detail {

void accumulate(Node& node, const Matrix& contribution) {
  if (!node.requires_grad) return;
  if (node.grad) {
    *node.grad += contribution;
  } else {
    node.grad = contribution;
  }
}

}  // namespace detail

Tensor::Tensor(Matrix value, bool requires_grad) : node_(new_node(std::move(value))) {
  node_->requires_grad = requires_grad;
}

Tensor Tensor::parameter(Matrix value) { return Tensor(std::move(value), true); }

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), false);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Index Tensor::rows() const { return static_cast<Index>(node_->value.rows()); }
Index Tensor::cols() const { return static_cast<Index>(node_->value.cols()); }
const Matrix& Tensor::value() const { return node_->value; }
Matrix& Tensor::mutable_value() { return node_->value; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
std::uint64_t Tensor::id() const { return node_->id; }
const std::optional<Matrix>& Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.reset(); }

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw DimensionError("item: expected 1x1, got " + shape_str(value()));
  }
  return node_->value(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " +
                         shape_str(b.value()));
  }
  auto na = a.node();
  auto nb = b.node();
  Matrix out = a.value() * b.value();
  return record(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    if (na->requires_grad) detail::accumulate(*na, g * nb->value.transpose());
    if (nb->requires_grad) detail::accumulate(*nb, na->value.transpose() * g);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto na = a.node();
  auto nb = b.node();
  if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols()) {
    Matrix out = a.value().rowwise() + b.value().row(0);
    return record(std::move(out), {a, b}, [na, nb](const Matrix& g) {
      detail::accumulate(*na, g);
      if (nb->requires_grad) detail::accumulate(*nb, g.colwise().sum());
    });
  }
  require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  return record(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    detail::accumulate(*na, g);
    detail::accumulate(*nb, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto na = a.node();
  auto nb = b.node();
  Matrix out = a.value() - b.value();
  return record(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    detail::accumulate(*na, g);
    if (nb->requires_grad) detail::accumulate(*nb, -g);
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto na = a.node();
  Matrix out = a.value() * factor;
  return record(std::move(out), {a},
                [na, factor](const Matrix& g) { detail::accumulate(*na, g * factor); });
}

Tensor add_scalar(const Tensor& a, double c) {
  auto na = a.node();
  Matrix out = a.value().array() + c;
  return record(std::move(out), {a}, [na](const Matrix& g) { detail::accumulate(*na, g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto na = a.node();
  auto nb = b.node();
  Matrix out = a.value().cwiseProduct(b.value());
  return record(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    if (na->requires_grad) detail::accumulate(*na, g.cwiseProduct(nb->value));
    if (nb->requires_grad) detail::accumulate(*nb, g.cwiseProduct(na->value));
  });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    throw DimensionError("scale_rows: expected " + std::to_string(a.rows()) +
                         "x1 scale, got " + shape_str(s.value()));
  }
  auto na = a.node();
  auto ns = s.node();
  Matrix out = s.value().col(0).asDiagonal() * a.value();
  return record(std::move(out), {a, s}, [na, ns](const Matrix& g) {
    if (na->requires_grad) detail::accumulate(*na, ns->value.col(0).asDiagonal() * g);
    if (ns->requires_grad) {
      Matrix gs = g.cwiseProduct(na->value).rowwise().sum();
      detail::accumulate(*ns, gs);
    }
  });
}

Tensor reciprocal(const Tensor& a) {
  auto na = a.node();
  Matrix out = a.value().cwiseInverse();
  if (!out.allFinite()) throw NumericError("reciprocal: division by zero");
  return record(out, {a}, [na, out](const Matrix& g) {
    detail::accumulate(*na, -g.cwiseProduct(out.cwiseProduct(out)));
  });
}

Tensor row_sum(const Tensor& a) {
  auto na = a.node();
  Matrix out = a.value().rowwise().sum();
  const auto cols = a.value().cols();
  return record(std::move(out), {a}, [na, cols](const Matrix& g) {
    detail::accumulate(*na, g.col(0).replicate(1, cols));
  });
}

Tensor col_mean(const Tensor& a) {
  if (a.rows() == 0) throw DimensionError("col_mean: empty tensor");
  auto na = a.node();
  const auto rows = a.value().rows();
  Matrix out = a.value().colwise().mean();
  return record(std::move(out), {a}, [na, rows](const Matrix& g) {
    detail::accumulate(*na, (g.row(0) / static_cast<double>(rows)).replicate(rows, 1));
  });
}

Tensor sum(const Tensor& a) {
  auto na = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const auto rows = a.value().rows();
  const auto cols = a.value().cols();
  return record(std::move(out), {a}, [na, rows, cols](const Matrix& g) {
    detail::accumulate(*na, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

Tensor log(const Tensor& a) {
  auto na = a.node();
  Matrix out = a.value().array().log().matrix();
  return record(std::move(out), {a}, [na](const Matrix& g) {
    detail::accumulate(*na, g.cwiseQuotient(na->value));
  });
}

Tensor exp(const Tensor& a) {
  auto na = a.node();
  Matrix out = a.value().array().exp().matrix();
  return record(out, {a}, [na, out](const Matrix& g) {
    detail::accumulate(*na, g.cwiseProduct(out));
  });
}

Tensor relu(const Tensor& a) {
  auto na = a.node();
  Matrix out = a.value().cwiseMax(0.0);
  return record(std::move(out), {a}, [na](const Matrix& g) {
    Matrix mask = (na->value.array() > 0.0).cast<double>().matrix();
    detail::accumulate(*na, g.cwiseProduct(mask));
  });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.value().cols());
  for (Index k = 0; k < rows.size(); ++k) {
    if (rows[k] >= a.rows()) throw DimensionError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(static_cast<Eigen::Index>(rows[k]));
  }
  auto na = a.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return record(std::move(out), {a}, [na, idx = std::move(idx)](const Matrix& g) {
    Matrix ga = Matrix::Zero(na->value.rows(), na->value.cols());
    for (Index k = 0; k < idx.size(); ++k) {
      ga.row(static_cast<Eigen::Index>(idx[k])) += g.row(static_cast<Eigen::Index>(k));
    }
    detail::accumulate(*na, ga);
  });
}

Tensor scatter_add_rows(const Tensor& a, std::span<const Index> rows, Index n_rows) {
  if (rows.size() != a.rows()) {
    throw DimensionError("scatter_add_rows: index count differs from row count");
  }
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(n_rows), a.value().cols());
  for (Index k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n_rows) throw DimensionError("scatter_add_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(rows[k])) += a.value().row(static_cast<Eigen::Index>(k));
  }
  auto na = a.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return record(std::move(out), {a}, [na, idx = std::move(idx)](const Matrix& g) {
    Matrix ga(static_cast<Eigen::Index>(idx.size()), g.cols());
    for (Index k = 0; k < idx.size(); ++k) {
      ga.row(static_cast<Eigen::Index>(k)) = g.row(static_cast<Eigen::Index>(idx[k]));
    }
    detail::accumulate(*na, ga);
  });
}

Tensor column(const Tensor& a, Index col) {
  if (col >= a.cols()) throw DimensionError("column: index out of range");
  auto na = a.node();
  const auto c = static_cast<Eigen::Index>(col);
  Matrix out = a.value().col(c);
  return record(std::move(out), {a}, [na, c](const Matrix& g) {
    Matrix ga = Matrix::Zero(na->value.rows(), na->value.cols());
    ga.col(c) = g.col(0);
    detail::accumulate(*na, ga);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto cols = parts.front().value().cols();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column count differs");
    total += p.value().rows();
  }
  Matrix out(total, cols);
  Eigen::Index at = 0;
  bool needs = false;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    out.middleRows(at, p.value().rows()) = p.value();
    at += p.value().rows();
    needs = needs || p.requires_grad();
    nodes.push_back(p.node());
  }
  auto node = new_node(std::move(out));
  node->leaf = false;
  if (needs && g_grad_enabled) {
    node->requires_grad = true;
    node->parents = nodes;
    node->backward = [nodes](const Matrix& g) {
      Eigen::Index offset = 0;
      for (const auto& n : nodes) {
        const auto r = n->value.rows();
        if (n->requires_grad) detail::accumulate(*n, g.middleRows(offset, r));
        offset += r;
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor detach(const Tensor& a) { return Tensor(a.value(), false); }

namespace {

Matrix stable_softmax(const Matrix& x) {
  if (x.hasNaN()) throw NumericError("row_softmax: NaN input");
  Matrix shifted = x.colwise() - x.rowwise().maxCoeff();
  Matrix e = shifted.array().exp().matrix();
  Eigen::VectorXd denom = e.rowwise().sum();
  return denom.cwiseInverse().asDiagonal() * e;
}

}  // namespace

Tensor row_softmax(const Tensor& a) {
  Matrix out = stable_softmax(a.value());
  auto na = a.node();
  return record(out, {a}, [na, out](const Matrix& g) {
    // dx = p * (g - <g, p>) row-wise
    Eigen::VectorXd dot = g.cwiseProduct(out).rowwise().sum();
    Matrix gx = out.cwiseProduct(g.colwise() - dot);
    detail::accumulate(*na, gx);
  });
}

Tensor row_log_softmax(const Tensor& a) {
  const Matrix& x = a.value();
  if (x.hasNaN()) throw NumericError("row_log_softmax: NaN input");
  Matrix shifted = x.colwise() - x.rowwise().maxCoeff();
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix out = shifted.colwise() - lse;
  Matrix probs = out.array().exp().matrix();
  auto na = a.node();
  return record(std::move(out), {a}, [na, probs](const Matrix& g) {
    Eigen::VectorXd gs = g.rowwise().sum();
    Matrix gx = g - probs.cwiseProduct(gs.replicate(1, probs.cols()));
    detail::accumulate(*na, gx);
  });
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw StateError("backward: undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + shape_str(loss.value()));
  }
  const auto& root = loss.node();
  if (root->consumed) throw StateError("backward: graph already back-propagated");
  if (!root->requires_grad) return;

  // Collect every reachable node that participates in differentiation.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.get()};
  std::unordered_set<const detail::Node*> seen{root.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->leaf && n->consumed) throw StateError("backward: graph already back-propagated");
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* x, const detail::Node* y) { return x->id > y->id; });

  for (auto* n : order) {
    if (!n->leaf) n->grad.reset();
  }
  if (root->leaf) {
    detail::accumulate(*root, Matrix::Ones(1, 1));
    return;
  }
  root->grad = Matrix::Ones(1, 1);
  for (auto* n : order) {
    if (n->leaf) continue;
    if (n->backward && n->grad) n->backward(*n->grad);
    n->consumed = true;
  }
}

}  // namespace smar
