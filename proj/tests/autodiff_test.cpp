#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <thread>

#include "smar/autodiff.hpp"
#include "smar/error.hpp"
#include "support/oracles.hpp"

using namespace smar;
using smar::testing::max_rel_error;
using smar::testing::numeric_grad;
using smar::testing::random_matrix;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Contracts op output with a fixed random matrix so every output entry
// carries a distinct upstream gradient.
using OpFn = std::function<Tensor(std::vector<Tensor>&)>;

double gradcheck(std::vector<Matrix> inputs, const OpFn& op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> xs;
  for (auto& m : inputs) xs.push_back(Tensor::parameter(m));
  const Tensor probe = op(xs);
  const Tensor weights =
      Tensor::constant(random_matrix(rng, probe.value().rows(), probe.value().cols()));
  auto loss_value = [&] {
    NoGradGuard ng;
    return sum(mul(op(xs), weights)).item();
  };
  backward(sum(mul(op(xs), weights)));
  double worst = 0.0;
  for (auto& x : xs) {
    const Matrix analytic = x.grad() ? *x.grad() : Matrix::Zero(x.rows(), x.cols());
    worst = std::max(worst, max_rel_error(analytic, numeric_grad(x, loss_value)));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul forward") {
  const Tensor eye = Tensor::constant(Matrix::Identity(2, 2));
  const Tensor a = Tensor::constant(mat({{1, 2}, {3, 4}}));
  CHECK(matmul(eye, a).value() == a.value());
  CHECK(matmul(Tensor::scalar(2), Tensor::scalar(3)).item() == 6.0);
  CHECK_THROWS_AS(matmul(a, Tensor::constant(Matrix::Ones(3, 1))), DimensionError);
}

TEST_CASE("matmul identity gradient matches finite differences") {
  const double err = gradcheck({Matrix::Identity(2, 2), mat({{1, 2}, {3, 4}})},
                               [](auto& x) { return matmul(x[0], x[1]); }, 3);
  CHECK(err < 1e-4);
}

TEST_CASE("row_softmax values") {
  const Tensor p = row_softmax(Tensor::constant(Matrix::Zero(1, 4)));
  for (int e = 0; e < 4; ++e) CHECK(p.value()(0, e) == doctest::Approx(0.25).epsilon(1e-15));

  const Tensor q = row_softmax(Tensor::constant(mat({{0.0, std::log(3.0)}})));
  CHECK(q.value()(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(q.value()(0, 1) == doctest::Approx(0.75).epsilon(1e-14));

  std::mt19937_64 rng(11);
  const Tensor r = row_softmax(Tensor::constant(random_matrix(rng, 6, 5, -30, 30)));
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(std::abs(r.value().row(i).sum() - 1.0) < 1e-12);

  Matrix bad = Matrix::Zero(1, 3);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(row_softmax(Tensor::constant(bad)), NumericError);
}

TEST_CASE("row_softmax is stable for large logits") {
  const Tensor p = row_softmax(Tensor::constant(mat({{1000.0, 1000.0}})));
  CHECK(p.value()(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("every primitive matches central differences on random inputs") {
  const std::vector<Index> gather_idx = {2, 0, 2, 1};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed * 7919 + 1);
    auto r = [&](Eigen::Index m, Eigen::Index n) { return random_matrix(rng, m, n); };
    auto pos = [&](Eigen::Index m, Eigen::Index n) { return random_matrix(rng, m, n, 0.5, 2.0); };

    CHECK(gradcheck({r(3, 4), r(4, 2)}, [](auto& x) { return matmul(x[0], x[1]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4), r(3, 4)}, [](auto& x) { return add(x[0], x[1]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4), r(1, 4)}, [](auto& x) { return add(x[0], x[1]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4), r(3, 4)}, [](auto& x) { return sub(x[0], x[1]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return scale(x[0], -1.7); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return add_scalar(x[0], 0.3); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4), r(3, 4)}, [](auto& x) { return mul(x[0], x[1]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4), r(3, 1)}, [](auto& x) { return scale_rows(x[0], x[1]); }, seed) <
          1e-4);
    CHECK(gradcheck({pos(3, 4)}, [](auto& x) { return reciprocal(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return row_sum(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return col_mean(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return sum(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({pos(3, 4)}, [](auto& x) { return log(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return exp(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return relu(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [&](auto& x) { return gather_rows(x[0], gather_idx); }, seed) <
          1e-4);
    CHECK(gradcheck({r(4, 3)}, [&](auto& x) { return scatter_add_rows(x[0], gather_idx, 5); },
                    seed) < 1e-4);
    CHECK(gradcheck({r(3, 4)}, [](auto& x) { return column(x[0], 2); }, seed) < 1e-4);
    CHECK(gradcheck({r(2, 3), r(4, 3)},
                    [](auto& x) {
                      const Tensor parts[] = {x[0], x[1]};
                      return concat_rows(parts);
                    },
                    seed) < 1e-4);
    CHECK(gradcheck({r(3, 5)}, [](auto& x) { return row_softmax(x[0]); }, seed) < 1e-4);
    CHECK(gradcheck({r(3, 5)}, [](auto& x) { return row_log_softmax(x[0]); }, seed) < 1e-4);
  }
}

TEST_CASE("backward seeds 1 and sums into parameters") {
  Tensor w = Tensor::parameter(mat({{1, 2}, {3, 4}}));
  backward(sum(w));
  REQUIRE(w.grad());
  CHECK(*w.grad() == Matrix::Ones(2, 2));
}

TEST_CASE("backward through KL to a constant target matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor a = Tensor::parameter(random_matrix(rng, 1, 6));
  const Tensor target = row_softmax(Tensor::constant(random_matrix(rng, 1, 6)));
  auto kl = [&] {
    const Tensor p = row_softmax(a);
    return sum(mul(p, sub(log(p), log(target))));
  };
  backward(kl());
  const Matrix analytic = *a.grad();
  const Matrix numeric = numeric_grad(a, [&] {
    NoGradGuard ng;
    return kl().item();
  });
  CHECK(max_rel_error(analytic, numeric) < 1e-4);
}

TEST_CASE("detached and constant tensors receive no gradient") {
  Tensor w = Tensor::parameter(mat({{1, -2}, {0.5, 4}}));
  Tensor c = Tensor::constant(mat({{1, 1}, {1, 1}}));
  Tensor loss = sum(mul(add(w, detach(w)), add(c, detach(exp(w)))));
  backward(loss);
  CHECK_FALSE(c.grad());
  REQUIRE(w.grad());
  // Only the non-detached path contributes: d/dw sum(w * (1 + e^w_const)).
  const Matrix expected = (1.0 + w.value().array().exp()).matrix();
  CHECK((*w.grad() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("detach blocks gradient under any downstream loss") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::parameter(random_matrix(rng, 2, 3));
    Tensor y = Tensor::parameter(random_matrix(rng, 2, 3));
    Tensor d = detach(x);
    backward(sum(exp(mul(d, y))));
    CHECK_FALSE(x.grad());
    CHECK(y.grad());
  }
}

TEST_CASE("backward error paths") {
  Tensor w = Tensor::parameter(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(backward(w), DimensionError);

  Tensor loss = sum(mul(w, w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), StateError);

  // A fresh graph over the same parameters is fine and accumulates.
  backward(sum(w));
  CHECK(*w.grad() == Matrix::Constant(2, 2, 3.0));
  w.zero_grad();
  CHECK_FALSE(w.grad());
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor x = Tensor::parameter(mat({{2.0}}));
  Tensor y = mul(x, x);
  backward(add(y, y));
  CHECK((*x.grad())(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Tensor w = Tensor::parameter(Matrix::Ones(2, 2));
  {
    NoGradGuard ng;
    CHECK_FALSE(sum(w).requires_grad());
  }
  CHECK(sum(w).requires_grad());
}

TEST_CASE("distinct graphs run concurrently") {
  auto job = [](std::uint64_t seed, double* out) {
    std::mt19937_64 rng(seed);
    Tensor a = Tensor::parameter(random_matrix(rng, 4, 4));
    for (int i = 0; i < 50; ++i) {
      a.zero_grad();
      backward(sum(row_softmax(matmul(a, a))));
    }
    *out = a.grad()->sum();
  };
  double r1 = 0, r2 = 0, s1 = 0, s2 = 0;
  std::thread t1(job, 1, &r1);
  std::thread t2(job, 2, &r2);
  t1.join();
  t2.join();
  job(1, &s1);
  job(2, &s2);
  CHECK(r1 == s1);
  CHECK(r2 == s2);
}

TEST_CASE("shape errors") {
  const Tensor a = Tensor::constant(Matrix::Ones(2, 3));
  const Tensor b = Tensor::constant(Matrix::Ones(3, 2));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(mul(a, b), DimensionError);
  CHECK_THROWS_AS(scale_rows(a, Tensor::constant(Matrix::Ones(3, 1))), DimensionError);
  const std::vector<Index> bad = {5};
  CHECK_THROWS_AS(gather_rows(a, bad), DimensionError);
  CHECK_THROWS_AS(column(a, 3), DimensionError);
}
