#include <doctest.h>

#include <cmath>
#include <random>

#include "docnmt/errors.hpp"
#include "docnmt/ops.hpp"
#include "docnmt/parameters.hpp"
#include "docnmt/tensor.hpp"
#include "support/gradient_check.hpp"

using namespace docnmt;
using Td = Tensor<double>;

namespace {

Td random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1,
                 bool grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(rng);
  return Td({r, c}, v, grad);
}

void check_close(std::span<const double> got, std::initializer_list<double> want, double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  std::size_t i = 0;
  for (double w : want) CHECK(got[i++] == doctest::Approx(w).epsilon(tol));
}

// Central-difference check of a scalar function of one tensor.
double op_gradient_error(Td x, const std::function<Td(const Td&)>& f) {
  x.set_requires_grad(true);
  f(x).backward();
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  double worst = 0;
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    NoGradGuard guard;
    data[i] = saved + 1e-5;
    const double plus = f(x).item();
    data[i] = saved - 1e-5;
    const double minus = f(x).item();
    data[i] = saved;
    worst = std::max(worst, testing::relative_error(analytic[i], (plus - minus) / 2e-5));
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor construction keeps shape and data consistent") {
  const Td m = Td::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(m.shape() == Shape{2, 3});
  CHECK(m.size() == 6);
  CHECK(m(1, 2) == 6);
  CHECK_THROWS_AS(Td({2, 2}, {1, 2, 3}), DimensionError);
  CHECK(Td::zeros({3}).size() == 3);
  CHECK(Td::scalar(4.5).item() == 4.5);
}

TEST_CASE("matmul examples") {
  const Td b = Td::matrix({{1, 2}, {3, 4}});
  check_close(matmul(Td::matrix({{1, 0}, {0, 1}}), b).data(), {1, 2, 3, 4});
  check_close(matmul(Td::matrix({{0, 0}, {0, 0}}), Td::matrix({{5, 6, 7}, {8, 9, 1}})).data(),
              {0, 0, 0, 0, 0, 0});
  check_close(matmul(b, Td::matrix({{5}, {6}})).data(), {17, 39});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Td::zeros({2, 3}), Td::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  check_close(softmax(Td::vector({0, 0}), 0).data(), {0.5, 0.5});
  check_close(softmax(Td::vector({1000, 1000, 1000}), 0).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  check_close(softmax(Td::vector({1, 2, 3}), 0).data(),
              {double(std::exp(1.0L) / z), double(std::exp(2.0L) / z), double(std::exp(3.0L) / z)});
}

TEST_CASE("softmax rows sum to one for random inputs in [-50, 50]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Td x = random_matrix(5, 7, rng, -50, 50);
    for (std::size_t axis : {0u, 1u}) {
      const Td y = softmax(x, axis);
      const std::size_t outer = axis == 0 ? 7 : 5, inner = axis == 0 ? 5 : 7;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += axis == 0 ? y(i, o) : y(o, i);
        CHECK(std::abs(s - 1) < 1e-6);
      }
    }
  }
}

TEST_CASE("softmax rejects non-finite input") {
  CHECK_THROWS_AS(softmax(Td::vector({1, NAN}), 0), NumericError);
  CHECK_THROWS_AS(softmax(Td::vector({1, INFINITY}), 0), NumericError);
}

TEST_CASE("layer_norm examples") {
  const Td ones = Td::vector({1, 1}), zeros = Td::vector({0, 0});
  check_close(layer_norm(Td::matrix({{3}, {3}}), ones, zeros).data(), {0, 0});
  const Td y = layer_norm(Td::matrix({{1}, {-1}}), ones, zeros);
  CHECK(y.data()[0] == doctest::Approx(1 / std::sqrt(1 + 1e-6)).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(-1 / std::sqrt(1 + 1e-6)).epsilon(1e-12));
  const Td g = layer_norm(Td::matrix({{4, -2}, {9, 7}}), zeros, Td::vector({0.5, -3}));
  check_close(g.data(), {0.5, 0.5, -3, -3});
}

TEST_CASE("layer_norm output has zero mean per column with unit gain") {
  std::mt19937_64 rng(5);
  const Td x = random_matrix(6, 4, rng, -10, 10);
  const Td y = layer_norm(x, Td::full({6}, 1.0), Td::zeros({6}));
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0;
    for (std::size_t r = 0; r < 6; ++r) m += y(r, c);
    CHECK(std::abs(m / 6) < 1e-6);
  }
}

TEST_CASE("backward examples") {
  SUBCASE("sum of W x gives x in every row") {
    const Td w = Td::matrix({{1, 2, 3}, {4, 5, 6}}, true);
    const Td x = Td::matrix({{0.5}, {-1}, {2}});
    sum(matmul(w, x)).backward();
    check_close(w.grad(), {0.5, -1, 2, 0.5, -1, 2});
  }
  SUBCASE("disconnected parameter keeps a zero gradient") {
    ParameterSet<double> params;
    Td p = params.create("p", Partition::sentence, {2}, Init::ones);
    Td q = params.create("q", Partition::sentence, {2}, Init::ones);
    sum(mul(p, p)).backward();
    CHECK((!q.has_grad() || (q.grad()[0] == 0 && q.grad()[1] == 0)));
  }
  SUBCASE("p squared at 3") {
    const Td p = Td::scalar(3, true);
    mul(p, p).backward();
    CHECK(p.grad()[0] == 6);
  }
  SUBCASE("non-scalar backward is a contract error") {
    const Td p = Td::vector({1, 2}, true);
    CHECK_THROWS_AS(scale(p, 2.0).backward(), ContractError);
  }
}

TEST_CASE("backward skips tensors that do not require gradients") {
  const Td a = Td::vector({1, 2}, true);
  const Td b = Td::vector({3, 4}, false);
  sum(mul(a, b)).backward();
  check_close(a.grad(), {3, 4});
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("shared subexpressions accumulate gradients") {
  const Td a = Td::vector({2, -1}, true);
  const Td y = add(a, a);
  sum(mul(y, a)).backward();  // sum(2 a^2)
  check_close(a.grad(), {8, -4});
}

TEST_CASE("no-grad mode records no graph") {
  const Td a = Td::vector({1, 2}, true);
  Td y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = sum(mul(a, a));
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(11);
  const Td w = random_matrix(3, 4, rng);
  const Td other = random_matrix(4, 5, rng);
  const Td g1 = Td({4}, {0.5, 1.5, -1, 2});
  const Td b1 = Td({4}, {0.1, -0.2, 0.3, 0});
  const Td weights = random_matrix(4, 5, rng);
  const TokenId targets[] = {0, 2, 1, 3, 0};

  CHECK(op_gradient_error(random_matrix(4, 5, rng), [&](const Td& x) { return sum(matmul(w, x)); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(3, 4, rng),
                          [&](const Td& x) { return sum(mul(matmul(x, other), matmul(x, other))); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng),
                          [&](const Td& x) { return sum(mul(softmax(x, 0), weights)); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng),
                          [&](const Td& x) { return sum(mul(softmax(x, 1), weights)); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng),
                          [&](const Td& x) { return sum(mul(layer_norm(x, g1, b1), weights)); }) < 1e-5);
  CHECK(op_gradient_error(random_matrix(4, 5, rng),
                          [&](const Td& x) { return sum(mul(sigmoid(x), weights)); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng, 0.1, 1),
                          [&](const Td& x) { return sum(mul(relu(x), weights)); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng),
                          [&](const Td& x) { return nll_sum(x, std::span<const TokenId>(targets), 0); }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng), [&](const Td& x) {
          return nll_sum(x, std::span<const TokenId>(targets), 0, 0.1);
        }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng), [&](const Td& x) {
          return sum(mul(transpose(x), transpose(weights)));
        }) < 1e-6);
  CHECK(op_gradient_error(random_matrix(4, 5, rng), [&](const Td& x) {
          return sum(mul(concat_columns<double>({slice_columns(x, 3, 5), slice_columns(x, 0, 3)}), weights));
        }) < 1e-6);
  const Td wide = random_matrix(4, 4, rng);
  CHECK(op_gradient_error(random_matrix(5, 4, rng), [&](const Td& table) {
          const TokenId ids[] = {1, 4, 1, 0};
          return sum(mul(embedding_columns(table, std::span<const TokenId>(ids)), wide));
        }) < 1e-6);
}

TEST_CASE("add_column_bias gradient sums over columns") {
  const Td x = Td::matrix({{1, 2}, {3, 4}}, true);
  const Td b = Td::vector({10, 20}, true);
  const Td y = add_column_bias(x, b);
  check_close(y.data(), {11, 12, 23, 24});
  sum(mul(y, Td::matrix({{1, 2}, {3, 4}}))).backward();
  check_close(b.grad(), {3, 7});
  check_close(x.grad(), {1, 2, 3, 4});
}

TEST_CASE("nll_sum ignores padded targets") {
  const Td logits = Td::matrix({{0, 1, 5}, {0, 2, 7}, {0, 3, 9}});
  const TokenId with_pad[] = {1, 2, 0};
  const TokenId only[] = {1, 2};
  const double full = nll_sum(logits, std::span<const TokenId>(with_pad), 0).item();
  const double cut = nll_sum(slice_columns(logits, 0, 2), std::span<const TokenId>(only), 0).item();
  CHECK(full == doctest::Approx(cut).epsilon(1e-15));
  const TokenId uniform[] = {2};
  CHECK(nll_sum(slice_columns(logits, 0, 1), std::span<const TokenId>(uniform), 0).item() ==
        doctest::Approx(std::log(3.0)));
}

TEST_CASE("dropout keeps expectation and zero rate is identity") {
  std::mt19937_64 rng(1);
  const Td x = Td::full({100, 100}, 1.0);
  const Td same = dropout(x, 0.0, rng);
  CHECK(same.node() == x.node());
  const Td y = dropout(x, 0.25, rng);
  double s = 0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    s += v;
    if (v == 0) ++zeros;
    else CHECK(v == doctest::Approx(1 / 0.75));
  }
  CHECK(s / 10000 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros > 2000);
  CHECK(zeros < 3000);
}

TEST_CASE("replaying a graph is bitwise deterministic") {
  std::mt19937_64 rng(9);
  const Td w = random_matrix(8, 8, rng, -1, 1, true);
  const Td x = random_matrix(8, 5, rng);
  const auto run = [&] {
    const Td y = layer_norm(matmul(w, softmax(matmul(w, x), 0)), Td::full({8}, 1.0), Td::zeros({8}));
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("float tensors work the same way") {
  const Tensor<float> a = Tensor<float>::matrix({{1, 2}, {3, 4}}, true);
  sum(matmul(a, a)).backward();
  CHECK(a.grad().size() == 4);
  CHECK(a.grad()[0] == doctest::Approx(1 + 3 + 1 + 2));
}
