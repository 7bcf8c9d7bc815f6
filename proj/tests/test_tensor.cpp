#include <doctest.h>

#include <cstring>

#include "mumt/grad_check.hpp"
#include "mumt/rng.hpp"
#include "mumt/tensor_ops.hpp"

using namespace mumt;
namespace op = mumt::ops;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<S> data(size_t(numel(shape)));
  for (auto& v : data) v = S(rng.uniform(lo, hi));
  return Tensor<S>::from_data(std::move(shape), std::move(data));
}

template <typename S>
void check_values(const Tensor<S>& t, const std::vector<double>& expected, double tol = 1e-6) {
  REQUIRE(t.numel() == int64_t(expected.size()));
  for (size_t i = 0; i < expected.size(); ++i)
    CHECK(double(t.data()[i]) == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul: identity, zero, and hand-expanded cases") {
  auto I = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto A = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
  check_values(op::matmul(I, A), {1, 2, 3, 4});

  auto row = Tensor<float>::from_data({1, 2}, {1, 2});
  auto zeros = Tensor<float>::from_data({2, 1}, {0, 0});
  check_values(op::matmul(row, zeros), {0});

  auto B = Tensor<float>::from_data({2, 1}, {5, 6});
  check_values(op::matmul(A, B), {17, 39});
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 2});
  try {
    op::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul: batched 3d x 3d") {
  Rng rng(7);
  auto a = random_tensor<double>({3, 2, 4}, rng);
  auto b = random_tensor<double>({3, 4, 5}, rng);
  auto c = op::matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 5});
  // Against per-batch 2d products.
  for (int64_t i = 0; i < 3; ++i) {
    auto ai = op::slice(a, 0, i, 1);
    auto bi = op::slice(b, 0, i, 1);
    auto ci = op::matmul(op::reshape(ai, {2, 4}), op::reshape(bi, {4, 5}));
    for (int64_t j = 0; j < 10; ++j)
      CHECK(c.data()[i * 10 + j] == doctest::Approx(ci.data()[j]).epsilon(1e-12));
  }
}

TEST_CASE("softmax: symmetry, stability, hand case, NaN rejection") {
  auto u = op::softmax(Tensor<float>::from_data({3}, {0, 0, 0}), 0);
  check_values(u, {1.0 / 3, 1.0 / 3, 1.0 / 3});

  auto big = op::softmax(Tensor<float>::from_data({3}, {1000, 0, 0}), 0);
  CHECK(double(big.data()[0]) == doctest::Approx(1.0));
  CHECK(double(big.data()[1]) == doctest::Approx(0.0));
  for (float v : big.data()) CHECK(std::isfinite(v));

  auto two = op::softmax(Tensor<float>::from_data({2}, {0.0f, float(std::log(2.0))}), 0);
  check_values(two, {1.0 / 3, 2.0 / 3});

  auto nan = Tensor<float>::from_data({2}, {0.0f, std::nanf("")});
  CHECK_THROWS_AS(op::softmax(nan, 0), NumericError);
}

TEST_CASE("softmax: slices sum to one for magnitudes up to 1e4") {
  Rng rng(11);
  for (int64_t n : {3, 16, 400}) {
    auto x = random_tensor<float>({5, n}, rng, -1e4, 1e4);
    auto y = op::softmax(x, 1);
    for (int64_t r = 0; r < 5; ++r) {
      double s = 0;
      for (int64_t i = 0; i < n; ++i) {
        float v = y.data()[r * n + i];
        CHECK(v >= 0.0f);
        s += double(v);
      }
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward: linear, quadratic, and degenerate losses") {
  auto x = Tensor<float>::from_data({3}, {1, 2, 3}, /*requires_grad=*/true);
  backward(op::sum_all(x));
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{1, 1, 1});

  auto y = Tensor<float>::from_data({3}, {1, 2, 3}, true);
  backward(op::sum_all(op::mul(y, y)));
  CHECK(std::vector<float>(y.grad().begin(), y.grad().end()) == std::vector<float>{2, 4, 6});

  auto c = Tensor<float>::scalar(4.0f);  // constant: no graph
  CHECK_THROWS_AS(backward(c), ValueError);

  auto v = Tensor<float>::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(op::mul(v, v)), ShapeError);  // non-scalar loss
}

TEST_CASE("backward: repeated calls accumulate; reset restores bit-identical grads") {
  auto x = Tensor<float>::from_data({4}, {0.5f, -1.0f, 2.0f, 3.0f}, true);
  auto loss = op::sum_all(op::mul(op::softmax(x, 0), x));
  backward(loss);
  std::vector<float> g1(x.grad().begin(), x.grad().end());

  backward(loss);  // accumulates
  for (size_t i = 0; i < g1.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0f * g1[i]).epsilon(1e-6));

  x.zero_grad();
  backward(loss);
  CHECK(std::memcmp(x.grad().data(), g1.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("backward: diamond graph visits each node once") {
  // z = (x + x) * (x + x) => dz/dx = 8x
  auto x = Tensor<double>::from_data({3}, {1, 2, 3}, true);
  auto y = op::add(x, x);
  backward(op::sum_all(op::mul(y, y)));
  check_values(Tensor<double>::from_data({3}, std::vector<double>(x.grad().begin(), x.grad().end())),
               {8, 16, 24}, 1e-12);
}

TEST_CASE("requires_grad=false tensors never accumulate gradient") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  auto c = Tensor<float>::from_data({2}, {3, 4});  // no grad
  backward(op::sum_all(op::mul(x, c)));
  CHECK(x.has_grad());
  CHECK(!c.has_grad());
}

TEST_CASE("dropping the loss releases intermediate buffers") {
  auto x = Tensor<float>::from_data({8}, std::vector<float>(8, 1.0f), true);
  int64_t before = TensorNode<float>::live_nodes();
  {
    auto loss = op::sum_all(op::relu(op::mul(x, x)));
    backward(loss);
    CHECK(TensorNode<float>::live_nodes() > before);
  }
  CHECK(TensorNode<float>::live_nodes() == before);
}

TEST_CASE("finite_diff_check: exact for linear, tight for quadratic, softmax chain") {
  Rng rng(0);
  auto x = random_tensor<double>({6}, rng);

  auto quad = [](const Tensor<double>& t) { return op::sum_all(op::mul(t, t)); };
  auto r1 = finite_diff_check<double>(quad, x);
  CHECK(r1.pass);
  CHECK(r1.max_rel_err < 1e-6);

  auto lin = [](const Tensor<double>& t) { return op::sum_all(t); };
  auto r2 = finite_diff_check<double>(lin, x);
  CHECK(r2.max_rel_err < 1e-9);

  auto softmax_sq = [](const Tensor<double>& t) {
    auto y = op::softmax(t, 0);
    return op::sum_all(op::mul(y, y));
  };
  auto r3 = finite_diff_check<double>(softmax_sq, x, 1e-5, 1e-4);
  CHECK(r3.pass);
}

TEST_CASE("finite_diff_check: aborts on non-deterministic f") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  int calls = 0;
  auto f = [&calls](const Tensor<double>& t) {
    return op::add_scalar(op::sum_all(t), double(calls++));
  };
  try {
    finite_diff_check<double>(f, x);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("non-deterministic") != std::string::npos);
  }
}

TEST_CASE("gradients of every primitive pass finite differences on 5 seeds") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto check = [&](const char* name, auto f, Tensor<double> x, double tol = 1e-4) {
      auto r = finite_diff_check<double>(std::function<Tensor<double>(const Tensor<double>&)>(f),
                                         x, 1e-5, tol);
      INFO(name << " seed " << seed << " max_rel_err " << r.max_rel_err);
      CHECK(r.pass);
    };

    auto w = random_tensor<double>({4, 3}, rng);
    check("matmul_lhs", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::matmul(t, w), op::matmul(t, w))); },
          random_tensor<double>({2, 4}, rng));
    auto a23 = random_tensor<double>({2, 4}, rng);
    check("matmul_rhs", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::matmul(a23, t), op::matmul(a23, t))); },
          random_tensor<double>({4, 3}, rng));
    auto b3 = random_tensor<double>({2, 3, 5}, rng);
    check("matmul_batched", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::matmul(t, b3), op::matmul(t, b3))); },
          random_tensor<double>({2, 4, 3}, rng));

    auto suffix = random_tensor<double>({4}, rng);
    check("add_suffix", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::add(t, suffix), op::add(t, suffix))); },
          random_tensor<double>({3, 4}, rng));
    check("mul_suffix", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::mul(t, suffix), op::mul(t, suffix))); },
          random_tensor<double>({3, 4}, rng));
    auto other = random_tensor<double>({3, 4}, rng);
    check("mul_rhs_path", [&](const Tensor<double>& t) { return op::sum_all(op::mul(other, op::mul(other, t))); },
          random_tensor<double>({3, 4}, rng));

    check("transpose", [&](const Tensor<double>& t) {
      auto y = op::transpose(t, 0, 2);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({2, 3, 4}, rng));
    check("reshape", [&](const Tensor<double>& t) {
      auto y = op::reshape(t, {6, 2});
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4}, rng));
    check("concat", [&](const Tensor<double>& t) {
      auto y = op::concat(std::vector<Tensor<double>>{t, op::mul(t, t)}, 1);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({2, 3}, rng));
    check("slice", [&](const Tensor<double>& t) {
      auto y = op::slice(t, 1, 1, 2);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 5}, rng));
    check("gather", [&](const Tensor<double>& t) {
      auto y = op::gather(t, 0, {2, 0, 2, 1});
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({4, 3}, rng));

    check("sum_axis", [&](const Tensor<double>& t) {
      auto y = op::sum(t, 1);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4, 2}, rng));
    check("mean_axis", [&](const Tensor<double>& t) {
      auto y = op::mean(t, 0);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4}, rng));

    check("relu", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::relu(t), op::relu(t))); },
          random_tensor<double>({3, 4}, rng, 0.2, 1.0));  // away from the kink
    check("exp", [&](const Tensor<double>& t) { return op::sum_all(op::exp(t)); },
          random_tensor<double>({3, 4}, rng));
    check("log", [&](const Tensor<double>& t) { return op::sum_all(op::mul(op::log(t), op::log(t))); },
          random_tensor<double>({3, 4}, rng, 0.5, 2.0));
    check("softmax_axis0", [&](const Tensor<double>& t) {
      auto y = op::softmax(t, 0);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4}, rng));

    auto gamma = random_tensor<double>({5}, rng, 0.5, 1.5);
    auto beta = random_tensor<double>({5}, rng);
    check("layer_norm_x", [&](const Tensor<double>& t) {
      auto y = op::layer_norm(t, gamma, beta);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({4, 5}, rng));
    auto xln = random_tensor<double>({4, 5}, rng);
    check("layer_norm_gamma", [&](const Tensor<double>& t) {
      auto y = op::layer_norm(xln, t, beta);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({5}, rng, 0.5, 1.5));
    check("layer_norm_beta", [&](const Tensor<double>& t) {
      auto y = op::layer_norm(xln, gamma, t);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({5}, rng));

    check("sigmoid", [&](const Tensor<double>& t) {
      auto y = op::sigmoid(t);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4}, rng, -3.0, 3.0));
    check("log_softmax", [&](const Tensor<double>& t) {
      auto y = op::log_softmax(t, 1);
      return op::sum_all(op::mul(y, y));
    }, random_tensor<double>({3, 4}, rng));
  }
}

TEST_CASE("sigmoid: range and extreme stability") {
  auto x = Tensor<float>::from_data({5}, {-100.0f, -1.0f, 0.0f, 1.0f, 100.0f});
  auto y = op::sigmoid(x);
  CHECK(double(y.data()[0]) == doctest::Approx(0.0));
  CHECK(double(y.data()[2]) == doctest::Approx(0.5));
  CHECK(double(y.data()[4]) == doctest::Approx(1.0));
  for (float v : y.data()) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("no-grad mode builds no graph") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  NoGradGuard ng;
  auto y = op::mul(x, x);
  CHECK(!y.requires_grad());
  CHECK_THROWS_AS(backward(op::sum_all(y)), ValueError);
}
