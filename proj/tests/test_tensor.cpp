#include <doctest.h>

#include <cmath>
#include <vector>

#include "ssd/nn.hpp"
#include "ssd/parallel.hpp"
#include "ssd/tensor.hpp"

using namespace ssd;

namespace {

// Brute-force oracles, kept independent of the gemm-backed implementations.

template <typename S>
std::vector<S> naive_matmul(const std::vector<S>& a, const std::vector<S>& b,
                            std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<S> c(static_cast<std::size_t>(m * n), S(0));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p)
        c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

template <typename S>
std::vector<S> naive_conv1d(const std::vector<S>& x, const std::vector<S>& w,
                            std::int64_t cin, std::int64_t len,
                            std::int64_t cout, std::int64_t ksz) {
  const std::int64_t lout = len - ksz + 1;
  std::vector<S> y(static_cast<std::size_t>(cout * lout), S(0));
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t t = 0; t < lout; ++t)
      for (std::int64_t ci = 0; ci < cin; ++ci)
        for (std::int64_t k = 0; k < ksz; ++k)
          y[co * lout + t] += w[(co * cin + ci) * ksz + k] * x[ci * len + t + k];
  return y;
}

template <typename S>
TensorT<S> random_tensor(Shape shape, RngStream::Key key, double lo = -1.0,
                         double hi = 1.0) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  auto v = t.data_mut();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<S>(lo + (hi - lo) * key.uniform64(i));
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and basis selection") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a).bits_equal(a));

  Tensor pick = Tensor::from_data({1, 2}, {1, 0});
  Tensor col = Tensor::from_data({2, 1}, {5, 7});
  Tensor r = matmul(pick, col);
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r.item() == doctest::Approx(5));
}

TEST_CASE("matmul random 3x4 * 4x2 vs triple-loop oracle") {
  RngStream rng(11);
  Tensor a = random_tensor<float>({3, 4}, rng.key(0));
  Tensor b = random_tensor<float>({4, 2}, rng.key(1));
  Tensor c = matmul(a, b);
  auto oracle = naive_matmul<float>(
      {a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()},
      3, 4, 2);
  for (std::size_t i = 0; i < oracle.size(); ++i)
    CHECK(c.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("conv1d kernel of a single one is a truncated identity") {
  Tensor x = Tensor::from_data({1, 6}, {1, 2, 3, 4, 5, 6});
  Tensor w = Tensor::from_data({1, 1, 3}, {1, 0, 0});
  Tensor y = conv1d(x, w);
  CHECK(y.shape() == Shape{1, 4});
  for (int t = 0; t < 4; ++t)
    CHECK(y.data()[static_cast<std::size_t>(t)] ==
          doctest::Approx(static_cast<double>(t + 1)));
}

TEST_CASE("conv1d random 2x16 by 3x2x5 vs sliding-window oracle") {
  RngStream rng(12);
  Tensor x = random_tensor<float>({2, 16}, rng.key(0));
  Tensor w = random_tensor<float>({3, 2, 5}, rng.key(1));
  Tensor y = conv1d(x, w);
  CHECK(y.shape() == Shape{3, 12});
  auto oracle = naive_conv1d<float>(
      {x.data().begin(), x.data().end()}, {w.data().begin(), w.data().end()},
      2, 16, 3, 5);
  for (std::size_t i = 0; i < oracle.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-5));
}

TEST_CASE("conv1d rejects input shorter than the kernel") {
  Tensor x = Tensor::zeros({1, 4});
  Tensor w = Tensor::zeros({1, 1, 9});
  CHECK_THROWS_AS(conv1d(x, w), DimensionError);
}

TEST_CASE("conv1d length-128 kernel-9 chain reproduces the 1664 flatten size") {
  RngStream rng(13);
  auto model = build_har_cnn<float>(0.0, rng);
  Shape s = {1, 9, 128};
  std::vector<Shape> stages;
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    s = model.layer(i).out_shape(s);
    stages.push_back(s);
  }
  CHECK(stages[0] == Shape{1, 32, 120});
  CHECK(stages[2] == Shape{1, 32, 60});
  CHECK(stages[3] == Shape{1, 64, 52});
  CHECK(stages[5] == Shape{1, 64, 26});
  CHECK(stages[6] == Shape{1, 1664});
  CHECK(stages[7] == Shape{1, 1000});
  CHECK(stages[10] == Shape{1, 500});
  CHECK(stages.back() == Shape{1, 6});
}

TEST_CASE("backward: d(x^2)/dx at 3 is 6") {
  Tensor x = Tensor::scalar(3.f);
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad().item() == doctest::Approx(6.0));
}

TEST_CASE("backward: sum(relu(x)) subgradient is 0 at negatives") {
  Tensor x = Tensor::from_data({2}, {-1.f, 2.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(relu(x)));
  }
  CHECK(x.grad().data()[0] == 0.f);
  CHECK(x.grad().data()[1] == 1.f);
}

TEST_CASE("backward contract errors") {
  Tensor x = Tensor::from_data({2}, {1.f, 2.f});
  x.set_requires_grad(true);

  SUBCASE("non-scalar loss") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("detached loss") {
    Tape tape;
    Tensor detached = Tensor::scalar(1.f);
    CHECK_THROWS_AS(tape.backward(detached), GraphError);
  }
  SUBCASE("one backward per tape") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(relu(x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
}

TEST_CASE("requires_grad=false leaves never receive gradients") {
  Tensor x = Tensor::from_data({2}, {1.f, 2.f});
  Tensor w = Tensor::from_data({2}, {3.f, 4.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(add(x, w)));
  }
  CHECK(x.has_grad());
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("grad_check: f(x) = sum(x^3) on [1, 2]") {
  // d/dx sum(x^3) = 3x^2 -> [3, 12]
  TensorT<double> point = TensorT<double>::from_data({2}, {1.0, 2.0});
  auto f = [](const TensorT<double>& x) { return sum(mul(mul(x, x), x)); };

  TensorT<double> x = point.clone();
  x.set_requires_grad(true);
  TapeT<double> tape;
  {
    TapeT<double>::Scope scope(tape);
    tape.backward(f(x));
  }
  CHECK(x.grad().data()[0] == doctest::Approx(3.0));
  CHECK(x.grad().data()[1] == doctest::Approx(12.0));

  auto report = grad_check<double>(f, point, 1e-4, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("grad_check: linear function agrees to rounding") {
  TensorT<double> point = TensorT<double>::from_data({3}, {0.5, -1.5, 2.0});
  auto f = [](const TensorT<double>& x) { return sum(scale(x, 2.5)); };
  auto report = grad_check<double>(f, point, 1e-4, 1e-9);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-9);
}

TEST_CASE("grad_check: random 2-layer dense net in 64-bit passes at 1e-6") {
  RngStream rng(21);
  auto w1 = random_tensor<double>({8, 5}, rng.key(0));
  auto b1 = random_tensor<double>({8}, rng.key(1));
  auto w2 = random_tensor<double>({1, 8}, rng.key(2));
  auto input = random_tensor<double>({4, 5}, rng.key(3), 0.1, 1.0);

  // Check the gradient w.r.t. w1 (flattened), holding everything else fixed.
  auto f = [&](const TensorT<double>& w) {
    TensorT<double> h = relu(linear(input, w, b1));
    TensorT<double> out = linear(h, w2, TensorT<double>{});
    return mse(out, TensorT<double>::zeros({4, 1}));
  };
  auto report = grad_check<double>(f, w1, 1e-4, 1e-6);
  CHECK(report.pass);
  CHECK(report.coords_checked == 40);
}

TEST_CASE("forward and gradients are bit-identical across thread counts") {
  RngStream rng(31);
  auto run = [&](int threads) {
    set_num_threads(threads);
    auto model = build_har_cnn<float>(0.2, rng);
    model.set_trainable(true);
    Tensor batch = random_tensor<float>({4, 9, 128}, rng.key(9));
    std::vector<std::int64_t> ids{0, 1, 2, 3};
    std::vector<int> labels{0, 1, 2, 3};
    Tape tape;
    Tape::Scope scope(tape);
    ForwardCtx ctx{DropoutMode::Train, rng, ids, 0};
    auto fwd = model.forward(batch, ctx);
    auto loss = softmax_cross_entropy(fwd.logits, labels);
    auto grads = tape.backward(loss);
    return std::make_pair(fwd.logits.clone(), std::move(grads));
  };
  auto [logits1, grads1] = run(1);
  auto [logits2, grads2] = run(2);
  set_num_threads(2);
  CHECK(logits1.bits_equal(logits2));
  REQUIRE(grads1.size() == grads2.size());
  for (auto& [name, g] : grads1) CHECK(g.bits_equal(grads2.at(name)));
}

TEST_SUITE_END();
