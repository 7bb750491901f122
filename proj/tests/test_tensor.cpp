#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "thrid/gradcheck.hpp"
#include "thrid/ops.hpp"

using namespace thrid;
using thrid::test::random_tensor;

TEST_CASE("conv2d scaling identity") {
  const Tensor input = Tensor::full(Shape{1, 1, 3, 3}, 1.0f);
  const Tensor kernel(Shape{1, 1, 1, 1}, {2.0f});
  const Tensor out = conv2d<float>(nullptr, input, kernel, nullptr, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.value_at(i) == doctest::Approx(2.0f));
}

TEST_CASE("conv2d 2x2 diagonal kernel matches the direct-summation oracle") {
  const Tensor input(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor kernel(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
  const Tensor out = conv2d<float>(nullptr, input, kernel, nullptr, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.value_at(0) == doctest::Approx(5.0f));  // frozen from the oracle
  const Tensor ref = test::reference_conv2d<float>(input, kernel, nullptr, 1, 0);
  CHECK(out.value_at(0) == doctest::Approx(ref.value_at(0)));
}

TEST_CASE("conv2d same-padding shape rule") {
  Rng rng(11);
  const Tensor input = random_tensor<float>(Shape{1, 1, 4, 4}, rng);
  const Tensor kernel = random_tensor<float>(Shape{1, 1, 3, 3}, rng);
  const Tensor out = conv2d<float>(nullptr, input, kernel, nullptr, 1, 1);
  CHECK(out.shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("conv2d matches the reference on random shapes") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const int N = rng.uniform_int(1, 2), Cin = rng.uniform_int(1, 3);
    const int H = rng.uniform_int(3, 8), W = rng.uniform_int(3, 8);
    const int Cout = rng.uniform_int(1, 3);
    const int kh = rng.uniform_int(1, std::min(3, H)), kw = rng.uniform_int(1, std::min(3, W));
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
    const Tensor input = random_tensor<float>(Shape{N, Cin, H, W}, rng);
    const Tensor kernel = random_tensor<float>(Shape{Cout, Cin, kh, kw}, rng);
    const Tensor bias = random_tensor<float>(Shape{Cout}, rng);
    const Tensor out = conv2d<float>(nullptr, input, kernel, &bias, stride, pad);
    const Tensor ref = test::reference_conv2d<float>(input, kernel, &bias, stride, pad);
    REQUIRE(out.shape() == ref.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(out.value_at(i) == doctest::Approx(ref.value_at(i)).epsilon(1e-4));
    }
  }
}

TEST_CASE("conv2d error cases") {
  const Tensor input = Tensor::zeros(Shape{1, 2, 4, 4});
  const Tensor kernel = Tensor::zeros(Shape{1, 3, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d<float>(nullptr, input, kernel, nullptr, 1, 0),
                       doctest::Contains("channels"), ShapeError);
  const Tensor big_kernel = Tensor::zeros(Shape{1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d<float>(nullptr, input, big_kernel, nullptr, 1, 0), ShapeError);
}

TEST_CASE("conv2d and avg_pool2d output shapes satisfy the closed form (exhaustive sweep)") {
  Rng rng(5);
  for (int H = 1; H <= 8; ++H)
    for (int k = 1; k <= H; ++k)
      for (int stride = 1; stride <= 3; ++stride)
        for (int pad = 0; pad <= 2; ++pad) {
          if (H + 2 * pad < k) continue;
          const int expect = (H + 2 * pad - k) / stride + 1;
          if (expect < 1) continue;
          const Tensor input = random_tensor<float>(Shape{1, 1, H, H}, rng);
          const Tensor kernel = random_tensor<float>(Shape{1, 1, k, k}, rng);
          const Tensor out = conv2d<float>(nullptr, input, kernel, nullptr, stride, pad);
          CHECK(out.shape()[2] == expect);
          CHECK(out.shape()[3] == expect);
          if (pad == 0) {
            const Tensor pooled = avg_pool2d<float>(nullptr, input, k, stride);
            CHECK(pooled.shape()[2] == (H - k) / stride + 1);
          }
        }
}

TEST_CASE("avg_pool2d examples") {
  const Tensor constant = Tensor::full(Shape{1, 1, 4, 4}, 3.25f);
  const Tensor pooled = avg_pool2d<float>(nullptr, constant, 2, 2);
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    CHECK(pooled.value_at(i) == doctest::Approx(3.25f));
  }

  const Tensor quad(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor mean = avg_pool2d<float>(nullptr, quad, 2, 2);
  CHECK(mean.shape() == Shape{1, 1, 1, 1});
  CHECK(mean.value_at(0) == doctest::Approx(2.5f));  // frozen from the oracle
  CHECK(mean.value_at(0) ==
        doctest::Approx(test::reference_avg_pool2d<float>(quad, 2, 2).value_at(0)));

  // global pooling shape rule
  Rng rng(3);
  const Tensor img = random_tensor<float>(Shape{2, 3, 5, 5}, rng);
  const Tensor global = avg_pool2d<float>(nullptr, img, 5, 1);
  CHECK(global.shape() == Shape{2, 3, 1, 1});

  CHECK_THROWS_AS(avg_pool2d<float>(nullptr, quad, 3, 1), ShapeError);
}

TEST_CASE("concat_channels examples and slicing round-trip") {
  Rng rng(7);
  const Tensor a = random_tensor<float>(Shape{2, 16, 3, 3}, rng);
  const Tensor b = random_tensor<float>(Shape{2, 8, 3, 3}, rng);
  const Tensor cat = concat_channels<float>(nullptr, a, b);
  CHECK(cat.shape() == Shape{2, 24, 3, 3});

  const Tensor back_a = slice_channels(cat, 0, 16);
  const Tensor back_b = slice_channels(cat, 16, 24);
  CHECK(std::equal(back_a.values().begin(), back_a.values().end(), a.values().begin()));
  CHECK(std::equal(back_b.values().begin(), back_b.values().end(), b.values().begin()));

  const Tensor empty = Tensor::zeros(Shape{2, 0, 3, 3});
  const Tensor same = concat_channels<float>(nullptr, a, empty);
  CHECK(same.shape() == a.shape());
  CHECK(std::equal(same.values().begin(), same.values().end(), a.values().begin()));

  const Tensor mismatched = Tensor::zeros(Shape{2, 4, 5, 3});
  CHECK_THROWS_AS(concat_channels<float>(nullptr, a, mismatched), ShapeError);
}

TEST_CASE("batch_norm examples") {
  Rng rng(9);
  const int C = 4;
  const Tensor input = random_tensor<float>(Shape{3, C, 5, 5}, rng, -4.0, 7.0);
  Tensor gamma = Tensor::full(Shape{C}, 1.0f);
  Tensor beta = Tensor::zeros(Shape{C});
  Tensor rm = Tensor::zeros(Shape{C});
  Tensor rv = Tensor::full(Shape{C}, 1.0f);

  const Tensor out = batch_norm<float>(nullptr, input, gamma, beta, rm, rv, BnMode::train, 0.9f,
                                       1e-5f);
  for (int c = 0; c < C; ++c) {
    double mean = 0;
    for (int n = 0; n < 3; ++n)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) mean += out.at(n, c, h, w);
    mean /= 75.0;
    CHECK(std::abs(mean) < 1e-5);
  }

  // gamma = 0 collapses to beta
  Tensor gamma0 = Tensor::zeros(Shape{C});
  Tensor beta2 = Tensor::full(Shape{C}, 0.75f);
  Tensor rm2 = Tensor::zeros(Shape{C});
  Tensor rv2 = Tensor::full(Shape{C}, 1.0f);
  const Tensor out2 =
      batch_norm<float>(nullptr, input, gamma0, beta2, rm2, rv2, BnMode::train, 0.9f, 1e-5f);
  for (std::size_t i = 0; i < out2.size(); ++i) CHECK(out2.value_at(i) == doctest::Approx(0.75f));

  // constant input: epsilon guard keeps the output near zero
  const Tensor flat = Tensor::full(Shape{2, C, 3, 3}, 5.0f);
  Tensor rm3 = Tensor::zeros(Shape{C});
  Tensor rv3 = Tensor::full(Shape{C}, 1.0f);
  const Tensor out3 =
      batch_norm<float>(nullptr, flat, gamma, beta, rm3, rv3, BnMode::train, 0.9f, 1e-5f);
  for (std::size_t i = 0; i < out3.size(); ++i) {
    CHECK(std::abs(out3.value_at(i)) < 1e-3f);
  }

  // train mode needs at least two samples per channel
  const Tensor single = Tensor::zeros(Shape{1, C, 1, 1});
  Tensor rm4 = Tensor::zeros(Shape{C});
  Tensor rv4 = Tensor::full(Shape{C}, 1.0f);
  CHECK_THROWS_AS(
      batch_norm<float>(nullptr, single, gamma, beta, rm4, rv4, BnMode::train, 0.9f, 1e-5f),
      ShapeError);
}

TEST_CASE("batch_norm running stats follow the momentum update") {
  Rng rng(13);
  const Tensor input = random_tensor<float>(Shape{2, 1, 4, 4}, rng, 2.0, 6.0);
  Tensor gamma = Tensor::full(Shape{1}, 1.0f);
  Tensor beta = Tensor::zeros(Shape{1});
  Tensor rm = Tensor::zeros(Shape{1});
  Tensor rv = Tensor::full(Shape{1}, 1.0f);
  batch_norm<float>(nullptr, input, gamma, beta, rm, rv, BnMode::train, 0.9f, 1e-5f);

  double mean = 0;
  for (std::size_t i = 0; i < input.size(); ++i) mean += input.value_at(i);
  mean /= static_cast<double>(input.size());
  double var = 0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    var += (input.value_at(i) - mean) * (input.value_at(i) - mean);
  }
  var /= static_cast<double>(input.size());
  CHECK(rm.value_at(0) == doctest::Approx(0.1 * mean).epsilon(1e-4));
  CHECK(rv.value_at(0) == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-4));

  // eval mode leaves them untouched
  const float rm_before = rm.value_at(0);
  batch_norm<float>(nullptr, input, gamma, beta, rm, rv, BnMode::eval, 0.9f, 1e-5f);
  CHECK(rm.value_at(0) == rm_before);
}

TEST_CASE("relu definition and gradient at negatives") {
  const Tensor x(Shape{3}, {-1.0f, 0.0f, 2.0f});
  const Tensor y = relu<float>(nullptr, x);
  CHECK(y.value_at(0) == 0.0f);
  CHECK(y.value_at(1) == 0.0f);
  CHECK(y.value_at(2) == 2.0f);

  const Tensor pos(Shape{3}, {0.5f, 1.0f, 9.0f});
  const Tensor same = relu<float>(nullptr, pos);
  CHECK(std::equal(same.values().begin(), same.values().end(), pos.values().begin()));

  Tape tape;
  Tensor neg(Shape{1}, {-5.0f});
  tape.watch(neg);
  Tensor out = relu(&tape, neg);
  Tensor s = sum(&tape, out);
  tape.backward(s);
  CHECK(tape.grad(neg)[0] == 0.0f);
}

TEST_CASE("linear examples") {
  // identity weight
  const Tensor x(Shape{2, 2}, {1, 2, 3, 4});
  const Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  const Tensor zero_bias = Tensor::zeros(Shape{2});
  const Tensor same = linear<float>(nullptr, x, eye, zero_bias);
  CHECK(std::equal(same.values().begin(), same.values().end(), x.values().begin()));

  // hand matrix-multiply oracle: [1,2] * [[1,-3],[2,0],[0,1]]^T = [-5,2,2]
  const Tensor v(Shape{1, 2}, {1, 2});
  const Tensor w(Shape{3, 2}, {1, -3, 2, 0, 0, 1});
  const Tensor b = Tensor::zeros(Shape{3});
  const Tensor out = linear<float>(nullptr, v, w, b);
  CHECK(out.shape() == Shape{1, 3});
  CHECK(out.value_at(0) == doctest::Approx(-5.0f));
  CHECK(out.value_at(1) == doctest::Approx(2.0f));
  CHECK(out.value_at(2) == doctest::Approx(2.0f));

  const Tensor bad(Shape{1, 3}, {1, 2, 3});
  CHECK_THROWS_AS(linear<float>(nullptr, bad, w, b), ShapeError);
}

TEST_CASE("softmax cross entropy examples") {
  const Tensor uniform(Shape{1, 3}, {0, 0, 0});
  auto out = softmax_cross_entropy<float>(nullptr, uniform, {0});
  CHECK(out.loss.value_at(0) == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  for (int k = 0; k < 3; ++k) {
    CHECK(out.probs.value_at(static_cast<std::size_t>(k)) ==
          doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }

  // confident correct prediction: loss tends to zero
  const Tensor confident(Shape{1, 3}, {20.0f, 0.0f, 0.0f});
  auto small = softmax_cross_entropy<float>(nullptr, confident, {0});
  CHECK(small.loss.value_at(0) < 1e-6f);

  // stability: huge logits stay finite
  const Tensor huge(Shape{1, 3}, {1000.0f, 0.0f, 0.0f});
  auto stable = softmax_cross_entropy<float>(nullptr, huge, {0});
  CHECK(std::isfinite(stable.loss.value_at(0)));
  CHECK(stable.loss.value_at(0) < 1e-6f);

  CHECK_THROWS_AS(softmax_cross_entropy<float>(nullptr, uniform, {3}), ShapeError);
}

TEST_CASE("softmax rows sum to one for large magnitude logits") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 4), k = rng.uniform_int(2, 6);
    const Tensor logits = random_tensor<float>(Shape{n, k}, rng, -1e4, 1e4);
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    auto out = softmax_cross_entropy<float>(nullptr, logits, labels);
    for (int row = 0; row < n; ++row) {
      double total = 0;
      for (int col = 0; col < k; ++col) {
        const float p = out.probs.value_at(static_cast<std::size_t>(row * k + col));
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
        total += p;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward: sum gives all-ones gradient") {
  TapeD tape;
  TensorD x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  tape.watch(x);
  TensorD s = sum(&tape, x);
  tape.backward(s);
  for (double g : tape.grad(x)) CHECK(g == 1.0);
}

TEST_CASE("backward: analytic derivative of sum(x*x)") {
  TapeD tape;
  TensorD x(Shape{3}, {1, 2, 3});
  tape.watch(x);
  TensorD s = sum(&tape, mul(&tape, x, x));
  tape.backward(s);
  const auto g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(2.0));  // frozen from d/dx x^2 = 2x
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("backward: tensors off the loss path get zero gradients") {
  TapeD tape;
  TensorD x(Shape{2}, {1, 2});
  TensorD y(Shape{2}, {3, 4});
  tape.watch(x);
  tape.watch(y);
  TensorD s = sum(&tape, x);
  tape.backward(s);
  for (double g : tape.grad(y)) CHECK(g == 0.0);
}

TEST_CASE("backward: fan-out gradients accumulate by sum") {
  TapeD tape;
  TensorD x(Shape{2}, {1.5, -2.0});
  tape.watch(x);
  TensorD a = mul(&tape, x, x);      // x^2
  TensorD b = add(&tape, x, x);      // 2x
  TensorD s = sum(&tape, add(&tape, a, b));
  tape.backward(s);
  const auto g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(2.0 * 1.5 + 2.0));
  CHECK(g[1] == doctest::Approx(2.0 * -2.0 + 2.0));
}

TEST_CASE("backward errors: non-scalar loss, reuse, foreign tensors") {
  TapeD tape;
  TensorD x(Shape{2}, {1, 2});
  tape.watch(x);
  TensorD y = add(&tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);

  TensorD s = sum(&tape, y);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), Error);

  TensorD stranger(Shape{1}, {0.0});
  CHECK_THROWS_AS(tape.grad(stranger), Error);
}

// ---- finite-difference checks (64-bit) ----

namespace {

double check_conv(Rng& rng, int trials) {
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    const int N = 1, Cin = rng.uniform_int(1, 2);
    const int H = rng.uniform_int(4, 6), W = rng.uniform_int(4, 6);
    const int Cout = rng.uniform_int(1, 2);
    const int k = rng.uniform_int(1, 3);
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
    if (H + 2 * pad < k || W + 2 * pad < k) continue;
    auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{N, Cin, H, W}, rng),
                                       random_tensor<double>(Shape{Cout, Cin, k, k}, rng),
                                       random_tensor<double>(Shape{Cout}, rng)};
    const double err = grad_check(
        [&](TapeD* tape, std::vector<TensorD>& in) {
          return conv2d(tape, in[0], in[1], &in[2], stride, pad);
        },
        inputs, rng);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_CASE("grad_check: conv2d on random 1x2x5x5 inputs") {
  Rng rng(101);
  auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{1, 2, 5, 5}, rng),
                                     random_tensor<double>(Shape{2, 2, 3, 3}, rng),
                                     random_tensor<double>(Shape{2}, rng)};
  const double err = grad_check(
      [](TapeD* tape, std::vector<TensorD>& in) {
        return conv2d(tape, in[0], in[1], &in[2], 1, 1);
      },
      inputs, rng);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check: linear on random 2x4 input") {
  Rng rng(103);
  auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{2, 4}, rng),
                                     random_tensor<double>(Shape{3, 4}, rng),
                                     random_tensor<double>(Shape{3}, rng)};
  const double err = grad_check(
      [](TapeD* tape, std::vector<TensorD>& in) { return linear(tape, in[0], in[1], in[2]); },
      inputs, rng);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check: relu probed away from the kink") {
  Rng rng(105);
  std::vector<double> data(24);
  for (auto& v : data) {
    v = rng.uniform(0.1, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);  // |x| > 0.1
  }
  auto inputs = std::vector<TensorD>{TensorD(Shape{24}, std::move(data))};
  const double err = grad_check(
      [](TapeD* tape, std::vector<TensorD>& in) { return relu(tape, in[0]); }, inputs, rng);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check: every op family stays under 1e-4 over random trials") {
  Rng rng(107);
  CHECK(check_conv(rng, 12) < 1e-4);

  double worst = 0;
  for (int t = 0; t < 12; ++t) {
    const int H = rng.uniform_int(2, 6);
    const int win = rng.uniform_int(1, H);
    auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{1, 2, H, H}, rng)};
    worst = std::max(worst, grad_check(
                                [&](TapeD* tape, std::vector<TensorD>& in) {
                                  return avg_pool2d(tape, in[0], win, 1);
                                },
                                inputs, rng));
  }
  CHECK(worst < 1e-4);

  worst = 0;
  for (int t = 0; t < 12; ++t) {
    auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{2, 3, 4, 4}, rng),
                                       random_tensor<double>(Shape{3}, rng, 0.5, 1.5),
                                       random_tensor<double>(Shape{3}, rng)};
    worst = std::max(
        worst,
        grad_check(
            [&](TapeD* tape, std::vector<TensorD>& in) {
              TensorD rm = TensorD::zeros(Shape{3});
              TensorD rv = TensorD::full(Shape{3}, 1.0);
              return batch_norm(tape, in[0], in[1], in[2], rm, rv,
                                t % 2 == 0 ? BnMode::train : BnMode::eval, 0.9, 1e-5);
            },
            inputs, rng));
  }
  CHECK(worst < 1e-4);

  worst = 0;
  for (int t = 0; t < 12; ++t) {
    auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{2, 2, 3, 3}, rng),
                                       random_tensor<double>(Shape{2, 3, 3, 3}, rng)};
    worst = std::max(worst, grad_check(
                                [](TapeD* tape, std::vector<TensorD>& in) {
                                  return concat_channels(tape, in[0], in[1]);
                                },
                                inputs, rng));
    auto gap = std::vector<TensorD>{random_tensor<double>(Shape{2, 3, 4, 4}, rng)};
    worst = std::max(worst, grad_check(
                                [](TapeD* tape, std::vector<TensorD>& in) {
                                  return global_avg_pool(tape, in[0]);
                                },
                                gap, rng));
  }
  CHECK(worst < 1e-4);

  worst = 0;
  for (int t = 0; t < 12; ++t) {
    auto inputs = std::vector<TensorD>{random_tensor<double>(Shape{3, 4}, rng)};
    worst = std::max(worst, grad_check(
                                [](TapeD* tape, std::vector<TensorD>& in) {
                                  return softmax_cross_entropy(tape, in[0], {0, 2, 1}).loss;
                                },
                                inputs, rng));
  }
  CHECK(worst < 1e-4);
}
