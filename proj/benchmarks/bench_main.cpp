#include <benchmark/benchmark.h>

#include "thrid/dataset.hpp"
#include "thrid/densenet.hpp"
#include "thrid/ops.hpp"
#include "thrid/phantom.hpp"
#include "thrid/rng.hpp"
#include "thrid/saliency.hpp"

namespace {

using namespace thrid;

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<float> data(shape.numel());
  for (auto& v : data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor(shape, std::move(data));
}

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  const int C = static_cast<int>(state.range(0));
  const int S = static_cast<int>(state.range(1));
  const Tensor input = random_tensor(Shape{5, C, S, S}, rng);
  const Tensor kernel = random_tensor(Shape{12, C, 3, 3}, rng);
  const Tensor bias = random_tensor(Shape{12}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d<float>(nullptr, input, kernel, &bias, 1, 1));
  }
  const double macs = 2.0 * 5 * 12 * C * 9 * S * S;
  state.counters["GFLOP/s"] =
      benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::OneK::kIs1000);
}
BENCHMARK(BM_Conv2dForward)->Args({64, 96})->Args({136, 48})->Args({40, 24});

void BM_Conv2dTrainStep(benchmark::State& state) {
  Rng rng(2);
  const Tensor input = random_tensor(Shape{5, 64, 48, 48}, rng);
  for (auto _ : state) {
    Tape tape;
    Tensor kernel = random_tensor(Shape{12, 64, 3, 3}, rng);
    Tensor bias = random_tensor(Shape{12}, rng);
    Tensor x = input;
    tape.watch(x);
    tape.watch(kernel);
    tape.watch(bias);
    Tensor y = conv2d(&tape, x, kernel, &bias, 1, 1);
    Tensor s = sum(&tape, y);
    tape.backward(s);
    benchmark::DoNotOptimize(tape.grad(kernel));
  }
}
BENCHMARK(BM_Conv2dTrainStep);

void BM_DenseNetForward(benchmark::State& state) {
  Rng rng(3);
  DenseNet net{NetworkSpec{}};
  net.init_weights(7);
  const Tensor x = random_tensor(Shape{1, 1, 96, 96}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.forward(nullptr, x, false));
  }
}
BENCHMARK(BM_DenseNetForward);

void BM_DenseNetTrainStep(benchmark::State& state) {
  Rng rng(4);
  DenseNet net{NetworkSpec{}};
  net.init_weights(7);
  const Tensor x = random_tensor(Shape{5, 1, 96, 96}, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1};
  const auto names = net.trainable_names();
  for (auto _ : state) {
    Tape tape;
    for (const auto& name : names) tape.watch(net.state.at(name));
    Tensor logits = net.forward(&tape, x, true);
    auto ce = softmax_cross_entropy(&tape, logits, labels);
    tape.backward(ce.loss);
    benchmark::DoNotOptimize(tape.grad(net.state.at("head.weight")));
  }
}
BENCHMARK(BM_DenseNetTrainStep);

void BM_RenderPhantom(benchmark::State& state) {
  Rng rng(5);
  const PhantomScene scene = sample_scene(DesignClass::B, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(render(scene, 96));
  }
}
BENCHMARK(BM_RenderPhantom);

void BM_Augment(benchmark::State& state) {
  Rng rng(6);
  const PhantomScene scene = sample_scene(DesignClass::A, rng);
  const GrayImage img = render(scene, 96).image;
  AugmentParams params;
  Rng aug_rng(11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(augment(img, params, aug_rng));
  }
}
BENCHMARK(BM_Augment);

void BM_Saliency(benchmark::State& state) {
  Rng rng(8);
  DenseNet net{NetworkSpec{}};
  net.init_weights(9);
  const Tensor x = random_tensor(Shape{1, 1, 96, 96}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(compute_saliency(net, x, 0));
  }
}
BENCHMARK(BM_Saliency);

}  // namespace

BENCHMARK_MAIN();
