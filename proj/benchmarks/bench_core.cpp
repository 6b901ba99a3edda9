#include <benchmark/benchmark.h>

#include "amalgam/rng.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

using namespace amalgam;

static Tensor rand_tensor(Rng& rng, Shape shape) {
  return Tensor(shape, rng.normal_vec(static_cast<size_t>(shape_numel(shape))));
}

static void BM_matmul_forward(benchmark::State& state) {
  Rng rng(1);
  int64_t n = state.range(0);
  Tensor a = rand_tensor(rng, {n, n});
  Tensor b = rand_tensor(rng, {n, n});
  for (auto _ : state) {
    Tensor c = matmul(nullptr, a, b);
    benchmark::DoNotOptimize(c);
  }
}
BENCHMARK(BM_matmul_forward)->Arg(16)->Arg(64)->Arg(128);

static void BM_mlp_forward_backward(benchmark::State& state) {
  Rng rng(2);
  int64_t batch = 32, in = 64, hidden = 32, out = 10;
  Tensor x = rand_tensor(rng, {batch, in});
  Tensor w1 = rand_tensor(rng, {in, hidden});
  Tensor w2 = rand_tensor(rng, {hidden, out});
  Tensor labels = Tensor::zeros({batch, out});
  {
    std::vector<double> l(static_cast<size_t>(batch * out), 0.0);
    for (int64_t i = 0; i < batch; ++i) l[static_cast<size_t>(i * out + i % out)] = 1.0;
    labels = Tensor({batch, out}, std::move(l));
  }
  for (auto _ : state) {
    Tape tape;
    Tensor lw1 = tape.leaf(w1);
    Tensor lw2 = tape.leaf(w2);
    Tensor h = sigmoid(&tape, matmul(&tape, x, lw1));
    Tensor logits = matmul(&tape, h, lw2);
    Tensor loss = softmax_cross_entropy(&tape, logits, labels);
    GradMap gm = backward(tape, loss);
    benchmark::DoNotOptimize(gm.grad(lw1));
  }
}
BENCHMARK(BM_mlp_forward_backward);

static void BM_conv2d_forward(benchmark::State& state) {
  Rng rng(3);
  Tensor x = rand_tensor(rng, {8, 1, 28, 28});
  Tensor k = rand_tensor(rng, {16, 1, 3, 3});
  for (auto _ : state) {
    Tensor y = conv2d(nullptr, x, k);
    benchmark::DoNotOptimize(y);
  }
}
BENCHMARK(BM_conv2d_forward);

BENCHMARK_MAIN();
