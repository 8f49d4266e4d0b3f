#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vdet/error.hpp"
#include "vdet/tensor.hpp"

using namespace vdet;
using namespace vdet::diff;

namespace {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, SplitMix64& rng) {
  BasicTensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ConfigError);
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.grad()[0] = 1.0f;
  EXPECT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Tensor, BackwardNeedsScalarRoot) {
  Tensor x({2}, 1.0f);
  auto v = Var<float>::leaf(x, true);
  auto y = sigmoid(v);
  EXPECT_THROW(y.backward(), ConfigError);
  Var<float> empty;
  EXPECT_THROW(empty.backward(), StateError);
}

TEST(Tensor, ConvolutionWithMseMatchesFiniteDifferences) {
  SplitMix64 rng(17);
  auto input = random_tensor<float>({5, 5, 2}, rng);
  auto weight = random_tensor<float>({3, 3, 2, 3}, rng);
  auto bias = random_tensor<float>({3}, rng);
  const auto target = random_tensor<float>({5, 5, 3}, rng);

  auto w = Var<float>::leaf(weight, true);
  auto b = Var<float>::leaf(bias, true);
  auto loss = mse(conv2d(Var<float>::constant(input), w, b, 1, 1), target);
  loss.backward();

  auto dw = weight.cast<double>();
  auto db = bias.cast<double>();
  const auto dinput = input.cast<double>();
  const auto dtarget = target.cast<double>();
  const auto eval = [&] {
    return mse(conv2d(Var<double>::constant(dinput), Var<double>::leaf(dw, false),
                      Var<double>::leaf(db, false), 1, 1),
               dtarget)
        .value()[0];
  };
  const double h = 1e-6;
  for (auto [analytic, ref] : {std::pair{&weight, &dw}, std::pair{&bias, &db}}) {
    for (std::size_t i = 0; i < ref->size(); ++i) {
      const double orig = (*ref)[i];
      (*ref)[i] = orig + h;
      const double up = eval();
      (*ref)[i] = orig - h;
      const double down = eval();
      (*ref)[i] = orig;
      EXPECT_LT(oracle::rel_error(analytic->grad()[i], (up - down) / (2 * h), 1e-3), 1e-3) << i;
    }
  }
}

TEST(Tensor, StridedConvolutionShape) {
  SplitMix64 rng(1);
  auto x = Var<float>::constant(random_tensor<float>({8, 8, 3}, rng));
  auto w = Var<float>::constant(random_tensor<float>({3, 3, 3, 4}, rng));
  auto b = Var<float>::constant(random_tensor<float>({4}, rng));
  EXPECT_EQ(conv2d(x, w, b, 2, 1).shape(), (Shape{4, 4, 4}));
  auto w1 = Var<float>::constant(random_tensor<float>({1, 1, 3, 4}, rng));
  EXPECT_EQ(conv2d(x, w1, b, 2, 0).shape(), (Shape{4, 4, 4}));
  auto bad = Var<float>::constant(random_tensor<float>({3, 3, 2, 4}, rng));
  EXPECT_THROW(conv2d(x, bad, b, 1, 1), ConfigError);
}

TEST(Tensor, UnusedLeafGetsZeroGradient) {
  Tensor a({3}, 0.5f), b({3}, 2.0f);
  auto va = Var<float>::leaf(a, true);
  auto vb = Var<float>::leaf(b, true);
  b.zero_grad();
  auto loss = sum(leaky_relu(va, 0.1f));
  loss.backward();
  for (float g : a.grad()) EXPECT_EQ(g, 1.0f);
  for (float g : b.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Tensor, LeakyReluAndSigmoidDerivatives) {
  Tensor x({2}, std::vector<float>{-2.0f, 3.0f});
  auto v = Var<float>::leaf(x, true);
  sum(leaky_relu(v, 0.1f)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 0.1f);
  EXPECT_FLOAT_EQ(x.grad()[1], 1.0f);
  x.zero_grad();
  auto s = sigmoid(Var<float>::leaf(x, true));
  EXPECT_NEAR(s.value()[1], 1.0 / (1.0 + std::exp(-3.0)), 1e-7);
  sum(s).backward();
  const double sg = 1.0 / (1.0 + std::exp(2.0));
  EXPECT_NEAR(x.grad()[0], sg * (1 - sg), 1e-7);
}

TEST(Tensor, SharedSubgraphAccumulates) {
  Tensor x({1}, 1.0f);
  auto v = Var<float>::leaf(x, true);
  auto y = add(v, v);
  sum(add(y, y)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 4.0f);
}
