#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "textcond/nn/conv.hpp"
#include "textcond/nn/layers.hpp"
#include "textcond/nn/parameter.hpp"

using namespace textcond;
using namespace testsupport;

namespace {

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                          int pad) {
  const int k = w.h(), ho = (x.h() + 2 * pad - k) / stride + 1, wo = (x.w() + 2 * pad - k) / stride + 1;
  Tensor<double> y(x.n(), w.n(), ho, wo);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < w.n(); ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double s = b.c() ? b[o] : 0.0;
          for (int c = 0; c < x.c(); ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int r = i * stride - pad + ky, q = j * stride - pad + kx;
                if (r >= 0 && r < x.h() && q >= 0 && q < x.w()) s += w.at(o, c, ky, kx) * x.at(n, c, r, q);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

Tensor<double> naive_deconv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const int k = w.h(), ho = (x.h() - 1) * stride - 2 * pad + k, wo = (x.w() - 1) * stride - 2 * pad + k;
  Tensor<double> y(x.n(), w.c(), ho, wo);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j)
          for (int o = 0; o < w.c(); ++o)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int r = i * stride - pad + ky, q = j * stride - pad + kx;
                if (r >= 0 && r < ho && q >= 0 && q < wo) y.at(n, o, r, q) += x.at(n, c, i, j) * w.at(c, o, ky, kx);
              }
  return y;
}

/// Checks input and parameter gradients of a layer under loss = <r, layer(x)>.
template <typename Fwd, typename Bwd>
void check_layer_gradients(Tensor<double> x, std::vector<nn::Parameter<double>*> params, Fwd fwd, Bwd bwd,
                           std::mt19937_64& rng) {
  const Tensor<double> y0 = fwd(x, true);
  const Tensor<double> r = random_tensor(y0.n(), y0.c(), y0.h(), y0.w(), rng);
  auto loss = [&](std::span<double>) { return dot(fwd(x, false).span(), r.span()); };
  for (auto* p : params) p->zero_grad();
  fwd(x, true);
  const Tensor<double> dx = bwd(r);
  const auto ndx = numeric_gradient(loss, x.span());
  EXPECT_LT(relative_error(dx.span(), ndx), kGradTolerance);
  for (auto* p : params) {
    const auto np = numeric_gradient(loss, p->value.span());
    EXPECT_LT(relative_error(p->grad.span(), np), kGradTolerance);
  }
}

}  // namespace

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(1);
  for (auto [k, s, p] : {std::array{3, 1, 1}, std::array{7, 2, 3}, std::array{1, 1, 0}, std::array{3, 2, 1}}) {
    nn::Conv2d<double> conv(3, 5, k, s, p, true);
    conv.init(rng);
    conv.bias().value = random_tensor(1, 5, 1, 1, rng);
    const auto x = random_tensor(2, 3, 9, 8, rng);
    const auto y = conv.forward(x, nullptr);
    const auto ref = naive_conv(x, conv.weight().value, conv.bias().value, s, p);
    ASSERT_TRUE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(ConvTranspose2d, MatchesScatterSummationAndDoublesSize) {
  std::mt19937_64 rng(2);
  nn::ConvTranspose2d<double> de(4, 3, 4, 2, 1, false);
  de.init(rng);
  const auto x = random_tensor(2, 4, 5, 6, rng);
  const auto y = de.forward(x, nullptr);
  EXPECT_EQ(y.h(), 10);
  EXPECT_EQ(y.w(), 12);
  const auto ref = naive_deconv(x, de.weight().value, 2, 1);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(LayerGradientCheck, Conv2d) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    nn::Conv2d<double> conv(2, 3, 3, 1 + trial % 2, 1, true);
    conv.init(rng);
    typename nn::Conv2d<double>::Cache cache;
    check_layer_gradients(
        random_tensor(2, 2, 5, 5, rng), {&conv.weight(), &conv.bias()},
        [&](const Tensor<double>& x, bool train) { return conv.forward(x, train ? &cache : nullptr); },
        [&](const Tensor<double>& dy) { return conv.backward(dy, cache); }, rng);
  }
}

TEST(LayerGradientCheck, ConvTranspose2d) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    nn::ConvTranspose2d<double> de(3, 2, 4, 2, 1, true);
    de.init(rng);
    typename nn::ConvTranspose2d<double>::Cache cache;
    check_layer_gradients(
        random_tensor(2, 3, 3, 4, rng), {&de.weight(), &de.bias()},
        [&](const Tensor<double>& x, bool train) { return de.forward(x, train ? &cache : nullptr); },
        [&](const Tensor<double>& dy) { return de.backward(dy, cache); }, rng);
  }
}

TEST(LayerGradientCheck, BatchNormTrainingMode) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    nn::BatchNorm2d<double> bn(3);
    bn.gamma().value = random_tensor(1, 3, 1, 1, rng);
    typename nn::BatchNorm2d<double>::Cache cache;
    nn::ParamSet<double> ps;
    bn.collect(ps, "bn");
    check_layer_gradients(
        random_tensor(3, 3, 3, 3, rng), ps.trainable(),
        [&](const Tensor<double>& x, bool) { return bn.forward(x, &cache); },
        [&](const Tensor<double>& dy) { return bn.backward(dy, cache); }, rng);
  }
}

TEST(LayerGradientCheck, MaxPoolAndAvgPool) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    nn::MaxPool2d<double> mp(3, 2, 1);
    typename nn::MaxPool2d<double>::Cache cache;
    check_layer_gradients(
        random_tensor(2, 2, 6, 6, rng), {},
        [&](const Tensor<double>& x, bool train) { return mp.forward(x, train ? &cache : nullptr); },
        [&](const Tensor<double>& dy) { return mp.backward(dy, cache); }, rng);
    const auto x = random_tensor(1, 2, 4, 4, rng);
    check_layer_gradients(
        x, {}, [&](const Tensor<double>& in, bool) { return nn::AvgPool<double>::forward(in, 2); },
        [&](const Tensor<double>& dy) { return nn::AvgPool<double>::backward(dy, 2, x.shape()); }, rng);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStatisticsUpdatedInBackward) {
  nn::BatchNorm2d<double> bn(1, 0.1, 0.0);
  Tensor<double> x(2, 1, 1, 2);
  x[0] = 1, x[1] = 3, x[2] = 5, x[3] = 7;  // mean 4, unbiased var 20/3
  typename nn::BatchNorm2d<double>::Cache cache;
  bn.forward(x, &cache);
  auto y_before = bn.forward(x, nullptr);
  EXPECT_DOUBLE_EQ(y_before[0], 1.0);  // running mean 0, var 1 untouched by forward
  bn.backward(Tensor<double>::like(x), cache);
  nn::ParamSet<double> ps;
  bn.collect(ps, "bn");
  EXPECT_NEAR((*ps.find("bn.running_mean"))[0], 0.4, 1e-12);
  EXPECT_NEAR((*ps.find("bn.running_var"))[0], 0.9 + 0.1 * 20.0 / 3.0, 1e-12);
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
  nn::Parameter<double> p(Tensor<double>(1, 3, 1, 1));
  p.grad[0] = 2.0, p.grad[1] = -0.5, p.grad[2] = 0.0;
  nn::Adam<double> opt(0.1);
  opt.step({&p});
  EXPECT_NEAR(p.value[0], -0.1, 1e-6);
  EXPECT_NEAR(p.value[1], 0.1, 1e-6);
  EXPECT_DOUBLE_EQ(p.value[2], 0.0);
}

TEST(Tensor, ConcatThenSplitRoundTrips) {
  std::mt19937_64 rng(7);
  const auto a = random_tensor(2, 3, 2, 2, rng), b = random_tensor(2, 1, 2, 2, rng);
  const auto [a2, b2] = split_channels(concat_channels(a, b), 3);
  EXPECT_EQ(a2.storage(), a.storage());
  EXPECT_EQ(b2.storage(), b.storage());
  EXPECT_THROW(concat_channels(a, random_tensor(2, 1, 3, 2, rng)), ShapeError);
}
