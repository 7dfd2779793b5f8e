#include <gtest/gtest.h>

#include <cmath>

#include "ncis/smoothing.hpp"
#include "ncis/rng.hpp"

using namespace ncis;

namespace {

Image random_image(Shape s, Rng& rng) {
  Image x(std::move(s));
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  return x;
}

}  // namespace

TEST(GaussianKernel, IdentityForSizeOne) {
  const auto k = gaussian_kernel(1);
  EXPECT_EQ(k.weights.storage(), std::vector<double>{1.0});
  Rng rng(1);
  const Image x = random_image({2, 5, 5}, rng);
  EXPECT_EQ(gs(x, k), x);
}

TEST(GaussianKernel, SigmaAndDirectFormula) {
  EXPECT_NEAR(gaussian_kernel(5).sigma, 4.0 / 6.0, 1e-15);
  // Direct evaluation with numpy (tests/oracles/oracles.py).
  EXPECT_NEAR(gaussian_kernel(3).weights[4], 0.9570022475404156, 1e-10);
  EXPECT_NEAR(gaussian_kernel(5).weights[12], 0.35791122887650845, 1e-10);
  EXPECT_NEAR(gaussian_kernel(5).weights[0], 4.4169754636072635e-05, 1e-14);
}

TEST(GaussianKernel, Invariants) {
  for (int K : {1, 3, 5, 7, 11}) {
    const auto k = gaussian_kernel(K);
    double total = 0;
    const std::size_t n = k.size;
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v = 0; v < n; ++v) {
        const double w = k.weights[u * n + v];
        total += w;
        EXPECT_GE(w, 0.0);
        EXPECT_EQ(w, k.weights[(n - 1 - u) * n + v]);
        EXPECT_EQ(w, k.weights[u * n + (n - 1 - v)]);
        EXPECT_EQ(w, k.weights[v * n + u]);
        if (u != n / 2 || v != n / 2) {
          EXPECT_LT(w, k.weights[(n / 2) * n + n / 2]);
        }
      }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(GaussianKernel, RejectsEvenOrNonPositive) {
  EXPECT_THROW(gaussian_kernel(0), InvalidArgument);
  EXPECT_THROW(gaussian_kernel(4), InvalidArgument);
  EXPECT_THROW(gaussian_kernel(-3), InvalidArgument);
}

TEST(Gs, MatchesScipyMirrorMode) {
  // scipy.ndimage.correlate(mode="mirror") on a 4x4 ramp (tests/oracles/oracles.py).
  Tensor<double> x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i) / 15.0;
  const auto y3 = gs_raw(x, gaussian_kernel(3));
  const double row0[] = {0.007245027716517022, 0.07246268883988027, 0.13912935550654693, 0.2043470166299102};
  const auto y5 = gs_raw(x, gaussian_kernel(5));
  const double row3[] = {0.7169929518363741, 0.756876740181822, 0.8217711313818423, 0.8616549197272904};
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(y3[j], row0[j], 1e-12);
    EXPECT_NEAR(y5[12 + j], row3[j], 1e-12);
  }
}

TEST(Gs, ConstantImageUnchanged) {
  const Image x({3, 9, 7}, 0.42f);
  const auto y = gs(x, gaussian_kernel(11));
  for (float v : y.values()) EXPECT_NEAR(v, 0.42f, 1e-6f);
}

TEST(Gs, Linearity) {
  Rng rng(3);
  const auto k = gaussian_kernel(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = random_image({1, 12, 12}, rng);
    Image n({1, 12, 12});
    for (auto& v : n.values()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    const Image diff = gs_raw(Image(x + n), k) - gs_raw(x, k) - gs_raw(n, k);
    EXPECT_LE(max_abs(diff), 1e-5f);
  }
}

TEST(Iterate, CompositionRules) {
  Rng rng(4);
  const Image x = random_image({1, 10, 10}, rng);
  const auto step = gs_purifier(5).step;
  EXPECT_EQ(iterate(step, x, 0), x);
  EXPECT_EQ(iterate(step, x, 5), iterate(step, iterate(step, x, 2), 3));
  EXPECT_EQ(gs_purifier(5, 4)(x), iterate(step, x, 4));
}

TEST(Iterate, ContractsTowardMeanImage) {
  Rng rng(5);
  const Image x = random_image({1, 16, 16}, rng);
  double mean = 0;
  for (float v : x.values()) mean += v;
  mean /= static_cast<double>(x.size());
  const auto step = gs_purifier(5).step;
  Image y = x;
  double previous = 1e9;
  for (int i = 0; i < 12; ++i) {
    y = step(y);
    double dist = 0;
    for (float v : y.values()) dist += (v - mean) * (v - mean);
    if (i >= 1) {
      EXPECT_LE(dist, previous + 1e-9);
    }
    previous = dist;
  }
}
