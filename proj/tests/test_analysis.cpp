#include <gtest/gtest.h>

#include <cmath>

#include "ncis/analysis.hpp"
#include "ncis/smoothing.hpp"

using namespace ncis;

TEST(Skewness, KnownValues) {
  // scipy.stats.skew with bias=True (tests/oracles/oracles.py).
  EXPECT_NEAR(skewness({0, 0, 0, 1}), 1.1547005383792515, 1e-12);
  EXPECT_NEAR(skewness({0, 0, 0, 1}), 2.0 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(skewness({1, 2, 3, 10}), 1.0182337649086284, 1e-12);
  EXPECT_NEAR(skewness({1, 2, 3}), 0.0, 1e-15);
}

TEST(Skewness, AffineInvarianceAndSignFlip) {
  const std::vector<double> v{0.3, -1.2, 2.5, 0.1, 0.9, -0.4};
  std::vector<double> scaled, flipped;
  for (double x : v) {
    scaled.push_back(3.0 * x + 7.0);
    flipped.push_back(-x);
  }
  EXPECT_NEAR(skewness(scaled), skewness(v), 1e-12);
  EXPECT_NEAR(skewness(flipped), -skewness(v), 1e-12);
}

TEST(Skewness, DegenerateAndTooShort) {
  EXPECT_THROW(skewness({2, 2, 2, 2}), DegenerateInput);
  EXPECT_THROW(skewness({1, 2}), InvalidArgument);
}

TEST(Histogram, BinsAndClamping) {
  const std::vector<double> v{-2, -1, -0.01, 0, 0.5, 1, 3};
  const auto h = histogram(v, -1, 1, 4);
  ASSERT_EQ(h.edges.size(), 5u);
  EXPECT_EQ(h.edges[2], 0.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{2, 1, 1, 3}));
  EXPECT_THROW(histogram(v, 1, 1, 4), InvalidArgument);
}

TEST(Patches, ShapeAndContent) {
  NoiseResidual n{Image({2, 6, 7})};
  for (std::size_t i = 0; i < n.values.size(); ++i) n.values[i] = static_cast<float>(i);
  const auto patches = sample_patches(n, 3, 40, 1);
  ASSERT_EQ(patches.size(), 40u);
  for (const auto& p : patches) {
    EXPECT_EQ(p.shape(), (Shape{2, 3, 3}));
    // Row-major content: consecutive columns differ by 1, rows by 7, channels by 42.
    EXPECT_EQ(p.at(0, 0, 1) - p.at(0, 0, 0), 1.0f);
    EXPECT_EQ(p.at(0, 1, 0) - p.at(0, 0, 0), 7.0f);
    EXPECT_EQ(p.at(1, 0, 0) - p.at(0, 0, 0), 42.0f);
  }
  EXPECT_EQ(sample_patches(n, 3, 10, 9)[4], sample_patches(n, 3, 10, 9)[4]);
  EXPECT_THROW(sample_patches(n, 7, 1, 1), InvalidArgument);
}

TEST(NoiseStatistics, ZeroNoiseIsDegenerate) {
  const std::vector<NoiseResidual> noise{NoiseResidual{Image({1, 16, 16})}};
  const std::size_t sizes[] = {5};
  EXPECT_THROW(noise_statistics(noise, sizes, 100, 1, 0.1), DegenerateInput);
}

TEST(NoiseStatistics, SignSymmetricNoiseIsCentered) {
  Rng rng(4);
  std::vector<NoiseResidual> noise;
  for (int k = 0; k < 20; ++k) {
    Image a({1, 16, 16});
    for (auto& v : a.values()) v = rng.uniform() < 0.5 ? -0.06f : 0.06f;
    Image b = a;
    for (auto& v : b.values()) v = -v;
    noise.push_back({a});
    noise.push_back({b});
  }
  const std::size_t sizes[] = {5, 7};
  const auto stats = noise_statistics(noise, sizes, 200, 3, 0.0627);
  ASSERT_EQ(stats.size(), 2u);
  for (const auto& s : stats) {
    EXPECT_EQ(s.count, 40u * 200u);
    EXPECT_LE(std::abs(s.mean_of_means()), 0.05 * 0.0627);
    EXPECT_LE(std::abs(s.pooled_skewness), 0.5);
    std::size_t total = 0;
    for (auto c : s.mean_histogram.counts) total += c;
    EXPECT_EQ(total, s.count);
    EXPECT_EQ(s.mean_histogram.counts.size(), kMeanHistogramBins);
  }
  const auto t = noise_statistics_table(stats);
  EXPECT_EQ(t.rows().size(), 2u * 5u);
}

TEST(NoiseStatistics, SkewedNoiseIsDetected) {
  Rng rng(5);
  std::vector<NoiseResidual> noise;
  for (int k = 0; k < 10; ++k) {
    Image a({1, 16, 16});
    for (auto& v : a.values()) v = rng.uniform() < 0.9 ? -0.01f : 0.09f;
    noise.push_back({a});
  }
  const std::size_t sizes[] = {7};
  EXPECT_GT(noise_statistics(noise, sizes, 200, 1, 0.1)[0].pooled_skewness, 1.0);
}

TEST(MseCurve, IdentityStepIsFlatAndStartsAtTheNoise) {
  Rng rng(6);
  Image x({1, 8, 8}), adv({1, 8, 8});
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<float>(rng.uniform(0.2, 0.8));
    adv[i] = x[i] + (i % 2 ? 0.05f : -0.05f);
  }
  const auto curve = mse_curve_pair(identity_purifier().step, x, adv, 4);
  ASSERT_EQ(curve.size(), 5u);
  for (const auto& p : curve) {
    EXPECT_EQ(p.clean, 0.0);
    EXPECT_NEAR(p.adversarial, 0.0025, 1e-9);
  }
}

TEST(MseCurve, SmoothingGapShrinksOnFlatImages) {
  Rng rng(7);
  std::vector<Image> xs, advs;
  for (int n = 0; n < 10; ++n) {
    Image x({1, 16, 16}), adv({1, 16, 16});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = 0.5f;
      adv[i] = x[i] + static_cast<float>(rng.uniform(-0.06, 0.06));
    }
    xs.push_back(x);
    advs.push_back(adv);
  }
  const auto curve = mse_curve(gs_purifier(5).step, xs, advs, 6);
  EXPECT_EQ(curve[0].clean, 0.0);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].gap(), curve[i - 1].gap());
  EXPECT_EQ(mse_curve_table(curve).rows().size(), 7u);
  EXPECT_THROW(mse_curve(gs_purifier(5).step, xs, advs, 0), InvalidArgument);
}

TEST(Psr, IdentityOnCleanIsOne) {
  const Dataset d = generate_dataset({2, 20, 10, 16, 1});
  const auto model = Classifier<float>::init(1, 16, 10, 3);
  const auto imgs = images_of(d);
  EXPECT_EQ(psr(model, identity_purifier(), imgs, imgs), 1.0);
  EXPECT_THROW(psr(model, identity_purifier(), imgs, std::span(imgs).first(3)), InvalidArgument);
}
