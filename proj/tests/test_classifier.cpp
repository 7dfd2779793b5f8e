#include <gtest/gtest.h>

#include <cmath>

#include "ncis/classifier.hpp"
#include "ncis/smoothing.hpp"

using namespace ncis;

namespace {

const Dataset& small_set() {
  static const Dataset d = generate_dataset({7, 200, 10, 16, 1});
  return d;
}

// A model whose logits ignore the input and favour class 3.
Classifier<float> constant_model() {
  auto m = Classifier<float>::init(1, 16, 10, 1);
  for (std::size_t i = 0; i < m.params().size(); ++i) m.params().tensor(i).fill(0.0f);
  m.params()["fc.bias"][3] = 1.0f;
  return m;
}

}  // namespace

TEST(TopK, Examples) {
  const std::vector<float> a{0.1f, 0.9f, 0.5f};
  EXPECT_EQ(top_k<float>(a, 2), (std::vector<int>{1, 2}));
  const std::vector<float> tie{1, 1, 0};
  EXPECT_EQ(top_k<float>(tie, 1), (std::vector<int>{0}));
  auto all = top_k<float>(a, 3);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(top_k<float>(a, 0), InvalidArgument);
  EXPECT_THROW(top_k<float>(a, 4), InvalidArgument);
}

TEST(Classifier, UntrainedIsNearChance) {
  const auto m = train_classifier(small_set(), {0, 2e-3, 32, 5});
  EXPECT_NEAR(accuracy(m, small_set()), 0.1, 0.1);
}

TEST(Classifier, ConstantModelScoresOneTenth) {
  EXPECT_DOUBLE_EQ(accuracy(constant_model(), small_set()), 0.1);
}

TEST(Classifier, IdentityPurifierMatchesNone) {
  const auto m = Classifier<float>::init(1, 16, 10, 2);
  EXPECT_EQ(accuracy(m, small_set()), accuracy(m, small_set(), identity_purifier()));
}

TEST(Classifier, EmptyDatasetIsAnError) {
  EXPECT_THROW(accuracy(Classifier<float>::init(1, 16, 10, 2), Dataset{}), InvalidArgument);
}

TEST(Classifier, BatchedEqualsPerImage) {
  const auto m = Classifier<float>::init(1, 16, 10, 4);
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < 5; ++i) imgs.push_back(small_set()[i].image);
  const auto batch = m.logits(stack<float>(imgs));
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto single = m.predict(imgs[i]);
    for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(batch[i * 10 + c], single[c]);
  }
}

TEST(Classifier, IdenticalImagesIdenticalLogitsAndFinite) {
  const auto m = Classifier<float>::init(1, 16, 10, 4);
  const Image x = small_set()[0].image;
  EXPECT_EQ(m.predict(x), m.predict(Image(x)));
  for (float v : m.predict(Image({1, 16, 16}, 1.0f))) EXPECT_TRUE(std::isfinite(v));
}

TEST(Classifier, ShapeMismatchRejected) {
  const auto m = Classifier<float>::init(1, 16, 10, 4);
  EXPECT_THROW(m.predict(Image({3, 16, 16})), InvalidArgument);
}

TEST(Classifier, TrainingIsDeterministicAndLearns) {
  const ClassifierTrainConfig cfg{4, 2e-3, 32, 9};
  const auto a = train_classifier(small_set(), cfg);
  const auto b = train_classifier(small_set(), cfg);
  EXPECT_EQ(a, b);
  EXPECT_GT(a.info().train_accuracy, 0.3);
}

TEST(Classifier, InputGradientMatchesSingleImage) {
  const auto m = Classifier<float>::init(1, 16, 10, 4);
  std::vector<Image> imgs{small_set()[0].image, small_set()[1].image};
  const std::vector<int> labels{small_set()[0].label, small_set()[1].label};
  const auto g = m.input_gradient(stack<float>(imgs), labels);
  const int one[1] = {labels[1]};
  const auto g1 = m.input_gradient(stack<float>(std::vector<Image>{imgs[1]}), one);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g[g1.size() + i], g1[i]);
}
