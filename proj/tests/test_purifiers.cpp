#include <gtest/gtest.h>

#include <filesystem>

#include "ncis/harness.hpp"
#include "ncis/purifiers.hpp"

using namespace ncis;

namespace {

Image random_image(Shape s, Rng& rng) {
  Image x(std::move(s));
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  return x;
}

BsnNetwork<float> small_net(std::size_t channels, std::uint64_t seed) {
  return BsnNetwork<float>::init({channels, 8, 3, 5}, seed);
}

// Gradient of output element `at` with respect to every input element.
Tensor<float> output_gradient(const BsnNetwork<float>& net, const Image& x, std::size_t at) {
  Tape<float> tape;
  std::vector<Var> p;
  for (const auto& [name, t] : net.params()) p.push_back(tape.constant(t));
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  const Var in = tape.variable(x.reshaped(s));
  const Var y = net.forward(tape, in, p);
  Tensor<float> target = tape.value(y);
  target[at] -= 1.0f;
  tape.backward(mse(tape, y, tape.constant(target)));
  return tape.grad(in);
}

const std::vector<Image>& training_images() {
  static const std::vector<Image> imgs = images_of(generate_dataset({3, 24, 10, 16, 1}));
  return imgs;
}

}  // namespace

TEST(BlindSpot, CenterPixelNeverReachesItsOutput) {
  Rng rng(11);
  const auto net = small_net(1, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const Image x = random_image({1, 9, 9}, rng);
    const std::size_t at = rng.below(x.size());
    Image moved = x;
    moved[at] = static_cast<float>(rng.uniform(-5, 5));
    EXPECT_EQ(net.apply(x)[at], net.apply(moved)[at]);
    EXPECT_EQ(output_gradient(net, x, at)[at], 0.0f);
  }
}

TEST(BlindSpot, OtherPixelsInTheWindowDoMatter) {
  Rng rng(12);
  const auto net = small_net(1, 2);
  const Image x = random_image({1, 9, 9}, rng);
  const auto g = output_gradient(net, x, 4 * 9 + 4);
  EXPECT_NE(g[4 * 9 + 5], 0.0f);
  EXPECT_NE(g[3 * 9 + 4], 0.0f);
  EXPECT_EQ(g[0], 0.0f);  // outside the 5x5 window
}

TEST(BlindSpot, ExtendedDomainHidesTheWholeBlock) {
  Rng rng(13);
  const std::size_t m = 2;
  const auto net = small_net(m * m, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = random_image({1, 8, 8}, rng);
    const std::size_t by = rng.below(4), bx = rng.below(4);
    Image moved = x;
    for (std::size_t dy = 0; dy < m; ++dy)
      for (std::size_t dx = 0; dx < m; ++dx) moved.at(0, by * m + dy, bx * m + dx) += 0.7f;
    const Image a = fbie_forward(net, x, m), b = fbie_forward(net, moved, m);
    for (std::size_t dy = 0; dy < m; ++dy)
      for (std::size_t dx = 0; dx < m; ++dx)
        EXPECT_EQ(a.at(0, by * m + dy, bx * m + dx), b.at(0, by * m + dy, bx * m + dx));
  }
}

TEST(BlindSpot, ShapeErrors) {
  const auto net = small_net(4, 3);
  EXPECT_THROW(net.apply(Image({1, 8, 8})), InvalidArgument);
  EXPECT_THROW(fbie_forward(net, Image({1, 7, 8}), 2), InvalidArgument);
  EXPECT_THROW(BsnNetwork<float>::init({1, 8, 1, 5}, 1), InvalidArgument);
  EXPECT_THROW(BsnNetwork<float>::init({1, 8, 3, 4}, 1), InvalidArgument);
}

TEST(Ncis, ZeroNetworkReducesToClampedSmoothing) {
  auto net = small_net(4, 5);
  for (std::size_t i = 0; i < net.params().size(); ++i) net.params().tensor(i).fill(0.0f);
  Rng rng(5);
  const Image x = random_image({1, 8, 8}, rng);
  EXPECT_EQ(ncis_forward(net, x, 2, 5), clamp01(gs_raw(x, gaussian_kernel(5))));
}

TEST(Ncis, StepIsNetworkPlusSmoothingThenClamp) {
  const auto net = small_net(4, 6);
  Rng rng(6);
  const Image x = random_image({1, 8, 8}, rng);
  const LearnedPurifier p{net, 2, gaussian_kernel(11)};
  const Image raw = fbie_forward(net, x, 2) + gs_raw(x, gaussian_kernel(11));
  EXPECT_EQ(p.step(x), clamp01(raw));
  const Image y = p.step(x);
  EXPECT_EQ(y, ncis_forward(net, x, 2, 11));
  for (float v : y.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Training, NoEpochsReportsTheInitialLoss) {
  PurifierTrainConfig cfg;
  cfg.epochs = 0;
  cfg.width = 8;
  cfg.depth = 3;
  const auto t = train_purifier(training_images(), cfg);
  EXPECT_TRUE(t.epoch_loss.empty());
  EXPECT_NEAR(t.initial_loss, reconstruction_mse(t.model, training_images()), 1e-6);
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  for (PurifierKind kind : {PurifierKind::fbi, PurifierKind::fbie, PurifierKind::ncis}) {
    PurifierTrainConfig cfg;
    cfg.kind = kind;
    cfg.epochs = 4;
    cfg.width = 8;
    cfg.depth = 3;
    cfg.batch = 8;
    const auto a = train_purifier(training_images(), cfg);
    const auto b = train_purifier(training_images(), cfg);
    EXPECT_LT(a.epoch_loss.back(), a.initial_loss) << to_string(kind);
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
    EXPECT_EQ(a.model.net.params(), b.model.net.params());
    EXPECT_EQ(a.model.m, kind == PurifierKind::fbi ? 1u : 2u);
    EXPECT_EQ(a.model.gs_branch.has_value(), kind == PurifierKind::ncis);
  }
}

TEST(Training, RejectsNonLearnedKinds) {
  PurifierTrainConfig cfg;
  cfg.kind = PurifierKind::gs;
  EXPECT_THROW(train_purifier(training_images(), cfg), InvalidArgument);
  cfg.kind = PurifierKind::ncis;
  EXPECT_THROW(train_purifier(std::span<const Image>{}, cfg), InvalidArgument);
}

TEST(Checkpoint, ArchitectureInferredOnLoad) {
  const auto net = BsnNetwork<float>::init({4, 12, 4, 5}, 9);
  const auto dir = std::filesystem::temp_directory_path() / "ncis_test_bsn";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "p.nck", net.params());
  PurifierConfig pc;
  pc.kind = PurifierKind::ncis;
  pc.m = 2;
  pc.K = 11;
  pc.checkpoint = (dir / "p.nck").string();
  const LearnedPurifier back = load_learned(pc);
  EXPECT_EQ(back.net.architecture().width, 12u);
  EXPECT_EQ(back.net.architecture().depth, 4u);
  EXPECT_EQ(back.net.architecture().channels, 4u);
  EXPECT_EQ(back.net.architecture().window, 5u);
  Rng rng(9);
  const Image x = random_image({1, 8, 8}, rng);
  EXPECT_EQ(back.step(x), ncis_forward(net, x, 2, 11));
}

TEST(Selection, IdentityTiesGoToOneIteration) {
  const Dataset val = generate_dataset({3, 10, 10, 16, 1});
  const auto model = Classifier<float>::init(1, 16, 10, 1);
  const auto sel = select_iterations(identity_purifier(), model, val, images_of(val), 4);
  EXPECT_EQ(sel.best, 1u);
  ASSERT_EQ(sel.scores.size(), 5u);
  for (const auto& s : sel.scores) EXPECT_EQ(s.average(), sel.scores[0].average());
  EXPECT_THROW(select_iterations(identity_purifier(), model, val, images_of(val), 0), InvalidArgument);
}

TEST(Selection, SweepMatchesExplicitIteration) {
  const Dataset val = generate_dataset({3, 10, 10, 16, 1});
  const auto model = train_classifier(generate_dataset({4, 100, 10, 16, 1}), {2, 2e-3, 32, 1});
  const Purifier gs = gs_purifier(5);
  const auto scores = iteration_sweep(gs, model, val, images_of(val), 3);
  for (std::size_t i = 0; i <= 3; ++i) {
    const auto r = score(model, gs.with_iterations(i), val, images_of(val));
    EXPECT_DOUBLE_EQ(scores[i].standard_accuracy, r.standard_accuracy);
    EXPECT_DOUBLE_EQ(scores[i].robust_accuracy, r.robust_accuracy);
  }
}

TEST(Dynamic, NoiseStaysBoundedAndSeeded) {
  Rng rng(21);
  const Image x = random_image({1, 16, 16}, rng);
  const Image a = dynamic_inference(identity_purifier(), x, 0.5, 16.0 / 255, 4);
  EXPECT_EQ(a, dynamic_inference(identity_purifier(), x, 0.5, 16.0 / 255, 4));
  EXPECT_NE(a, dynamic_inference(identity_purifier(), x, 0.5, 16.0 / 255, 5));
  EXPECT_LE(max_abs(a - x), 16.0f / 255.0f + 1e-6f);
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(dynamic_inference(identity_purifier(), x, 0.0, 16.0 / 255, 4), x);
  EXPECT_THROW(dynamic_inference(identity_purifier(), x, -1.0, 0.1, 4), InvalidArgument);
}

TEST(Dynamic, WrapperDependsOnContent) {
  Rng rng(22);
  const Image x = random_image({1, 16, 16}, rng), y = random_image({1, 16, 16}, rng);
  const Purifier p = dynamic_purifier(identity_purifier(), kDynamicSigma, kDynamicClip, 3);
  EXPECT_EQ(p(x), p(x));
  EXPECT_NE(p(x) - x, p(y) - y);
}

TEST(Dynamic, SelectionSweepsNoisedCopies) {
  const Dataset val = generate_dataset({3, 10, 10, 16, 1});
  const auto model = train_classifier(generate_dataset({4, 100, 10, 16, 1}), {2, 2e-3, 32, 1});
  const Purifier gs = gs_purifier(5);
  const auto attacked = images_of(val);
  const auto plain = select_iterations(gs, model, val, attacked, 3);
  const auto zero = select_dynamic_iterations(gs, model, val, attacked, 3, 0.0, kDynamicClip, 1);
  EXPECT_EQ(zero.best, plain.best);
  const auto noisy = select_dynamic_iterations(gs, model, val, attacked, 3, 0.2, kDynamicClip, 1);
  for (std::size_t i = 1; i <= 3; ++i) {
    const Purifier d = dynamic_purifier(gs.with_iterations(i), 0.2, kDynamicClip, 1);
    EXPECT_DOUBLE_EQ(noisy.scores[i].standard_accuracy, score(model, d, val, attacked).standard_accuracy);
  }
}
