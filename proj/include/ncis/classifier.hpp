#ifndef NCIS_CLASSIFIER_HPP
#define NCIS_CLASSIFIER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "ncis/autograd.hpp"
#include "ncis/dataset.hpp"
#include "ncis/optim.hpp"
#include "ncis/parallel.hpp"
#include "ncis/purifier.hpp"

namespace ncis {

struct ClassifierTrainConfig {
  std::size_t epochs = 12;
  double lr = 2e-3;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
};

struct ClassifierInfo {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
};

/// Images per gradient shard. Shards are reduced in index order, so training
/// results do not depend on the worker count.
inline constexpr std::size_t kShardSize = 8;

/// Two 3x3 conv -> relu -> 2x2 max-pool stages (16 and 32 channels)
/// followed by a linear layer to the class logits.
template <typename T = float>
class Classifier {
 public:
  Classifier() = default;
  explicit Classifier(ParameterSet<T> params, ClassifierInfo info = {})
      : params_(std::move(params)), info_(info) {
    validate();
  }

  static Classifier init(std::size_t channels, std::size_t size, std::size_t classes,
                         std::uint64_t seed) {
    if (size % 4) throw InvalidArgument("classifier input size must be divisible by 4");
    Rng rng(seed);
    ParameterSet<T> p;
    p.add("conv1.weight", he_normal<T>({16, channels, 3, 3}, channels * 9, rng));
    p.add("conv1.bias", Tensor<T>({16}));
    p.add("conv2.weight", he_normal<T>({32, 16, 3, 3}, 16 * 9, rng));
    p.add("conv2.bias", Tensor<T>({32}));
    const std::size_t features = 32 * (size / 4) * (size / 4);
    p.add("fc.weight", he_normal<T>({classes, features}, features, rng, std::sqrt(0.5)));
    p.add("fc.bias", Tensor<T>({classes}));
    return Classifier(std::move(p), ClassifierInfo{seed, 0, 0.0});
  }

  const ParameterSet<T>& params() const { return params_; }
  ParameterSet<T>& params() { return params_; }
  const ClassifierInfo& info() const { return info_; }
  ClassifierInfo& info() { return info_; }

  std::size_t classes() const { return params_["fc.bias"].dim(0); }
  std::size_t channels() const { return params_["conv1.weight"].dim(1); }

  /// Records the network on `tape` for an N x C x H x W input; returns N x L logits.
  Var forward(Tape<T>& tape, Var input, std::span<const Var> p) const {
    const std::size_t n = tape.value(input).dim(0);
    Var h = max_pool2(tape, relu(tape, conv2d(tape, input, p[0], p[1])));
    h = max_pool2(tape, relu(tape, conv2d(tape, h, p[2], p[3])));
    h = reshape(tape, h, {n, tape.value(h).size() / n});
    return linear(tape, h, p[4], p[5]);
  }

  /// Logits for an N x C x H x W batch.
  Tensor<T> logits(const Tensor<T>& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != channels())
      throw InvalidArgument("classifier input " + shape_string(batch.shape()) +
                            " does not match " + std::to_string(channels()) + " channels");
    Tape<T> tape;
    std::vector<Var> p;
    for (const auto& [name, t] : params_) p.push_back(tape.constant(t));
    return tape.value(forward(tape, tape.constant(batch), p));
  }

  std::vector<T> predict(const Tensor<T>& image) const {
    if (image.rank() != 3) throw InvalidArgument("predict: image must be C x H x W");
    Shape s = image.shape();
    s.insert(s.begin(), 1);
    return logits(image.reshaped(s)).storage();
  }

  /// Per-image logits; computed in parallel, independent of thread count.
  std::vector<std::vector<T>> predict_all(std::span<const Tensor<T>> images) const {
    std::vector<std::vector<T>> out(images.size());
    parallel_for(images.size(), [&](std::size_t i) { out[i] = predict(images[i]); });
    return out;
  }

  int classify(const Tensor<T>& image) const {
    const auto z = predict(image);
    return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }

  /// Input gradient of the summed cross-entropy for an N x C x H x W batch.
  /// Images do not interact, so each slice equals the single-image gradient.
  Tensor<T> input_gradient(const Tensor<T>& batch, std::span<const int> labels,
                           T* loss_out = nullptr) const {
    Tape<T> tape;
    std::vector<Var> p;
    for (const auto& [name, t] : params_) p.push_back(tape.constant(t));
    Var x = tape.variable(batch);
    Var loss = softmax_cross_entropy(tape, forward(tape, x, p), labels, Reduction::sum);
    tape.backward(loss);
    if (loss_out) *loss_out = tape.value(loss)[0];
    return tape.grad(x);
  }

  bool operator==(const Classifier& o) const { return params_ == o.params_; }

 private:
  void validate() const {
    for (const char* name :
         {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"})
      if (!params_.contains(name))
        throw InvalidArgument(std::string("classifier checkpoint lacks '") + name + "'");
  }

  ParameterSet<T> params_;
  ClassifierInfo info_;
};

/// Indices of the k largest logits in descending order; ties go to the
/// lower index.
template <typename T>
std::vector<int> top_k(std::span<const T> logits, std::size_t k) {
  if (k < 1 || k > logits.size())
    throw InvalidArgument("top_k: k=" + std::to_string(k) + " outside [1," +
                          std::to_string(logits.size()) + "]");
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  idx.resize(k);
  return idx;
}

template <typename T>
int argmax(std::span<const T> logits) {
  return top_k(logits, 1).front();
}

template <typename T>
Tensor<T> image_batch(std::span<const Image> images) {
  std::vector<Tensor<T>> converted;
  converted.reserve(images.size());
  for (const auto& im : images) converted.push_back(im.template cast<T>());
  return stack<T>(converted);
}

/// Fraction of images whose arg-max logit equals the label, after the
/// optional purifier.
inline double accuracy(const Classifier<float>& model, const Dataset& data,
                       const std::optional<Purifier>& purifier = std::nullopt) {
  if (data.empty()) throw InvalidArgument("accuracy: empty dataset");
  std::vector<char> correct(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const Image x = purifier ? (*purifier)(data[i].image) : data[i].image;
    correct[i] = model.classify(x) == data[i].label;
  });
  return static_cast<double>(std::count(correct.begin(), correct.end(), 1)) /
         static_cast<double>(data.size());
}

/// Minibatch Adam on mean cross-entropy. epochs = 0 returns the initialized model.
inline Classifier<float> train_classifier(const Dataset& train,
                                          const ClassifierTrainConfig& cfg) {
  if (train.empty()) throw InvalidArgument("train_classifier: empty dataset");
  if (cfg.batch == 0) throw InvalidArgument("train_classifier: batch must be positive");
  std::size_t classes = 0;
  for (const auto& s : train) classes = std::max<std::size_t>(classes, s.label + 1);
  const Image& first = train.front().image;
  auto model = Classifier<float>::init(first.dim(0), first.dim(1), std::max<std::size_t>(classes, 2),
                                       cfg.seed);
  auto state = AdamState<float>::for_params(model.params());
  const AdamOptions opt{cfg.lr};
  Rng rng(derive_seed(cfg.seed, 0xC1A55));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const std::size_t shards = (end - start + kShardSize - 1) / kShardSize;
      std::vector<ParameterSet<float>> shard_grads(shards);
      std::vector<double> shard_loss(shards);
      parallel_for(shards, [&](std::size_t s) {
        const std::size_t b0 = start + s * kShardSize, b1 = std::min(end, b0 + kShardSize);
        std::vector<Image> imgs;
        std::vector<int> labels;
        for (std::size_t k = b0; k < b1; ++k) {
          imgs.push_back(train[order[k]].image);
          labels.push_back(train[order[k]].label);
        }
        Tape<float> tape;
        auto vars = bind(tape, model.params());
        Var logits = model.forward(tape, tape.constant(stack<float>(imgs)), vars);
        Var loss = softmax_cross_entropy(tape, logits, labels, Reduction::sum);
        tape.backward(loss);
        shard_grads[s] = model.params().zeros_like();
        accumulate_grads(tape, vars, shard_grads[s]);
        shard_loss[s] = tape.value(loss)[0];
      });
      ParameterSet<float> grads = model.params().zeros_like();
      double loss = 0;
      const float scale = 1.0f / static_cast<float>(end - start);
      for (std::size_t s = 0; s < shards; ++s) {
        loss += shard_loss[s];
        for (std::size_t i = 0; i < grads.size(); ++i) {
          auto& g = grads.tensor(i);
          const auto& sg = shard_grads[s].tensor(i);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += sg[k] * scale;
        }
      }
      if (!std::isfinite(loss)) throw TrainingDiverged("classifier loss is not finite");
      adam_step(model.params(), grads, state, opt);
    }
  }
  model.info() = ClassifierInfo{cfg.seed, cfg.epochs, accuracy(model, train)};
  return model;
}

}  // namespace ncis

#endif  // NCIS_CLASSIFIER_HPP
