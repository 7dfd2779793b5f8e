#ifndef NCIS_PURIFIERS_HPP
#define NCIS_PURIFIERS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ncis/autograd.hpp"
#include "ncis/classifier.hpp"
#include "ncis/dataset.hpp"
#include "ncis/optim.hpp"
#include "ncis/parallel.hpp"
#include "ncis/purifier.hpp"
#include "ncis/rng.hpp"
#include "ncis/smoothing.hpp"

namespace ncis {

struct BsnArchitecture {
  std::size_t channels = 1;  // input = output channels
  std::size_t width = 64;
  std::size_t depth = 8;     // total conv layers, >= 2
  std::size_t window = 5;    // receptive window of the masked first layer
};

/// Blind-spot network. The first layer is a window x window convolution with
/// its center tap masked; every later layer is 1x1, so the output at a pixel
/// sees its window but never the pixel itself.
///
///   h = relu(masked_conv(x));  h += relu(conv1x1(h)) (depth-2 times);
///   y = conv1x1(h)
template <typename T = float>
class BsnNetwork {
 public:
  BsnNetwork() = default;

  explicit BsnNetwork(ParameterSet<T> params) : params_(std::move(params)) {
    if (!params_.contains("layer0.weight"))
      throw InvalidArgument("blind-spot checkpoint lacks 'layer0.weight'");
    const auto& w0 = params_["layer0.weight"];
    arch_.channels = w0.dim(1);
    arch_.width = w0.dim(0);
    arch_.window = w0.dim(2);
    arch_.depth = params_.size() / 2;
    if (params_.size() % 2 || arch_.depth < 2)
      throw InvalidArgument("blind-spot checkpoint has an unexpected layer layout");
    const auto& last = params_["layer" + std::to_string(arch_.depth - 1) + ".weight"];
    if (last.dim(0) != arch_.channels)
      throw InvalidArgument("blind-spot output layer does not restore the input channels");
  }

  static BsnNetwork init(const BsnArchitecture& arch, std::uint64_t seed) {
    if (arch.depth < 2) throw InvalidArgument("blind-spot depth must be >= 2");
    if (arch.window % 2 == 0 || arch.window < 3)
      throw InvalidArgument("blind-spot window must be odd and >= 3");
    Rng rng(seed);
    ParameterSet<T> p;
    const std::size_t taps = arch.channels * arch.window * arch.window;
    p.add("layer0.weight",
          he_normal<T>({arch.width, arch.channels, arch.window, arch.window}, taps, rng));
    p.add("layer0.bias", Tensor<T>({arch.width}));
    const double residual_gain = 1.0 / std::sqrt(static_cast<double>(arch.depth));
    for (std::size_t l = 1; l + 1 < arch.depth; ++l) {
      p.add("layer" + std::to_string(l) + ".weight",
            he_normal<T>({arch.width, arch.width, 1, 1}, arch.width, rng, residual_gain));
      p.add("layer" + std::to_string(l) + ".bias", Tensor<T>({arch.width}));
    }
    const std::string last = "layer" + std::to_string(arch.depth - 1);
    p.add(last + ".weight", he_normal<T>({arch.channels, arch.width, 1, 1}, arch.width, rng, 0.1));
    p.add(last + ".bias", Tensor<T>({arch.channels}));
    BsnNetwork net(std::move(p));
    return net;
  }

  const BsnArchitecture& architecture() const { return arch_; }
  const ParameterSet<T>& params() const { return params_; }
  ParameterSet<T>& params() { return params_; }

  Var forward(Tape<T>& tape, Var x, std::span<const Var> p) const {
    const ConvOptions masked{Padding::zero, 1, true};
    Var h = relu(tape, conv2d(tape, x, p[0], p[1], masked));
    for (std::size_t l = 1; l + 1 < arch_.depth; ++l)
      h = add(tape, h, relu(tape, conv2d(tape, h, p[2 * l], p[2 * l + 1])));
    return conv2d(tape, h, p[2 * (arch_.depth - 1)], p[2 * (arch_.depth - 1) + 1]);
  }

  /// Reconstruction of an N x C x H x W (or C x H x W) input.
  Tensor<T> apply(const Tensor<T>& x) const {
    const bool single = x.rank() == 3;
    if ((x.rank() != 3 && x.rank() != 4) || x.dim(x.rank() - 3) != arch_.channels)
      throw InvalidArgument("blind-spot input " + shape_string(x.shape()) + " does not have " +
                            std::to_string(arch_.channels) + " channels");
    Tensor<T> batch = x;
    if (single) {
      Shape s = x.shape();
      s.insert(s.begin(), 1);
      batch = x.reshaped(std::move(s));
    }
    Tape<T> tape;
    std::vector<Var> p;
    for (const auto& [name, t] : params_) p.push_back(tape.constant(t));
    Tensor<T> y = tape.value(forward(tape, tape.constant(batch), p));
    return single ? y.reshaped(x.shape()) : y;
  }

 private:
  ParameterSet<T> params_;
  BsnArchitecture arch_;
};

template <typename T>
Tensor<T> patch_to_channel(const Tensor<T>& x, std::size_t m) {
  return kernels::patch_to_channel(x, m);
}

template <typename T>
Tensor<T> channel_to_patch(const Tensor<T>& x, std::size_t m) {
  return kernels::channel_to_patch(x, m);
}

template <typename T>
Tensor<T> bsn_forward(const BsnNetwork<T>& net, const Tensor<T>& x) {
  return net.apply(x);
}

/// channel_to_patch(bsn(patch_to_channel(x))): the blind spot grows to the
/// whole aligned m x m patch.
template <typename T>
Tensor<T> fbie_forward(const BsnNetwork<T>& net, const Tensor<T>& x, std::size_t m) {
  return kernels::channel_to_patch(net.apply(kernels::patch_to_channel(x, m)), m);
}

/// fbie_forward + gs, before clamping.
template <typename T>
Tensor<T> ncis_forward_raw(const BsnNetwork<T>& net, const Tensor<T>& x, std::size_t m,
                           const GaussianKernel& kernel) {
  return fbie_forward(net, x, m) + gs_raw(x, kernel);
}

template <typename T>
Tensor<T> ncis_forward(const BsnNetwork<T>& net, const Tensor<T>& x, std::size_t m, int K) {
  return clamp01(ncis_forward_raw(net, x, m, gaussian_kernel(K)));
}

// ---------------------------------------------------------------------------
// Purifier configuration

enum class PurifierKind { identity, gs, fbi, fbie, ncis };

inline std::string to_string(PurifierKind k) {
  switch (k) {
    case PurifierKind::identity: return "identity";
    case PurifierKind::gs: return "gs";
    case PurifierKind::fbi: return "fbi";
    case PurifierKind::fbie: return "fbie";
    case PurifierKind::ncis: return "ncis";
  }
  return "?";
}

inline PurifierKind parse_purifier_kind(const std::string& s) {
  for (auto k : {PurifierKind::identity, PurifierKind::gs, PurifierKind::fbi, PurifierKind::fbie,
                 PurifierKind::ncis})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown purifier kind '" + s + "'");
}

inline bool is_learned(PurifierKind k) {
  return k == PurifierKind::fbi || k == PurifierKind::fbie || k == PurifierKind::ncis;
}

struct PurifierConfig {
  PurifierKind kind = PurifierKind::gs;
  int K = 5;
  std::size_t m = 2;  // forced to 1 for fbi
  std::size_t iterations = 1;
  std::string checkpoint;
  // NCIS with the GS branch disabled would be FBI-E; `with_gs` lets FBI
  // (m = 1) run with a GS branch as well, for the "FBI+GS" ablation row.
  bool with_gs = false;

  std::size_t extension() const { return kind == PurifierKind::fbi ? 1 : m; }
  bool has_gs_branch() const { return kind == PurifierKind::ncis || with_gs; }
};

/// A trained blind-spot purifier together with its extension factor and
/// optional GS branch.
struct LearnedPurifier {
  BsnNetwork<float> net;
  std::size_t m = 1;
  std::optional<GaussianKernel> gs_branch;

  /// One clamped application.
  Image step(const Image& x) const {
    Image y = fbie_forward(net, x, m);
    if (gs_branch) y = y + gs_raw(x, *gs_branch);
    return clamp01(std::move(y));
  }
};

inline Purifier make_purifier(const LearnedPurifier& model, std::string name,
                              std::size_t iterations) {
  return Purifier{std::move(name), [model](const Image& x) { return model.step(x); },
                  iterations};
}

// ---------------------------------------------------------------------------
// Self-supervised training

struct PurifierTrainConfig {
  PurifierKind kind = PurifierKind::ncis;
  std::size_t m = 2;
  int K = 11;
  bool with_gs = false;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  std::size_t width = 64;
  std::size_t depth = 8;
  std::size_t window = 5;
};

struct TrainedPurifier {
  LearnedPurifier model;
  double initial_loss = 0;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

namespace detail {

/// Extended-domain input and regression target for one clean image. The
/// network learns x (FBI / FBI-E) or the residual x - G(x) (with GS branch).
inline std::pair<Tensor<float>, Tensor<float>> purifier_example(
    const Image& x, std::size_t m, const std::optional<GaussianKernel>& gs_branch) {
  Tensor<float> input = kernels::patch_to_channel(x, m);
  Tensor<float> target = gs_branch ? kernels::patch_to_channel(x - gs_raw(x, *gs_branch), m)
                                   : input;
  return {std::move(input), std::move(target)};
}

}  // namespace detail

/// Minimizes the mean squared reconstruction error of the selected forward
/// map on clean images. Deterministic given the seed; independent of the
/// worker count.
inline TrainedPurifier train_purifier(std::span<const Image> images,
                                      const PurifierTrainConfig& cfg) {
  if (!is_learned(cfg.kind)) throw InvalidArgument("train_purifier: kind must be fbi, fbie or ncis");
  if (images.empty()) throw InvalidArgument("train_purifier: no training images");
  if (cfg.batch == 0) throw InvalidArgument("train_purifier: batch must be positive");
  const std::size_t m = cfg.kind == PurifierKind::fbi ? 1 : cfg.m;
  std::optional<GaussianKernel> branch;
  if (cfg.kind == PurifierKind::ncis || cfg.with_gs) branch = gaussian_kernel(cfg.K);

  std::vector<Tensor<float>> inputs(images.size()), targets(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    std::tie(inputs[i], targets[i]) = detail::purifier_example(images[i], m, branch);
  });

  BsnArchitecture arch{inputs.front().dim(0), cfg.width, cfg.depth, cfg.window};
  TrainedPurifier out{LearnedPurifier{BsnNetwork<float>::init(arch, cfg.seed), m, branch}, 0, {}};
  BsnNetwork<float>& net = out.model.net;

  // Loss (and optionally gradient) of a minibatch given by indices.
  auto run_batch = [&](std::span<const std::size_t> idx, ParameterSet<float>* grads) {
    const std::size_t shards = (idx.size() + kShardSize - 1) / kShardSize;
    std::vector<ParameterSet<float>> shard_grads(shards);
    std::vector<double> shard_loss(shards);
    parallel_for(shards, [&](std::size_t s) {
      const std::size_t b0 = s * kShardSize, b1 = std::min(idx.size(), b0 + kShardSize);
      std::vector<Tensor<float>> in, tg;
      for (std::size_t k = b0; k < b1; ++k) {
        in.push_back(inputs[idx[k]]);
        tg.push_back(targets[idx[k]]);
      }
      Tape<float> tape;
      auto vars = grads ? bind(tape, net.params()) : std::vector<Var>{};
      if (!grads)
        for (const auto& [name, t] : net.params()) vars.push_back(tape.constant(t));
      Var y = net.forward(tape, tape.constant(stack<float>(in)), vars);
      Var loss = mse(tape, y, tape.constant(stack<float>(tg)));
      shard_loss[s] = tape.value(loss)[0] * static_cast<double>(b1 - b0);
      if (grads) {
        tape.backward(loss);
        shard_grads[s] = net.params().zeros_like();
        accumulate_grads(tape, vars, shard_grads[s]);
      }
    });
    double total = 0;
    for (std::size_t s = 0; s < shards; ++s) {
      total += shard_loss[s];
      if (!grads) continue;
      const std::size_t b0 = s * kShardSize, b1 = std::min(idx.size(), b0 + kShardSize);
      const float w = static_cast<float>(b1 - b0) / static_cast<float>(idx.size());
      for (std::size_t i = 0; i < grads->size(); ++i) {
        auto& g = grads->tensor(i);
        const auto& sg = shard_grads[s].tensor(i);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += sg[k] * w;
      }
    }
    return total / static_cast<double>(idx.size());
  };

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  {
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      total += run_batch(std::span(order).subspan(start, end - start), nullptr) *
               static_cast<double>(end - start);
    }
    out.initial_loss = total / static_cast<double>(order.size());
  }

  auto state = AdamState<float>::for_params(net.params());
  const AdamOptions opt{cfg.lr};
  Rng rng(derive_seed(cfg.seed, 0xB5B));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      ParameterSet<float> grads = net.params().zeros_like();
      const double loss = run_batch(std::span(order).subspan(start, end - start), &grads);
      if (!std::isfinite(loss)) throw TrainingDiverged("purifier loss is not finite");
      adam_step(net.params(), grads, state, opt);
      total += loss * static_cast<double>(end - start);
    }
    out.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return out;
}

/// Mean squared reconstruction error of a learned purifier's unclamped map.
inline double reconstruction_mse(const LearnedPurifier& p, std::span<const Image> images) {
  std::vector<double> err(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    Image y = fbie_forward(p.net, images[i], p.m);
    if (p.gs_branch) y = y + gs_raw(images[i], *p.gs_branch);
    double s = 0;
    for (std::size_t k = 0; k < y.size(); ++k) s += double(y[k] - images[i][k]) * (y[k] - images[i][k]);
    err[i] = s / static_cast<double>(y.size());
  });
  double total = 0;
  for (double e : err) total += e;
  return total / static_cast<double>(images.size());
}

// ---------------------------------------------------------------------------
// Iteration selection

struct IterationScore {
  std::size_t iterations = 0;
  double standard_accuracy = 0;
  double robust_accuracy = 0;
  double average() const { return 0.5 * (standard_accuracy + robust_accuracy); }
};

struct IterationSelection {
  std::size_t best = 1;
  std::vector<IterationScore> scores;  // i = 0 .. i_max
};

/// Accuracy of the purifier's step composed i times, for every i in
/// [0, i_max], on clean and attacked copies.
inline std::vector<IterationScore> iteration_sweep(const Purifier& purifier,
                                                   const Classifier<float>& model,
                                                   const Dataset& clean,
                                                   std::span<const Image> attacked,
                                                   std::size_t i_max) {
  if (clean.empty() || attacked.empty())
    throw InvalidArgument("iteration sweep: empty validation set");
  if (clean.size() != attacked.size())
    throw InvalidArgument("iteration sweep: clean and attacked sets differ in length");
  std::vector<std::vector<char>> std_hit(clean.size()), rob_hit(clean.size());
  parallel_for(clean.size(), [&](std::size_t n) {
    Image a = clean[n].image, b = attacked[n];
    for (std::size_t i = 0; i <= i_max; ++i) {
      if (i > 0) {
        a = purifier.step(a);
        b = purifier.step(b);
      }
      std_hit[n].push_back(model.classify(a) == clean[n].label);
      rob_hit[n].push_back(model.classify(b) == clean[n].label);
    }
  });
  std::vector<IterationScore> scores(i_max + 1);
  for (std::size_t i = 0; i <= i_max; ++i) {
    scores[i].iterations = i;
    for (std::size_t n = 0; n < clean.size(); ++n) {
      scores[i].standard_accuracy += std_hit[n][i];
      scores[i].robust_accuracy += rob_hit[n][i];
    }
    scores[i].standard_accuracy /= static_cast<double>(clean.size());
    scores[i].robust_accuracy /= static_cast<double>(clean.size());
  }
  return scores;
}

/// argmax over i in [1, i_max] of the mean of standard and robust accuracy;
/// ties go to the smaller i.
inline IterationSelection select_iterations(const Purifier& purifier,
                                            const Classifier<float>& model,
                                            const Dataset& clean_val,
                                            std::span<const Image> attacked_val,
                                            std::size_t i_max) {
  if (i_max < 1) throw InvalidArgument("select_iterations: i_max must be >= 1");
  IterationSelection sel;
  sel.scores = iteration_sweep(purifier, model, clean_val, attacked_val, i_max);
  for (std::size_t i = 2; i <= i_max; ++i)
    if (sel.scores[i].average() > sel.scores[sel.best].average()) sel.best = i;
  return sel;
}

// ---------------------------------------------------------------------------
// Dynamic inference

inline constexpr double kDynamicSigma = 0.05;
inline constexpr double kDynamicClip = 16.0 / 255.0;

/// Adds zero-mean Gaussian noise clipped to [-clip, clip], clamps to [0, 1],
/// then purifies.
inline Image dynamic_inference(const Purifier& purifier, const Image& x, double sigma,
                               double clip, std::uint64_t seed) {
  if (!(sigma >= 0)) throw InvalidArgument("dynamic inference: sigma must be >= 0");
  if (sigma == 0) return purifier(x);
  Rng rng(seed);
  Image noisy = x;
  for (auto& v : noisy.values()) {
    const double n = std::clamp(rng.normal(0.0, sigma), -clip, clip);
    v = std::clamp(static_cast<float>(v + n), 0.0f, 1.0f);
  }
  return purifier(noisy);
}

inline std::uint64_t content_hash(const Image& x) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(x.data());
  for (std::size_t i = 0; i < x.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 0x100000001b3ull;
  return h;
}

/// Wraps `purifier` so every call draws fresh noise. The noise stream is a
/// function of the seed and the input content, which keeps runs reproducible.
inline Purifier dynamic_purifier(const Purifier& purifier, double sigma, double clip,
                                 std::uint64_t seed) {
  return Purifier{purifier.name + "+dyn",
                  [purifier, sigma, clip, seed](const Image& x) {
                    return dynamic_inference(purifier, x, sigma, clip,
                                             derive_seed(seed, content_hash(x)));
                  },
                  1};
}

/// Iteration selection for the dynamic variant of `purifier`. The noise is
/// drawn once per input, so the sweep runs the plain steps on noised copies.
inline IterationSelection select_dynamic_iterations(const Purifier& purifier,
                                                    const Classifier<float>& model,
                                                    const Dataset& clean_val,
                                                    std::span<const Image> attacked_val,
                                                    std::size_t i_max, double sigma, double clip,
                                                    std::uint64_t seed) {
  auto noised = [&](const Image& x) {
    return dynamic_inference(identity_purifier(), x, sigma, clip, derive_seed(seed, content_hash(x)));
  };
  Dataset clean = clean_val;
  std::vector<Image> attacked(attacked_val.size());
  parallel_for(clean.size(), [&](std::size_t i) { clean[i].image = noised(clean_val[i].image); });
  parallel_for(attacked.size(), [&](std::size_t i) { attacked[i] = noised(attacked_val[i]); });
  return select_iterations(purifier, model, clean, attacked, i_max);
}

}  // namespace ncis

#endif  // NCIS_PURIFIERS_HPP
