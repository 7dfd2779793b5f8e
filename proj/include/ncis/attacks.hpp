#ifndef NCIS_ATTACKS_HPP
#define NCIS_ATTACKS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ncis/classifier.hpp"
#include "ncis/parallel.hpp"
#include "ncis/purifier.hpp"
#include "ncis/report.hpp"
#include "ncis/rng.hpp"

namespace ncis {

enum class Norm { linf, l2 };

inline std::string to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

inline Norm parse_norm(const std::string& s) {
  if (s == "linf") return Norm::linf;
  if (s == "l2") return Norm::l2;
  throw InvalidArgument("unknown norm '" + s + "' (expected linf or l2)");
}

/// PGD parameters. Budget and step are in pixel units of [0, 1] images.
struct AttackConfig {
  Norm norm = Norm::linf;
  double eps = 16.0 / 255.0;
  double alpha = 1.6 / 255.0;
  std::size_t iterations = 10;
  bool targeted = false;
  std::optional<int> target_class;
  std::uint64_t seed = 0;
  bool random_start = false;

  void validate() const {
    if (!(eps >= 0)) throw InvalidArgument("attack eps must be >= 0");
    if (iterations > 0 && !(alpha > 0)) throw InvalidArgument("attack alpha must be > 0");
    if (targeted && !target_class) throw InvalidArgument("targeted attack needs a target class");
  }
};

/// N' = x' - x.
struct NoiseResidual {
  Image values;
};

inline NoiseResidual residual(const Image& adversarial, const Image& clean) {
  return NoiseResidual{adversarial - clean};
}

/// Called after every iteration with the projected iterate.
using StepObserver = std::function<void(std::size_t iteration, const Image& iterate)>;

namespace detail {

inline Tensor<float> as_batch(const Image& x) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return x.reshaped(std::move(s));
}

inline void project(Image& adv, const Image& x, Norm norm, float eps) {
  if (norm == Norm::linf) {
    for (std::size_t i = 0; i < adv.size(); ++i)
      adv[i] = std::clamp(adv[i], std::max(0.0f, x[i] - eps), std::min(1.0f, x[i] + eps));
    return;
  }
  double n2 = 0;
  for (std::size_t i = 0; i < adv.size(); ++i) n2 += double(adv[i] - x[i]) * (adv[i] - x[i]);
  const double n = std::sqrt(n2);
  const double scale = n > eps ? eps / n : 1.0;
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv[i] = std::clamp(x[i] + static_cast<float>((adv[i] - x[i]) * scale), 0.0f, 1.0f);
}

inline Image random_start(const Image& x, const AttackConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x5747));
  Image adv = x;
  if (cfg.norm == Norm::linf) {
    for (auto& v : adv.values()) v += static_cast<float>(rng.uniform(-cfg.eps, cfg.eps));
  } else {
    std::vector<double> dir(x.size());
    double n2 = 0;
    for (auto& d : dir) {
      d = rng.normal();
      n2 += d * d;
    }
    const double r = cfg.eps * rng.uniform() / std::sqrt(std::max(n2, 1e-300));
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += static_cast<float>(dir[i] * r);
  }
  project(adv, x, cfg.norm, static_cast<float>(cfg.eps));
  return adv;
}

/// Shared PGD loop. With a purifier, the gradient is taken at the purified
/// iterate and applied to the iterate itself (identity backward pass).
inline Image pgd_loop(const Classifier<float>& model, const Image& x, int y,
                      const AttackConfig& cfg, const Purifier* purifier,
                      const StepObserver& observer) {
  cfg.validate();
  if (x.rank() != 3) throw InvalidArgument("attack input must be C x H x W");
  Image adv = cfg.random_start ? random_start(x, cfg) : x;
  if (cfg.eps == 0.0) return x;
  const int label = cfg.targeted ? *cfg.target_class : y;
  const float direction = cfg.targeted ? -1.0f : 1.0f;
  const float alpha = static_cast<float>(cfg.alpha), eps = static_cast<float>(cfg.eps);
  const int labels[1] = {label};
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Image at = purifier ? (*purifier)(adv) : adv;
    const Tensor<float> grad = model.input_gradient(as_batch(at), labels);
    if (!all_finite(grad)) throw NumericalError("attack: non-finite input gradient");
    if (cfg.norm == Norm::linf) {
      for (std::size_t i = 0; i < adv.size(); ++i) {
        const float g = grad[i];
        const float s = g > 0 ? 1.0f : (g < 0 ? -1.0f : 0.0f);
        adv[i] += direction * alpha * s;
      }
    } else {
      const double gn = l2_norm(grad);
      if (gn > 0)
        for (std::size_t i = 0; i < adv.size(); ++i)
          adv[i] += direction * static_cast<float>(alpha * grad[i] / gn);
    }
    project(adv, x, cfg.norm, eps);
    if (observer) observer(it, adv);
  }
  return adv;
}

}  // namespace detail

/// Projected gradient ascent on the true-class loss (untargeted) or descent
/// on the target-class loss (targeted).
inline Image pgd(const Classifier<float>& model, const Image& x, int y, const AttackConfig& cfg,
                 const StepObserver& observer = {}) {
  return detail::pgd_loop(model, x, y, cfg, nullptr, observer);
}

/// Purifier-aware PGD: gradient at T(x_t), applied to x_t.
inline Image bpda_pgd(const Classifier<float>& model, const Purifier& purifier, const Image& x,
                      int y, const AttackConfig& cfg, const StepObserver& observer = {}) {
  return detail::pgd_loop(model, x, y, cfg, &purifier, observer);
}

/// Single signed-gradient step of size eps, clamped to [0, 1].
inline Image fgsm(const Classifier<float>& model, const Image& x, int y, double eps) {
  if (!(eps >= 0)) throw InvalidArgument("fgsm: eps must be >= 0");
  if (eps == 0) return x;
  const int labels[1] = {y};
  const Tensor<float> grad = model.input_gradient(detail::as_batch(x), labels);
  if (!all_finite(grad)) throw NumericalError("fgsm: non-finite input gradient");
  Image adv = x;
  const float e = static_cast<float>(eps);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const float s = grad[i] > 0 ? 1.0f : (grad[i] < 0 ? -1.0f : 0.0f);
    adv[i] = std::clamp(x[i] + e * s, 0.0f, 1.0f);
  }
  return adv;
}

/// Per-image attack configuration for position `index` of a dataset: derives
/// the random-start seed and, for targeted attacks without a fixed target, a
/// target class different from the label.
inline AttackConfig config_for_image(const AttackConfig& cfg, std::size_t index, int label,
                                     std::size_t classes) {
  AttackConfig c = cfg;
  c.seed = derive_seed(cfg.seed, index);
  if (cfg.targeted && !cfg.target_class) {
    Rng rng(derive_seed(cfg.seed, 0x7A26E7 + index));
    c.target_class =
        static_cast<int>((label + 1 + rng.below(classes - 1)) % classes);
  }
  return c;
}

/// Attacks every image of `data`; with `purifier`, uses the BPDA variant.
inline std::vector<Image> attack_dataset(const Classifier<float>& model, const Dataset& data,
                                         const AttackConfig& cfg,
                                         const Purifier* purifier = nullptr) {
  std::vector<Image> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const AttackConfig c = config_for_image(cfg, i, data[i].label, model.classes());
    out[i] = detail::pgd_loop(model, data[i].image, data[i].label, c, purifier, {});
  });
  return out;
}

/// Attacks `substitute`, then scores `target` (through `purifier`) on the
/// resulting images.
inline EvalReport transfer_attack(const Classifier<float>& substitute,
                                  const Classifier<float>& target, const Dataset& data,
                                  const AttackConfig& cfg,
                                  const Purifier& purifier = identity_purifier(),
                                  std::size_t k = 5) {
  const auto adversarial = attack_dataset(substitute, data, cfg);
  EvalReport r = score(target, purifier, data, adversarial, k);
  r.seed = cfg.seed;
  return r;
}

}  // namespace ncis

#endif  // NCIS_ATTACKS_HPP
