#ifndef NCIS_ANALYSIS_HPP
#define NCIS_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncis/attacks.hpp"
#include "ncis/classifier.hpp"
#include "ncis/csv.hpp"
#include "ncis/parallel.hpp"
#include "ncis/purifier.hpp"
#include "ncis/rng.hpp"

namespace ncis {

/// C x K x K crops with uniformly drawn top-left corners.
inline std::vector<Image> sample_patches(const NoiseResidual& noise, std::size_t K,
                                         std::size_t count, std::uint64_t seed) {
  const Image& n = noise.values;
  if (n.rank() != 3) throw InvalidArgument("sample_patches: noise must be C x H x W");
  if (K < 1 || K > std::min(n.dim(1), n.dim(2)))
    throw InvalidArgument("sample_patches: patch size " + std::to_string(K) +
                          " does not fit a " + shape_string(n.shape()) + " image");
  Rng rng(seed);
  std::vector<Image> out;
  out.reserve(count);
  for (std::size_t p = 0; p < count; ++p) {
    const std::size_t top = rng.below(n.dim(1) - K + 1);
    const std::size_t left = rng.below(n.dim(2) - K + 1);
    Image patch({n.dim(0), K, K});
    for (std::size_t c = 0; c < n.dim(0); ++c)
      for (std::size_t y = 0; y < K; ++y)
        for (std::size_t x = 0; x < K; ++x) patch.at(c, y, x) = n.at(c, top + y, left + x);
    out.push_back(std::move(patch));
  }
  return out;
}

/// Fisher-Pearson coefficient g1 = m3 / m2^1.5.
template <typename V>
double skewness(std::span<const V> values) {
  if (values.size() < 3) throw InvalidArgument("skewness: need at least 3 values");
  const double n = static_cast<double>(values.size());
  double mean = 0;
  for (V v : values) mean += static_cast<double>(v);
  mean /= n;
  double m2 = 0, m3 = 0;
  for (V v : values) {
    const double d = static_cast<double>(v) - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  // Variance below float resolution of the data counts as constant.
  if (!(m2 > 1e-24 * std::max(1.0, mean * mean)))
    throw DegenerateInput("skewness: values have zero variance");
  return m3 / std::pow(m2, 1.5);
}

inline double skewness(const std::vector<double>& v) { return skewness<double>(v); }

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<std::size_t> counts;
};

/// Uniform bins over [lo, hi]; values outside are clamped into the end bins.
inline Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins) {
  if (bins < 1 || !(hi > lo)) throw InvalidArgument("histogram: need bins >= 1 and hi > lo");
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b)
    h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  for (double v : values) {
    const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
    const auto b = static_cast<std::ptrdiff_t>(std::floor(t));
    ++h.counts[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b, 0, bins - 1))];
  }
  return h;
}

struct PatchStats {
  std::size_t K = 0;
  std::size_t count = 0;
  std::vector<double> means;     // one per patch
  std::vector<double> skews;     // one per patch with nonzero variance
  std::size_t degenerate = 0;    // patches without a defined skewness
  double pooled_skewness = 0;    // mean of the per-patch coefficients
  Histogram mean_histogram;

  double mean_of_means() const {
    double s = 0;
    for (double m : means) s += m;
    return means.empty() ? 0.0 : s / static_cast<double>(means.size());
  }
};

inline constexpr std::size_t kMeanHistogramBins = 101;

/// Per-patch means and skewness of residual noise for every patch size in
/// `sizes`. `range` bounds the mean histogram (normally the attack budget).
inline std::vector<PatchStats> noise_statistics(std::span<const NoiseResidual> noises,
                                                std::span<const std::size_t> sizes,
                                                std::size_t patches_per_image,
                                                std::uint64_t seed, double range) {
  if (noises.empty()) throw InvalidArgument("noise_statistics: no noise images");
  if (!(range > 0)) throw InvalidArgument("noise_statistics: histogram range must be > 0");
  std::vector<PatchStats> out;
  for (std::size_t K : sizes) {
    struct PerImage {
      std::vector<double> means, skews;
      std::size_t degenerate = 0;
    };
    std::vector<PerImage> parts(noises.size());
    parallel_for(noises.size(), [&](std::size_t n) {
      const auto patches =
          sample_patches(noises[n], K, patches_per_image, derive_seed(derive_seed(seed, K), n));
      for (const auto& p : patches) {
        double s = 0;
        for (float v : p.values()) s += v;
        parts[n].means.push_back(s / static_cast<double>(p.size()));
        try {
          parts[n].skews.push_back(skewness<float>(p.values()));
        } catch (const DegenerateInput&) {
          ++parts[n].degenerate;
        }
      }
    });
    PatchStats st;
    st.K = K;
    for (auto& part : parts) {
      st.means.insert(st.means.end(), part.means.begin(), part.means.end());
      st.skews.insert(st.skews.end(), part.skews.begin(), part.skews.end());
      st.degenerate += part.degenerate;
    }
    st.count = st.means.size();
    if (st.count > 0 && st.skews.empty())
      throw DegenerateInput("noise_statistics: all " + std::to_string(st.count) + " patches of size " +
                            std::to_string(K) + " have zero variance");
    for (double g : st.skews) st.pooled_skewness += g;
    if (!st.skews.empty()) st.pooled_skewness /= static_cast<double>(st.skews.size());
    st.mean_histogram = histogram(st.means, -range, range, kMeanHistogramBins);
    out.push_back(std::move(st));
  }
  return out;
}

inline CsvTable noise_statistics_table(std::span<const PatchStats> stats) {
  CsvTable t({"K", "statistic", "value"});
  for (const auto& s : stats) {
    const std::string K = std::to_string(s.K);
    double var = 0;
    const double mu = s.mean_of_means();
    for (double m : s.means) var += (m - mu) * (m - mu);
    if (!s.means.empty()) var /= static_cast<double>(s.means.size());
    t.row({K, "patches", std::to_string(s.count)});
    t.row({K, "degenerate", std::to_string(s.degenerate)});
    t.row({K, "mean_of_means", fixed6(mu)});
    t.row({K, "std_of_means", fixed6(std::sqrt(var))});
    t.row({K, "pooled_skewness", fixed6(s.pooled_skewness)});
  }
  return t;
}

inline CsvTable histogram_table(std::span<const PatchStats> stats) {
  CsvTable t({"K", "bin_lo", "bin_hi", "count"});
  for (const auto& s : stats)
    for (std::size_t b = 0; b < s.mean_histogram.counts.size(); ++b)
      t.row({std::to_string(s.K), fixed6(s.mean_histogram.edges[b]),
             fixed6(s.mean_histogram.edges[b + 1]), std::to_string(s.mean_histogram.counts[b])});
  return t;
}

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

struct MsePoint {
  std::size_t iterations = 0;
  double clean = 0;        // mse(x, T^i(x))
  double adversarial = 0;  // mse(x, T^i(x'))
  double gap() const { return std::abs(adversarial - clean); }
};

/// Both curves for a single (x, x') pair, i = 0 .. i_max.
inline std::vector<MsePoint> mse_curve_pair(const PurifierStep& step, const Image& x,
                                            const Image& adversarial, std::size_t i_max) {
  std::vector<MsePoint> out;
  Image a = x, b = adversarial;
  for (std::size_t i = 0; i <= i_max; ++i) {
    if (i > 0) {
      a = step(a);
      b = step(b);
    }
    out.push_back({i, mse(x, a), mse(x, b)});
  }
  return out;
}

/// Curves averaged over pairs.
inline std::vector<MsePoint> mse_curve(const PurifierStep& step, std::span<const Image> clean,
                                       std::span<const Image> adversarial, std::size_t i_max) {
  if (i_max < 1) throw InvalidArgument("mse_curve: i_max must be >= 1");
  if (clean.size() != adversarial.size() || clean.empty())
    throw InvalidArgument("mse_curve: need equally many clean and attacked images");
  std::vector<std::vector<MsePoint>> per(clean.size());
  parallel_for(clean.size(),
               [&](std::size_t n) { per[n] = mse_curve_pair(step, clean[n], adversarial[n], i_max); });
  std::vector<MsePoint> out(i_max + 1);
  for (std::size_t i = 0; i <= i_max; ++i) {
    out[i].iterations = i;
    for (const auto& p : per) {
      out[i].clean += p[i].clean;
      out[i].adversarial += p[i].adversarial;
    }
    out[i].clean /= static_cast<double>(per.size());
    out[i].adversarial /= static_cast<double>(per.size());
  }
  return out;
}

inline CsvTable mse_curve_table(std::span<const MsePoint> curve) {
  CsvTable t({"i", "mse_clean", "mse_adversarial"});
  for (const auto& p : curve)
    t.row({std::to_string(p.iterations), fixed6(p.clean), fixed6(p.adversarial)});
  return t;
}

/// Fraction of inputs whose purified prediction equals the prediction on
/// the matching clean reference.
inline double psr(const Classifier<float>& model, const Purifier& purifier,
                  std::span<const Image> inputs, std::span<const Image> references) {
  if (inputs.size() != references.size())
    throw InvalidArgument("psr: " + std::to_string(inputs.size()) + " inputs but " +
                          std::to_string(references.size()) + " references");
  if (inputs.empty()) throw InvalidArgument("psr: no inputs");
  std::vector<char> hit(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    hit[i] = model.classify(purifier(inputs[i])) == model.classify(references[i]);
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) /
         static_cast<double>(inputs.size());
}

}  // namespace ncis

#endif  // NCIS_ANALYSIS_HPP
