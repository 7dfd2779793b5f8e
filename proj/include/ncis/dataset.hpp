#ifndef NCIS_DATASET_HPP
#define NCIS_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ncis/parallel.hpp"
#include "ncis/rng.hpp"
#include "ncis/tensor.hpp"

namespace ncis {

/// C x H x W pixels in [0, 1].
using Image = Tensor<float>;

struct LabeledImage {
  Image image;
  int label = 0;
};

using Dataset = std::vector<LabeledImage>;

struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t count = 2000;
  std::size_t classes = 10;
  std::size_t size = 32;
  std::size_t channels = 1;
};

inline constexpr std::array<std::string_view, 10> kShapeNames = {
    "circle", "square", "triangle", "cross",   "ring",
    "bars-h", "bars-v", "diamond",  "l-corner", "dot-grid"};

namespace detail {

/// Membership test for shape `cls` in coordinates normalized by the shape
/// radius (so the shape roughly fills [-1, 1]^2).
inline bool inside_shape(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return au <= 0.8 && av <= 0.8;
    case 2:
      return v <= 0.8 && v >= -0.95 && au <= (v + 0.95) * (0.95 / 1.75);
    case 3:
      return (au <= 0.28 && av <= 0.95) || (av <= 0.28 && au <= 0.95);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5:
      return au <= 0.9 && av <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0;
    case 6:
      return au <= 0.9 && av <= 0.9 && static_cast<int>(std::floor((u + 0.9) / 0.36)) % 2 == 0;
    case 7:
      return au + av <= 1.0;
    case 8:
      return au <= 0.9 && av <= 0.9 && (u <= -0.35 || v >= 0.35);
    case 9: {
      for (double gy : {-0.6, 0.0, 0.6})
        for (double gx : {-0.6, 0.0, 0.6})
          if ((u - gx) * (u - gx) + (v - gy) * (v - gy) <= 0.23 * 0.23) return true;
      return false;
    }
    default:
      return false;
  }
}

/// Smooth lattice noise in roughly [-1, 1] (value noise, smoothstep blend).
class ValueNoise {
 public:
  ValueNoise(std::size_t size, std::size_t cell, Rng& rng)
      : cell_(static_cast<double>(cell)), n_(size / cell + 2) {
    lattice_.resize(n_ * n_);
    for (auto& v : lattice_) v = rng.uniform(-1.0, 1.0);
  }

  double operator()(double y, double x) const {
    const double fy = y / cell_, fx = x / cell_;
    const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
    const double ty = smooth(fy - iy), tx = smooth(fx - ix);
    auto at = [&](std::size_t a, std::size_t b) { return lattice_[a * n_ + b]; };
    const double top = at(iy, ix) * (1 - tx) + at(iy, ix + 1) * tx;
    const double bottom = at(iy + 1, ix) * (1 - tx) + at(iy + 1, ix + 1) * tx;
    return top * (1 - ty) + bottom * ty;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  double cell_;
  std::size_t n_;
  std::vector<double> lattice_;
};

inline LabeledImage render_image(const DatasetSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, index));
  const int label = static_cast<int>(index % spec.classes);
  const std::size_t s = spec.size;
  const double sd = static_cast<double>(s);

  const ValueNoise coarse(s, std::max<std::size_t>(2, s / 2), rng);
  const ValueNoise fine(s, std::max<std::size_t>(2, s / 4), rng);
  const double base = rng.uniform(0.15, 0.45);
  const double contrast = rng.uniform(0.3, 0.5);
  const double cx = sd * rng.uniform(0.38, 0.62), cy = sd * rng.uniform(0.38, 0.62);
  const double radius = sd * rng.uniform(0.24, 0.34);
  std::vector<double> bg_tint(spec.channels, 1.0), fg_tint(spec.channels, 1.0);
  if (spec.channels > 1)
    for (std::size_t c = 0; c < spec.channels; ++c) {
      bg_tint[c] = rng.uniform(0.6, 1.0);
      fg_tint[c] = rng.uniform(0.6, 1.0);
    }

  constexpr int kSub = 3;  // supersampling per axis
  Image img({spec.channels, s, s});
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double py = y + (sy + 0.5) / kSub, px = x + (sx + 0.5) / kSub;
          hits += inside_shape(label, (px - cx) / radius, (py - cy) / radius);
        }
      const double coverage = static_cast<double>(hits) / (kSub * kSub);
      const double texture = (0.12 * coarse(y, x) + 0.06 * fine(y, x));
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double v = (base + texture) * bg_tint[c] + coverage * contrast * fg_tint[c] +
                         rng.normal(0.0, 0.01);
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return {std::move(img), label};
}

}  // namespace detail

/// Synthetic shape-classification set. A pure function of the spec: image n
/// draws from its own seed stream, and labels cycle through the classes so
/// every prefix is balanced to within one image per class.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.count < 1) throw InvalidArgument("dataset count must be >= 1");
  if (spec.classes < 2 || spec.classes > kShapeNames.size())
    throw InvalidArgument("dataset classes must be in [2, 10]");
  if (spec.size < 4) throw InvalidArgument("dataset image size must be >= 4");
  if (spec.channels < 1) throw InvalidArgument("dataset channels must be >= 1");
  Dataset out(spec.count);
  parallel_for(spec.count, [&](std::size_t i) { out[i] = detail::render_image(spec, i); });
  return out;
}

/// Contiguous [begin, end) slice.
inline Dataset slice(const Dataset& d, std::size_t begin, std::size_t end) {
  end = std::min(end, d.size());
  begin = std::min(begin, end);
  return Dataset(d.begin() + static_cast<std::ptrdiff_t>(begin),
                 d.begin() + static_cast<std::ptrdiff_t>(end));
}

inline std::vector<Image> images_of(const Dataset& d) {
  std::vector<Image> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(s.image);
  return out;
}

inline std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(s.label);
  return out;
}

}  // namespace ncis

#endif  // NCIS_DATASET_HPP
