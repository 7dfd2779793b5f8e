#ifndef NCIS_SMOOTHING_HPP
#define NCIS_SMOOTHING_HPP

#include <cmath>
#include <cstddef>
#include <string>

#include "ncis/kernels.hpp"
#include "ncis/purifier.hpp"
#include "ncis/tensor.hpp"

namespace ncis {

/// Normalized K x K Gaussian with sigma = (K - 1) / 6. K = 1 is the identity.
struct GaussianKernel {
  std::size_t size = 1;
  double sigma = 0.0;
  Tensor<double> weights{{1, 1}, 1.0};
};

inline GaussianKernel gaussian_kernel(int size) {
  if (size < 1 || size % 2 == 0)
    throw InvalidArgument("gaussian kernel size must be odd and positive, got " +
                          std::to_string(size));
  const auto k = static_cast<std::size_t>(size);
  GaussianKernel g{k, (size - 1) / 6.0, Tensor<double>({k, k}, 0.0)};
  if (k == 1) {
    g.weights[0] = 1.0;
    return g;
  }
  const int half = size / 2;
  double total = 0.0;
  for (int u = -half; u <= half; ++u)
    for (int v = -half; v <= half; ++v) {
      const double w = std::exp(-(u * u + v * v) / (2.0 * g.sigma * g.sigma));
      g.weights[(u + half) * k + (v + half)] = w;
      total += w;
    }
  for (auto& w : g.weights.values()) w /= total;
  return g;
}

/// Per-channel 2-D smoothing with reflect padding, without clamping.
/// Accepts C x H x W or N x C x H x W.
template <typename T>
Tensor<T> gs_raw(const Tensor<T>& x, const GaussianKernel& kernel) {
  if (x.rank() != 3 && x.rank() != 4) throw InvalidArgument("gs: expected C x H x W image");
  if (kernel.size == 1) return x;
  const std::size_t r = x.rank(), h = x.dim(r - 2), w = x.dim(r - 1);
  const std::size_t planes = x.size() / (h * w);
  Tensor<T> weight({1, 1, kernel.size, kernel.size});
  for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = static_cast<T>(kernel.weights[i]);
  const Tensor<T> bias({1});
  Tensor<T> y = kernels::conv2d_forward(x.reshaped({planes, 1, h, w}), weight, bias,
                                        ConvOptions{Padding::reflect, 1, false});
  return y.reshaped(x.shape());
}

/// One smoothing pass, clamped to [0, 1].
template <typename T>
Tensor<T> gs(const Tensor<T>& x, const GaussianKernel& kernel) {
  return clamp01(gs_raw(x, kernel));
}

inline Purifier gs_purifier(int size, std::size_t iterations = 1) {
  const GaussianKernel kernel = gaussian_kernel(size);
  return Purifier{"gs" + std::to_string(size),
                  [kernel](const Image& x) { return gs(x, kernel); }, iterations};
}

}  // namespace ncis

#endif  // NCIS_SMOOTHING_HPP
