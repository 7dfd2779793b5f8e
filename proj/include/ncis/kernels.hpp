#ifndef NCIS_KERNELS_HPP
#define NCIS_KERNELS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "ncis/tensor.hpp"

namespace ncis {

enum class Padding { zero, reflect };

struct ConvOptions {
  Padding padding = Padding::zero;
  int dilation = 1;
  // Zero the center tap of every filter (forward and backward).
  bool center_mask = false;
};

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Source index for a padded coordinate, or -1 for a zero-padded tap.
/// Reflect mirrors about the edge samples without repeating them.
inline std::ptrdiff_t padded_index(std::ptrdiff_t i, std::ptrdiff_t n, Padding mode) {
  if (i >= 0 && i < n) return i;
  if (mode == Padding::zero) return -1;
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct ConvGeometry {
  std::size_t batch, in_channels, out_channels, height, width, ksize;
  // offsets[t][o] = source coordinate for tap t at output coordinate o.
  std::vector<std::ptrdiff_t> row_src, col_src;

  std::size_t taps() const { return in_channels * ksize * ksize; }
  std::size_t pixels() const { return height * width; }
  bool pointwise() const { return ksize == 1; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           const ConvOptions& opt) {
  if (x.rank() != 4) throw InvalidArgument("conv2d: input must be N x C x H x W");
  if (w.rank() != 4 || w.dim(2) != w.dim(3))
    throw InvalidArgument("conv2d: weight must be Cout x Cin x k x k");
  if (w.dim(1) != x.dim(1))
    throw InvalidArgument("conv2d: input has " + std::to_string(x.dim(1)) +
                          " channels, weight expects " + std::to_string(w.dim(1)));
  if (w.dim(2) % 2 == 0) throw InvalidArgument("conv2d: kernel size must be odd");
  if (opt.dilation < 1) throw InvalidArgument("conv2d: dilation must be >= 1");
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw InvalidArgument("conv2d: bias length must equal output channels");

  ConvGeometry g{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3), w.dim(2), {}, {}};
  const auto half = static_cast<std::ptrdiff_t>(g.ksize / 2);
  g.row_src.resize(g.ksize * g.height);
  g.col_src.resize(g.ksize * g.width);
  for (std::size_t t = 0; t < g.ksize; ++t) {
    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(t) - half) * opt.dilation;
    for (std::size_t y = 0; y < g.height; ++y)
      g.row_src[t * g.height + y] = padded_index(static_cast<std::ptrdiff_t>(y) + off,
                                                 static_cast<std::ptrdiff_t>(g.height),
                                                 opt.padding);
    for (std::size_t xx = 0; xx < g.width; ++xx)
      g.col_src[t * g.width + xx] = padded_index(static_cast<std::ptrdiff_t>(xx) + off,
                                                 static_cast<std::ptrdiff_t>(g.width),
                                                 opt.padding);
  }
  return g;
}

template <typename T>
RowMatrix<T> effective_weight(const Tensor<T>& w, const ConvGeometry& g, bool center_mask) {
  RowMatrix<T> m = ConstMatrixMap<T>(w.data(), g.out_channels, g.taps());
  if (center_mask) {
    const std::size_t center = (g.ksize / 2) * g.ksize + g.ksize / 2;
    for (std::size_t c = 0; c < g.in_channels; ++c)
      m.col(c * g.ksize * g.ksize + center).setZero();
  }
  return m;
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, RowMatrix<T>& cols) {
  cols.resize(g.taps(), g.pixels());
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.pixels();
    for (std::size_t ky = 0; ky < g.ksize; ++ky) {
      for (std::size_t kx = 0; kx < g.ksize; ++kx) {
        T* row = cols.data() + ((c * g.ksize + ky) * g.ksize + kx) * g.pixels();
        for (std::size_t y = 0; y < g.height; ++y) {
          const std::ptrdiff_t sy = g.row_src[ky * g.height + y];
          for (std::size_t x = 0; x < g.width; ++x) {
            const std::ptrdiff_t sx = g.col_src[kx * g.width + x];
            row[y * g.width + x] = (sy < 0 || sx < 0) ? T(0) : plane[sy * g.width + sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMatrix<T>& cols, const ConvGeometry& g, T* image) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.pixels();
    for (std::size_t ky = 0; ky < g.ksize; ++ky) {
      for (std::size_t kx = 0; kx < g.ksize; ++kx) {
        const T* row = cols.data() + ((c * g.ksize + ky) * g.ksize + kx) * g.pixels();
        for (std::size_t y = 0; y < g.height; ++y) {
          const std::ptrdiff_t sy = g.row_src[ky * g.height + y];
          if (sy < 0) continue;
          for (std::size_t x = 0; x < g.width; ++x) {
            const std::ptrdiff_t sx = g.col_src[kx * g.width + x];
            if (sx >= 0) plane[sy * g.width + sx] += row[y * g.width + x];
          }
        }
      }
    }
  }
}

/// Same-size cross-correlation of an N x Cin x H x W batch. Each image is
/// processed independently so batched and per-image results agree exactly.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const ConvOptions& opt) {
  const ConvGeometry g = conv_geometry(x, w, b, opt);
  const RowMatrix<T> weight = effective_weight(w, g, opt.center_mask);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data(), g.out_channels);
  Tensor<T> y({g.batch, g.out_channels, g.height, g.width});
  RowMatrix<T> cols;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* xin = x.data() + n * g.in_channels * g.pixels();
    MatrixMap<T> out(y.data() + n * g.out_channels * g.pixels(), g.out_channels, g.pixels());
    if (g.pointwise()) {
      out.noalias() = weight * ConstMatrixMap<T>(xin, g.in_channels, g.pixels());
    } else {
      im2col(xin, g, cols);
      out.noalias() = weight * cols;
    }
    out.colwise() += bias;
  }
  return y;
}

/// Accumulates into dx/dw/db; any of them may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& b, const ConvOptions& opt, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
  const ConvGeometry g = conv_geometry(x, w, b, opt);
  const RowMatrix<T> weight = effective_weight(w, g, opt.center_mask);
  RowMatrix<T> cols, dcols;
  RowMatrix<T> dweight = RowMatrix<T>::Zero(g.out_channels, g.taps());
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* xin = x.data() + n * g.in_channels * g.pixels();
    ConstMatrixMap<T> grad_out(dy.data() + n * g.out_channels * g.pixels(), g.out_channels,
                               g.pixels());
    if (db) {
      for (std::size_t o = 0; o < g.out_channels; ++o) (*db)[o] += grad_out.row(o).sum();
    }
    if (g.pointwise()) {
      ConstMatrixMap<T> input(xin, g.in_channels, g.pixels());
      if (dw) dweight.noalias() += grad_out * input.transpose();
      if (dx) {
        MatrixMap<T> grad_in(dx->data() + n * g.in_channels * g.pixels(), g.in_channels,
                             g.pixels());
        grad_in.noalias() += weight.transpose() * grad_out;
      }
    } else {
      if (dw) {
        im2col(xin, g, cols);
        dweight.noalias() += grad_out * cols.transpose();
      }
      if (dx) {
        dcols.noalias() = weight.transpose() * grad_out;
        col2im_add(dcols, g, dx->data() + n * g.in_channels * g.pixels());
      }
    }
  }
  if (dw) {
    if (opt.center_mask) {
      const std::size_t center = (g.ksize / 2) * g.ksize + g.ksize / 2;
      for (std::size_t c = 0; c < g.in_channels; ++c)
        dweight.col(c * g.ksize * g.ksize + center).setZero();
    }
    MatrixMap<T>(dw->data(), g.out_channels, g.taps()) += dweight;
  }
}

template <typename T>
Tensor<T> avg_pool2_forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    throw InvalidArgument("avg_pool2: need N x C x H x W with even H and W");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), h / 2, w / 2});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x.data() + p * h * w;
    T* out = y.data() + p * (h / 2) * (w / 2);
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j)
        out[i * (w / 2) + j] = T(0.25) * (in[2 * i * w + 2 * j] + in[2 * i * w + 2 * j + 1] +
                                          in[(2 * i + 1) * w + 2 * j] +
                                          in[(2 * i + 1) * w + 2 * j + 1]);
  }
  return y;
}

template <typename T>
void avg_pool2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const std::size_t planes = dx.dim(0) * dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = dy.data() + p * (h / 2) * (w / 2);
    T* out = dx.data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] += T(0.25) * g[(i / 2) * (w / 2) + j / 2];
  }
}

/// 2x2 max pooling; `argmax` receives the winning input offset per output.
template <typename T>
Tensor<T> max_pool2_forward(const Tensor<T>& x, std::vector<std::uint32_t>& argmax) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    throw InvalidArgument("max_pool2: need N x C x H x W with even H and W");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), h / 2, w / 2});
  argmax.resize(y.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x.data() + p * h * w;
    const std::size_t o0 = p * (h / 2) * (w / 2);
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        std::size_t best = 2 * i * w + 2 * j;
        for (std::size_t c : {2 * i * w + 2 * j + 1, (2 * i + 1) * w + 2 * j,
                              (2 * i + 1) * w + 2 * j + 1})
          if (in[c] > in[best]) best = c;
        y[o0 + i * (w / 2) + j] = in[best];
        argmax[o0 + i * (w / 2) + j] = static_cast<std::uint32_t>(p * h * w + best);
      }
  }
  return y;
}

/// Leading extents are treated as batch; the last three are C x H x W.
/// Output channel c*m*m + dy*m + dx at (i, j) holds input channel c at
/// (i*m + dy, j*m + dx).
template <typename T>
Tensor<T> patch_to_channel(const Tensor<T>& x, std::size_t m) {
  if (x.rank() < 3) throw InvalidArgument("patch_to_channel: need at least C x H x W");
  if (m == 0) throw InvalidArgument("patch_to_channel: m must be positive");
  const std::size_t r = x.rank(), c = x.dim(r - 3), h = x.dim(r - 2), w = x.dim(r - 1);
  if (h % m || w % m)
    throw InvalidArgument("patch_to_channel: image " + std::to_string(h) + "x" +
                          std::to_string(w) + " not divisible by m=" + std::to_string(m));
  const std::size_t outer = x.size() / (c * h * w), hs = h / m, ws = w / m;
  Shape shape = x.shape();
  shape[r - 3] = c * m * m;
  shape[r - 2] = hs;
  shape[r - 1] = ws;
  Tensor<T> y(shape);
  for (std::size_t n = 0; n < outer; ++n) {
    const T* in = x.data() + n * c * h * w;
    T* out = y.data() + n * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t dy = 0; dy < m; ++dy)
        for (std::size_t dx = 0; dx < m; ++dx) {
          T* plane = out + ((ch * m + dy) * m + dx) * hs * ws;
          for (std::size_t i = 0; i < hs; ++i)
            for (std::size_t j = 0; j < ws; ++j)
              plane[i * ws + j] = in[(ch * h + i * m + dy) * w + j * m + dx];
        }
  }
  return y;
}

template <typename T>
Tensor<T> channel_to_patch(const Tensor<T>& x, std::size_t m) {
  if (x.rank() < 3) throw InvalidArgument("channel_to_patch: need at least C x H x W");
  if (m == 0) throw InvalidArgument("channel_to_patch: m must be positive");
  const std::size_t r = x.rank(), cm = x.dim(r - 3), hs = x.dim(r - 2), ws = x.dim(r - 1);
  if (cm % (m * m))
    throw InvalidArgument("channel_to_patch: " + std::to_string(cm) +
                          " channels not divisible by m^2=" + std::to_string(m * m));
  const std::size_t c = cm / (m * m), h = hs * m, w = ws * m;
  const std::size_t outer = x.size() / (cm * hs * ws);
  Shape shape = x.shape();
  shape[r - 3] = c;
  shape[r - 2] = h;
  shape[r - 1] = w;
  Tensor<T> y(shape);
  for (std::size_t n = 0; n < outer; ++n) {
    const T* in = x.data() + n * c * h * w;
    T* out = y.data() + n * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t dy = 0; dy < m; ++dy)
        for (std::size_t dx = 0; dx < m; ++dx) {
          const T* plane = in + ((ch * m + dy) * m + dx) * hs * ws;
          for (std::size_t i = 0; i < hs; ++i)
            for (std::size_t j = 0; j < ws; ++j)
              out[(ch * h + i * m + dy) * w + j * m + dx] = plane[i * ws + j];
        }
  }
  return y;
}

/// Numerically stable log-softmax of one row.
template <typename T>
void log_softmax_row(std::span<const T> logits, std::span<T> out) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T v : logits) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace kernels
}  // namespace ncis

#endif  // NCIS_KERNELS_HPP
