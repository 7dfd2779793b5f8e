#ifndef NCIS_AUTOGRAD_HPP
#define NCIS_AUTOGRAD_HPP

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ncis/kernels.hpp"
#include "ncis/tensor.hpp"

namespace ncis {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode computation record. Operations append nodes in evaluation
/// order; backward() walks them in reverse and fills gradient buffers for
/// every node that depends on a variable leaf.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Appends an op result. `backward` runs only if some parent needs a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() target with respect to `v`; zeros if
  /// `v` did not influence it.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() && !n.value.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  /// Mutable gradient buffer, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape() || n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad_buffer(Var v) { return grad_buffer(v.id); }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var loss) {
    if (nodes_.at(loss.id).value.size() != 1)
      throw InvalidArgument("backward: target must be a scalar, got shape " +
                            shape_string(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(loss)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, ConvOptions opt = {}) {
  Tensor<T> y = kernels::conv2d_forward(tape.value(x), tape.value(w), tape.value(b), opt);
  return tape.record(std::move(y), {x, w, b}, [x, w, b, opt](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    Tensor<T>* dx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
    Tensor<T>* dw = t.requires_grad(w) ? &t.grad_buffer(w) : nullptr;
    Tensor<T>* db = t.requires_grad(b) ? &t.grad_buffer(b) : nullptr;
    kernels::conv2d_backward(dy, t.value(x), t.value(w), t.value(b), opt, dx, dw, db);
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& in = t.value(x);
    const Tensor<T>& dy = t.grad_buffer(self);
    Tensor<T>& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > T(0)) dx[i] += dy[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> y = tape.value(a) + tape.value(b);
  return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      const Tensor<T>& dy = t.grad_buffer(self);
      Tensor<T>& dv = t.grad_buffer(v);
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += dy[i];
    }
  });
}

template <typename T>
Var avg_pool2(Tape<T>& tape, Var x) {
  return tape.record(kernels::avg_pool2_forward(tape.value(x)), {x},
                     [x](Tape<T>& t, std::size_t self) {
                       kernels::avg_pool2_backward(t.grad_buffer(self), t.grad_buffer(x));
                     });
}

template <typename T>
Var max_pool2(Tape<T>& tape, Var x) {
  std::vector<std::uint32_t> argmax;
  Tensor<T> y = kernels::max_pool2_forward(tape.value(x), argmax);
  return tape.record(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    Tensor<T>& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  return tape.record(tape.value(x).reshaped(std::move(shape)), {x},
                     [x](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& dy = t.grad_buffer(self);
                       Tensor<T>& dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
                     });
}

/// Fully connected layer over the rows of an N x Din input: y = x W^T + b.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const Tensor<T>& in = tape.value(x);
  const Tensor<T>& weight = tape.value(w);
  const Tensor<T>& bias = tape.value(b);
  if (in.rank() != 2 || weight.rank() != 2 || weight.dim(1) != in.dim(1))
    throw InvalidArgument("linear: input " + shape_string(in.shape()) +
                          " incompatible with weight " + shape_string(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
    throw InvalidArgument("linear: bias length must equal output features");
  const std::size_t n = in.dim(0), din = in.dim(1), dout = weight.dim(0);
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  kernels::ConstMatrixMap<T> wm(weight.data(), dout, din);
  Tensor<T> y({n, dout});
  for (std::size_t r = 0; r < n; ++r) {
    Eigen::Map<Vec> out(y.data() + r * dout, dout);
    out.noalias() = wm * Eigen::Map<const Vec>(in.data() + r * din, din);
    out += Eigen::Map<const Vec>(bias.data(), dout);
  }
  return tape.record(std::move(y), {x, w, b}, [x, w, b, n, din, dout](Tape<T>& t,
                                                                      std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    kernels::ConstMatrixMap<T> wm(t.value(w).data(), dout, din);
    for (std::size_t r = 0; r < n; ++r) {
      Eigen::Map<const Vec> g(dy.data() + r * dout, dout);
      if (t.requires_grad(x))
        Eigen::Map<Vec>(t.grad_buffer(x).data() + r * din, din).noalias() += wm.transpose() * g;
      if (t.requires_grad(w))
        kernels::MatrixMap<T>(t.grad_buffer(w).data(), dout, din).noalias() +=
            g * Eigen::Map<const Vec>(t.value(x).data() + r * din, din).transpose();
      if (t.requires_grad(b)) Eigen::Map<Vec>(t.grad_buffer(b).data(), dout) += g;
    }
  });
}

enum class Reduction { mean, sum };

/// Cross-entropy of softmax(logits) against integer labels, over the rows of
/// an N x L logits matrix.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels,
                          Reduction reduction = Reduction::mean) {
  const Tensor<T>& z = tape.value(logits);
  if (z.rank() != 2 || z.dim(0) != labels.size())
    throw InvalidArgument("softmax_cross_entropy: logits must be N x L with N labels");
  const std::size_t n = z.dim(0), classes = z.dim(1);
  Tensor<T> logp({n, classes});
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes)
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                            " out of range [0," + std::to_string(classes) + ")");
    kernels::log_softmax_row<T>({z.data() + r * classes, classes},
                                {logp.data() + r * classes, classes});
    loss -= logp[r * classes + labels[r]];
  }
  const T scale = reduction == Reduction::mean ? T(1) / T(n) : T(1);
  std::vector<int> label_copy(labels.begin(), labels.end());
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{loss * scale}), {logits},
                     [logits, logp = std::move(logp), label_copy = std::move(label_copy), n,
                      classes, scale](Tape<T>& t, std::size_t self) {
                       const T g = t.grad_buffer(self)[0] * scale;
                       Tensor<T>& dz = t.grad_buffer(logits);
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t c = 0; c < classes; ++c) {
                           const T p = std::exp(logp[r * classes + c]);
                           dz[r * classes + c] +=
                               g * (p - (static_cast<int>(c) == label_copy[r] ? T(1) : T(0)));
                         }
                     });
}

/// Mean of squared differences.
template <typename T>
Var mse(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_same_shape(av, bv, "mse");
  if (av.empty()) throw InvalidArgument("mse: empty tensors");
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T count = static_cast<T>(av.size());
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{s / count}), {a, b},
                     [a, b, count](Tape<T>& t, std::size_t self) {
                       const T g = t.grad_buffer(self)[0] * T(2) / count;
                       const Tensor<T>& av = t.value(a);
                       const Tensor<T>& bv = t.value(b);
                       if (t.requires_grad(a)) {
                         Tensor<T>& da = t.grad_buffer(a);
                         for (std::size_t i = 0; i < da.size(); ++i) da[i] += g * (av[i] - bv[i]);
                       }
                       if (t.requires_grad(b)) {
                         Tensor<T>& db = t.grad_buffer(b);
                         for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g * (av[i] - bv[i]);
                       }
                     });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T s = 0;
  for (T v : tape.value(x).values()) s += v;
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{s}), {x},
                     [x](Tape<T>& t, std::size_t self) {
                       const T g = t.grad_buffer(self)[0];
                       for (auto& d : t.grad_buffer(x).values()) d += g;
                     });
}

template <typename T>
Var patch_to_channel(Tape<T>& tape, Var x, std::size_t m) {
  return tape.record(kernels::patch_to_channel(tape.value(x), m), {x},
                     [x, m](Tape<T>& t, std::size_t self) {
                       Tensor<T> back = kernels::channel_to_patch(t.grad_buffer(self), m);
                       Tensor<T>& dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += back[i];
                     });
}

template <typename T>
Var channel_to_patch(Tape<T>& tape, Var x, std::size_t m) {
  return tape.record(kernels::channel_to_patch(tape.value(x), m), {x},
                     [x, m](Tape<T>& t, std::size_t self) {
                       Tensor<T> back = kernels::patch_to_channel(t.grad_buffer(self), m);
                       Tensor<T>& dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += back[i];
                     });
}

}  // namespace ncis

#endif  // NCIS_AUTOGRAD_HPP
