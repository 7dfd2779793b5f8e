#ifndef NCIS_OPTIM_HPP
#define NCIS_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ncis/autograd.hpp"
#include "ncis/rng.hpp"
#include "ncis/tensor.hpp"

namespace ncis {

/// Ordered, uniquely named parameter tensors.
template <typename T>
class ParameterSet {
 public:
  void add(std::string name, Tensor<T> value) {
    if (contains(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return true;
    return false;
  }

  Tensor<T>& operator[](const std::string& name) {
    for (auto& e : entries_)
      if (e.first == name) return e.second;
    throw InvalidArgument("no parameter named '" + name + "'");
  }
  const Tensor<T>& operator[](const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw InvalidArgument("no parameter named '" + name + "'");
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor<T>& tensor(std::size_t i) { return entries_[i].second; }
  const Tensor<T>& tensor(std::size_t i) const { return entries_[i].second; }

  /// Zero tensors with matching shapes; used for gradient accumulators.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, Tensor<T>(t.shape()));
    return out;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Parameters registered as variable leaves on a tape, in set order.
template <typename T>
std::vector<Var> bind(Tape<T>& tape, const ParameterSet<T>& params) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& [name, t] : params) vars.push_back(tape.variable(t));
  return vars;
}

/// Adds each bound leaf's gradient into `grads`.
template <typename T>
void accumulate_grads(const Tape<T>& tape, std::span<const Var> vars, ParameterSet<T>& grads) {
  for (std::size_t i = 0; i < vars.size(); ++i) {
    Tensor<T> g = tape.grad(vars[i]);
    Tensor<T>& acc = grads.tensor(i);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  }
}

/// He-normal initialization with the given fan-in.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(std::move(shape));
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  ParameterSet<T> m, v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParameterSet<T>& params) {
    return AdamState{params.zeros_like(), params.zeros_like(), 0};
  }
};

/// One bias-corrected Adam update. Throws TrainingDiverged on a non-finite
/// gradient without touching the parameters.
template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdamState<T>& state,
               const AdamOptions& opt) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw InvalidArgument("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.tensor(i).shape() != params.tensor(i).shape())
      throw InvalidArgument("adam_step: gradient shape mismatch for '" + params.name(i) + "'");
    if (!all_finite(grads.tensor(i)))
      throw TrainingDiverged("non-finite gradient for '" + params.name(i) + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params.tensor(i);
    const Tensor<T>& g = grads.tensor(i);
    Tensor<T>& m = state.m.tensor(i);
    Tensor<T>& v = state.v.tensor(i);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      const double vk = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      p[k] = static_cast<T>(p[k] - opt.lr * (mk / c1) / (std::sqrt(vk / c2) + opt.eps));
    }
  }
}

}  // namespace ncis

#endif  // NCIS_OPTIM_HPP
