#ifndef NCIS_PURIFIER_HPP
#define NCIS_PURIFIER_HPP

#include <cstddef>
#include <functional>
#include <string>
#include <utility>

#include "ncis/dataset.hpp"

namespace ncis {

/// A single-step purification map, assumed to produce values in [0, 1].
using PurifierStep = std::function<Image(const Image&)>;

/// i-fold composition of `step`; i = 0 returns x unchanged.
inline Image iterate(const PurifierStep& step, Image x, std::size_t iterations) {
  for (std::size_t k = 0; k < iterations; ++k) x = step(x);
  return x;
}

/// Input transformation applied before classification: `step` composed
/// `iterations` times.
struct Purifier {
  std::string name = "identity";
  PurifierStep step = [](const Image& x) { return x; };
  std::size_t iterations = 0;

  Image operator()(const Image& x) const { return iterate(step, x, iterations); }

  Purifier with_iterations(std::size_t i) const {
    Purifier p = *this;
    p.iterations = i;
    return p;
  }
};

inline Purifier identity_purifier() { return Purifier{}; }

}  // namespace ncis

#endif  // NCIS_PURIFIER_HPP
