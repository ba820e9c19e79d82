#pragma once

#include <cstdint>
#include <vector>

#include "sibling/rng.hpp"
#include "sibling/tensor.hpp"

namespace sibling::test {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Uniform entries kept at least `gap` away from zero (keeps relu off its kink).
inline Tensor random_off_zero(Rng& rng, Shape shape, double lo, double hi,
                              double gap) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v) < gap);
  }
  return t;
}

inline Tensor random_image(Rng& rng, std::size_t side = 16) {
  return random_tensor(rng, Shape{side, side, 1}, 0.0, 1.0);
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) {
      return false;
    }
  }
  return true;
}

}  // namespace sibling::test
