// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>

#include "protoseg/tensor.hpp"

namespace protoseg::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return random_tensor(s, rng, lo, hi);
}

}  // namespace protoseg::testing
