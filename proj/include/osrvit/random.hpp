#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "osrvit/tensor.hpp"

namespace osrvit {

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a purpose tag.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

/// Normal(0, std) resampled until within two standard deviations.
template <class T>
void fill_truncated_normal(Tensor<T>& t, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) {
    double z;
    do {
      z = dist(rng);
    } while (z < -2.0 || z > 2.0);
    v = static_cast<T>(z * std);
  }
}

/// Fisher-Yates with an explicit uniform draw so the permutation does not
/// depend on the standard library's shuffle implementation.
template <class V>
void seeded_shuffle(std::vector<V>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace osrvit
