#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "care/ops.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"

namespace care::test {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(r, c, std::move(v), requires_grad);
}

/// Entries bounded away from zero, for kinked functions.
inline Tensor away_from_zero(std::size_t r, std::size_t c, Rng& rng, double margin = 0.1) {
  std::vector<double> v(r * c);
  for (double& x : v) {
    const double u = margin + rng.uniform();
    x = rng.uniform() < 0.5 ? -u : u;
  }
  return Tensor::from(r, c, std::move(v), true);
}

/// Σ w ⊙ t with fixed random weights, so every output entry carries a distinct gradient.
inline Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(t, random_tensor(t.rows(), t.cols(), rng, false)));
}

inline std::filesystem::path source_dir() { return CARE_SOURCE_DIR; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("care_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace care::test
