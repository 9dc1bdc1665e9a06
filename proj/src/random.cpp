// SPDX-License-Identifier: Apache-2.0
#include "kadapt/random.hpp"

#include <numeric>
#include <utility>

namespace kadapt {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over both words.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor Rng::uniform_tensor(Shape shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

}  // namespace kadapt
