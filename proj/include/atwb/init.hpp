#pragma once

#include <atwb/prng.hpp>
#include <atwb/tensor.hpp>

#include <cmath>
#include <cstddef>

namespace atwb {

// Kaiming-uniform (fan-in, ReLU gain): U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Prng& rng) {
  Tensor<T> out(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : out.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

}  // namespace atwb
