#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace atwb {

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Folds tags into a seed, e.g. derive_seed(seed, {split, image_index}).
constexpr std::uint64_t derive_seed(std::uint64_t seed,
                                    std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t state = splitmix64(seed);
  for (std::uint64_t tag : tags) state = splitmix64(state ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
  return state;
}

// Seeded random stream. The engine is std::mt19937_64, whose output sequence the
// C++ standard fixes exactly; conversions to real values are done here rather than
// through <random> distributions, which are implementation-defined.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = bound ? (~std::uint64_t{0} - (~std::uint64_t{0} % bound)) : 0;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % bound;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Child stream that does not perturb this one.
  Prng fork(std::uint64_t tag) const { return Prng(derive_seed(seed_, {tag})); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// Seeded Fisher-Yates shuffle, independent of std::shuffle's unspecified algorithm.
template <typename Container>
void shuffle_in_place(Container& items, Prng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace atwb
