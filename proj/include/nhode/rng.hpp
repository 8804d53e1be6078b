#pragma once

#include <cstdint>
#include <string_view>

namespace nhode {

// Counter-based generator: the n-th output is a pure function of (key, n),
// so draws can be consumed in parallel or replayed from any offset.
// Finalizer is the splitmix64 mix; increment is the 64-bit golden ratio.
inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// FNV-1a, used to turn stream names into key material.
inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_ + kGolden * counter_++); }

  // [0,1) with 53 random mantissa bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Half-open [a,b).
  double uniform(double a, double b) { return a + (b - a) * next_unit(); }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Named derivation: child streams (data/init/shuffle/eval/...) never collide
// with each other or with sibling indices under the same root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t index = 0) {
  return mix64(mix64(root ^ hash_tag(tag)) + kGolden * index);
}

constexpr const char* kRngName = "splitmix64-counter";

}  // namespace nhode
