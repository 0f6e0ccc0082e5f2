#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace evp {

// SplitMix64 (Steele, Lea & Flood 2014). The whole generator is a counter
// advanced by the 64-bit golden gamma plus a fixed finalizer, so it is
// trivial to reimplement bit-exactly in any language. Every random draw in
// this project flows from one root seed through split_seed(), which makes
// datasets, initialization and training runs reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();

  // uniform in [0,1), 53 mantissa bits
  double next_double();
  // uniform in (0,1]
  double next_double_open();
  // unbiased uniform integer in [0,n), n > 0
  uint64_t next_below(uint64_t n);
  double next_uniform(double lo, double hi);
  bool next_coin() { return (next_u64() >> 63) != 0; }

  // standard normal via Box-Muller; the paired value is cached
  double next_gaussian();
  // normal(0, sigma) resampled until within clip standard deviations
  double next_trunc_normal(double sigma, double clip = 2.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Derives an independent stream seed from a root seed and a label or index.
uint64_t split_seed(uint64_t root, std::string_view tag);
uint64_t split_seed(uint64_t root, uint64_t index);

}  // namespace evp
