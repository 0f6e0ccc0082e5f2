#include "evp/rng.hpp"

#include <cmath>

#include "evp/error.hpp"

namespace evp {

namespace {

constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ull;

uint64_t mix(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t Rng::next_u64() {
  state_ += kGamma;
  return mix(state_);
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_double_open() {
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

uint64_t Rng::next_below(uint64_t n) {
  if (n == 0) throw DomainError("next_below: n must be positive");
  const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Rng::next_uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

double Rng::next_gaussian() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  const double u1 = next_double_open();
  const double u2 = next_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

double Rng::next_trunc_normal(double sigma, double clip) {
  for (;;) {
    double g = next_gaussian();
    if (std::abs(g) <= clip) return g * sigma;
  }
}

uint64_t split_seed(uint64_t root, std::string_view tag) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return mix(mix(root + kGamma) ^ h);
}

uint64_t split_seed(uint64_t root, uint64_t index) {
  return mix(mix(root + kGamma) ^ mix(index + kGamma));
}

}  // namespace evp
