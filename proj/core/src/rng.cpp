#include "dualtta/rng.hpp"

#include <cmath>

#include "dualtta/errors.hpp"

namespace dualtta::ndgrad {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

RngStream::RngStream(std::uint64_t key, int) : key_(key) {}

RngStream RngStream::split(std::string_view label) const {
  return RngStream(mix64(key_ ^ fnv1a(label)), 0);
}

RngStream RngStream::split(std::uint64_t index) const {
  return RngStream(mix64(key_ ^ mix64(index + kGolden)), 0);
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

std::uint64_t RngStream::bounded(std::uint64_t n) {
  if (n == 0) throw ContractError("RngStream::bounded requires n > 0");
  const std::uint64_t threshold = (0 - n) % n;  // rejection zone for uniformity
  for (;;) {
    std::uint64_t x = next_u64();
    if (x >= threshold) return x % n;
  }
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v, q;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    q = u * u + v * v;
  } while (q >= 1.0 || q == 0.0);
  const double f = std::sqrt(-2.0 * std::log(q) / q);
  spare_ = v * f;
  have_spare_ = true;
  return u * f;
}

Tensor RngStream::gaussian_tensor(const Shape& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = gaussian();
  return t;
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(bounded(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace dualtta::ndgrad
