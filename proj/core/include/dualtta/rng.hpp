#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "dualtta/tensor.hpp"

namespace dualtta::ndgrad {

// Counter-based splittable generator (SplitMix-style key derivation).
// Every consumer derives its own named sub-stream from an experiment seed, so
// dataset generation, transform noise and shuffles are independently
// reproducible. Output depends only on (key, counter): identical seed and
// split path give identical values across runs.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  // Independent child stream keyed by a label or an index. Does not advance
  // this stream's counter.
  RngStream split(std::string_view label) const;
  RngStream split(std::uint64_t index) const;

  std::uint64_t next_u64();
  std::uint64_t bounded(std::uint64_t n);  // uniform on [0, n)
  double uniform();                        // [0, 1)
  double gaussian();                       // N(0, 1), Marsaglia polar method

  Tensor gaussian_tensor(const Shape& shape);
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  RngStream(std::uint64_t key, int);  // raw-key constructor

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dualtta::ndgrad
