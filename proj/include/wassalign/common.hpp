#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace wassalign {

// Error taxonomy. The CLI maps these onto exit codes, so keep the
// categories stable: validation/spec problems, numeric failures, I/O.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

uint64_t splitmix64(uint64_t x);

// FNV-1a, used for spec hashes and content fingerprints.
uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull);
uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull);

// Deterministic random stream. mt19937_64 supplies the bits; all
// distribution transforms are spelled out here because the std::
// distribution objects are implementation-defined and would break
// bit-reproducibility across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller; pairs are cached.
  double normal();

  // [0, n), rejection sampled (no modulo bias).
  int64_t uniform_int(int64_t n);

  // Independent stream derived from the *original* seed, so forks are
  // stable no matter how much of this stream was consumed.
  Rng fork(uint64_t stream) const;

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace wassalign
