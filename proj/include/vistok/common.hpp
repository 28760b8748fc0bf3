#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vistok {

// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch one base type at the CLI boundary.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes disagree with an operation's contract.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Input outside an elementwise op's mathematical domain (e.g. log of x <= 0).
class DomainError : public Error {
public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
  using Error::Error;
};

// An operation's precondition was violated (empty index set, non-scalar loss).
class ContractError : public Error {
public:
  using Error::Error;
};

// Token id out of vocabulary range, or unknown word.
class VocabError : public Error {
public:
  using Error::Error;
};

// Sequence exceeds the configured maximum length.
class LengthError : public Error {
public:
  using Error::Error;
};

// Degenerate numeric input (zero vector where a direction is required).
class DegenerateInputError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// All randomness in the library flows through Rng so that runs are
// reproducible from a single seed.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // Normal draw rejected outside +/- 2 stddev.
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (v >= -2.0 * stddev && v <= 2.0 * stddev) return v;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(engine_);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw ParseError("rng: malformed engine state string");
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace vistok
