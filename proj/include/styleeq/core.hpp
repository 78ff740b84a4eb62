#ifndef STYLEEQ_CORE_HPP
#define STYLEEQ_CORE_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace styleeq {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Real = double;
using Matrix = MatrixX<Real>;
using Vector = VectorX<Real>;

/// Raised when an operation receives input outside its documented domain.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numeric computation produces a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : tag) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hierarchical seed split: the child seed depends only on the parent seed,
/// a purpose tag and an index.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view purpose,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(parent ^ hash_tag(purpose)) + index);
}

inline Rng make_rng(std::uint64_t parent, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(parent, purpose, index));
}

template <typename Scalar>
MatrixX<Scalar> standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixX<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(normal(rng));
  return m;
}

}  // namespace styleeq

#endif  // STYLEEQ_CORE_HPP
