#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace asyncfm {

// Row-major so tensor serialization and fingerprinting can walk raw memory.
template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Production scalar. Model code is templated so tests can instantiate the
// same network in double for finite-difference checks.
using Real = float;
using MatR = Matrix<Real>;
using VecR = Vector<Real>;

// Length-L binary mask; 1 means the token is (re)generated.
using TokenMask = std::vector<uint8_t>;

inline TokenMask full_mask(int L) { return TokenMask(L, 1); }
inline TokenMask empty_mask(int L) { return TokenMask(L, 0); }

inline int mask_cardinality(const TokenMask& m) {
  int c = 0;
  for (uint8_t b : m) c += b;
  return c;
}

// Synthetic stand-in for the observation/instruction prefix: S state token
// rows plus a task id that selects a learned embedding.
struct ContextBundle {
  MatR state_tokens;  // S x d_in
  int task_id = 0;
};

struct StaleCacheError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace asyncfm
