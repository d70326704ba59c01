#pragma once

#include "flowseg/ndarray.hpp"

namespace flowseg::linalg {

/// LU factorization with partial pivoting of a square n x n array.
struct Lu {
  std::int64_t n = 0;
  std::vector<Real> lu;
  std::vector<std::int64_t> perm;
  int sign = 1;
  bool singular = false;
};

Lu lu_factor(const NdArr& m);
/// log|det m|; -inf when singular.
Real log_abs_det(const NdArr& m);
Real det(const NdArr& m);
/// Throws Error when |det| <= min_abs_det.
NdArr inverse(const NdArr& m, Real min_abs_det = Real(1e-12));
NdArr transpose(const NdArr& m);
NdArr matmul(const NdArr& a, const NdArr& b);
NdArr identity(std::int64_t n);

}  // namespace flowseg::linalg
