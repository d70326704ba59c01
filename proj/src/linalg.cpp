#include "flowseg/linalg.hpp"

#include <cmath>
#include <limits>
#include <utility>

namespace flowseg::linalg {

static std::int64_t square_extent(const char* op, const NdArr& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError(std::string(op) + ": expected a square matrix, got " + shape_str(m.shape()));
  }
  return m.dim(0);
}

Lu lu_factor(const NdArr& m) {
  Lu f;
  f.n = square_extent("lu_factor", m);
  const auto n = f.n;
  f.lu = m.vec();
  f.perm.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) f.perm[i] = i;
  auto a = [&](std::int64_t r, std::int64_t c) -> Real& { return f.lu[static_cast<std::size_t>(r * n + c)]; };
  for (std::int64_t k = 0; k < n; ++k) {
    std::int64_t piv = k;
    Real best = std::abs(a(k, k));
    for (std::int64_t r = k + 1; r < n; ++r) {
      if (std::abs(a(r, k)) > best) {
        best = std::abs(a(r, k));
        piv = r;
      }
    }
    if (best == Real(0)) {
      f.singular = true;
      continue;
    }
    if (piv != k) {
      for (std::int64_t c = 0; c < n; ++c) std::swap(a(k, c), a(piv, c));
      std::swap(f.perm[k], f.perm[piv]);
      f.sign = -f.sign;
    }
    for (std::int64_t r = k + 1; r < n; ++r) {
      a(r, k) /= a(k, k);
      const Real l = a(r, k);
      for (std::int64_t c = k + 1; c < n; ++c) a(r, c) -= l * a(k, c);
    }
  }
  return f;
}

Real log_abs_det(const NdArr& m) {
  const Lu f = lu_factor(m);
  if (f.singular) return -std::numeric_limits<Real>::infinity();
  Real s = 0;
  for (std::int64_t i = 0; i < f.n; ++i) s += std::log(std::abs(f.lu[static_cast<std::size_t>(i * f.n + i)]));
  return s;
}

Real det(const NdArr& m) {
  const Lu f = lu_factor(m);
  if (f.singular) return 0;
  Real d = f.sign;
  for (std::int64_t i = 0; i < f.n; ++i) d *= f.lu[static_cast<std::size_t>(i * f.n + i)];
  return d;
}

NdArr inverse(const NdArr& m, Real min_abs_det) {
  const Lu f = lu_factor(m);
  const auto n = f.n;
  if (f.singular || !(std::exp(log_abs_det(m)) > min_abs_det)) {
    throw Error("inverse: matrix is singular (|det| <= " + std::to_string(min_abs_det) + ")");
  }
  NdArr inv(Shape{n, n});
  std::vector<Real> col(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < n; ++j) {
    // Solve L U x = P e_j.
    for (std::int64_t i = 0; i < n; ++i) col[i] = f.perm[i] == j ? Real(1) : Real(0);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t k = 0; k < i; ++k) col[i] -= f.lu[i * n + k] * col[k];
    }
    for (std::int64_t i = n - 1; i >= 0; --i) {
      for (std::int64_t k = i + 1; k < n; ++k) col[i] -= f.lu[i * n + k] * col[k];
      col[i] /= f.lu[i * n + i];
    }
    for (std::int64_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
  return inv;
}

NdArr transpose(const NdArr& m) {
  if (m.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(m.shape()));
  const auto r = m.dim(0), c = m.dim(1);
  NdArr t(Shape{c, r});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) t[j * r + i] = m[i * c + j];
  return t;
}

NdArr matmul(const NdArr& a, const NdArr& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
  NdArr out(Shape{n, m});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      const Real v = a[i * k + p];
      for (std::int64_t j = 0; j < m; ++j) out[i * m + j] += v * b[p * m + j];
    }
  return out;
}

NdArr identity(std::int64_t n) {
  NdArr out(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i) out[i * n + i] = 1;
  return out;
}

}  // namespace flowseg::linalg
