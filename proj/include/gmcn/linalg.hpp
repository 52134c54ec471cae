#pragma once

#include <cstddef>
#include <stdexcept>

// Small symmetric matrices (k = 2 or 3) stored as packed lower triangles,
// row major: 2D [c00 c10 c11], 3D [c00 c10 c11 c20 c21 c22].
// All factorizations are Cholesky based; no explicit inversion anywhere
// except the tiny packed inverse derived from an existing factor.

namespace gmcn::la {

inline constexpr int packed_size(int k) { return k * (k + 1) / 2; }
inline constexpr int packed_index(int i, int j) { return i * (i + 1) / 2 + j; }  // requires i >= j

// Cholesky of a packed symmetric matrix. Writes the packed lower factor L
// (C = L L^T) into lf. Returns false if a pivot is not strictly positive.
bool chol_packed(int k, const double* c, double* lf);

// Solve L L^T x = b given the packed factor.
void chol_solve(int k, const double* lf, const double* b, double* x);

// log det(C) = 2 sum log L_ii
double chol_logdet(int k, const double* lf);

// Packed inverse of C from its factor.
void chol_inverse(int k, const double* lf, double* cinv);

// Smallest eigenvalue of a packed symmetric matrix, closed form.
double min_eigenvalue(int k, const double* c);

// Trace of a packed symmetric matrix.
inline double trace_packed(int k, const double* c) {
    double t = 0;
    for (int i = 0; i < k; ++i) t += c[packed_index(i, i)];
    return t;
}

// tr(A * B) for packed symmetric A, B.
double trace_product_packed(int k, const double* a, const double* b);

// Dense n x n SPD solve (normal equations in the least-squares reference).
// A is row major and overwritten with its Cholesky factor. Returns false on
// a non positive pivot.
bool chol_dense(int n, double* a);
void chol_dense_solve(int n, const double* a, const double* b, double* x);

}  // namespace gmcn::la
