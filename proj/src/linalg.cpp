#include "gmcn/linalg.hpp"

#include <cmath>
#include <vector>

namespace gmcn::la {

bool chol_packed(int k, const double* c, double* lf) {
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = c[packed_index(i, j)];
            for (int m = 0; m < j; ++m) s -= lf[packed_index(i, m)] * lf[packed_index(j, m)];
            if (i == j) {
                if (!(s > 0.0) || !std::isfinite(s)) return false;
                lf[packed_index(i, i)] = std::sqrt(s);
            } else {
                lf[packed_index(i, j)] = s / lf[packed_index(j, j)];
            }
        }
    }
    return true;
}

void chol_solve(int k, const double* lf, const double* b, double* x) {
    // L y = b
    for (int i = 0; i < k; ++i) {
        double s = b[i];
        for (int j = 0; j < i; ++j) s -= lf[packed_index(i, j)] * x[j];
        x[i] = s / lf[packed_index(i, i)];
    }
    // L^T x = y
    for (int i = k - 1; i >= 0; --i) {
        double s = x[i];
        for (int j = i + 1; j < k; ++j) s -= lf[packed_index(j, i)] * x[j];
        x[i] = s / lf[packed_index(i, i)];
    }
}

double chol_logdet(int k, const double* lf) {
    double s = 0;
    for (int i = 0; i < k; ++i) s += std::log(lf[packed_index(i, i)]);
    return 2.0 * s;
}

void chol_inverse(int k, const double* lf, double* cinv) {
    double e[3], x[3];
    for (int col = 0; col < k; ++col) {
        for (int i = 0; i < k; ++i) e[i] = (i == col) ? 1.0 : 0.0;
        chol_solve(k, lf, e, x);
        for (int i = col; i < k; ++i) cinv[packed_index(i, col)] = x[i];
    }
}

double min_eigenvalue(int k, const double* c) {
    if (k == 2) {
        const double a = c[0], b = c[1], d = c[2];
        const double tr = a + d;
        const double disc = std::sqrt(std::max(0.0, (a - d) * (a - d) + 4.0 * b * b));
        return 0.5 * (tr - disc);
    }
    // 3x3: trigonometric closed form for symmetric matrices.
    const double a = c[0], b = c[2], d = c[5];
    const double e = c[1], f = c[4], g = c[3];  // (1,0) (2,1) (2,0)
    const double p1 = e * e + f * f + g * g;
    const double q = (a + b + d) / 3.0;
    if (p1 == 0.0) return std::min(a, std::min(b, d));
    const double p2 = (a - q) * (a - q) + (b - q) * (b - q) + (d - q) * (d - q) + 2.0 * p1;
    const double p = std::sqrt(p2 / 6.0);
    // B = (C - q I) / p ; r = det(B) / 2 clamped into [-1, 1]
    const double b00 = (a - q) / p, b11 = (b - q) / p, b22 = (d - q) / p;
    const double b10 = e / p, b21 = f / p, b20 = g / p;
    double r = (b00 * (b11 * b22 - b21 * b21) - b10 * (b10 * b22 - b21 * b20) +
                b20 * (b10 * b21 - b11 * b20)) / 2.0;
    r = std::max(-1.0, std::min(1.0, r));
    const double phi = std::acos(r) / 3.0;
    // smallest eigenvalue uses phi + 2 pi / 3
    return q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
}

double trace_product_packed(int k, const double* a, const double* b) {
    // tr(AB) = sum_ij A_ij B_ij for symmetric A, B: diagonal once, off twice.
    double s = 0;
    for (int i = 0; i < k; ++i) {
        s += a[packed_index(i, i)] * b[packed_index(i, i)];
        for (int j = 0; j < i; ++j) s += 2.0 * a[packed_index(i, j)] * b[packed_index(i, j)];
    }
    return s;
}

bool chol_dense(int n, double* a) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (int m = 0; m < j; ++m) s -= a[i * n + m] * a[j * n + m];
            if (i == j) {
                if (!(s > 0.0) || !std::isfinite(s)) return false;
                a[i * n + i] = std::sqrt(s);
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    return true;
}

void chol_dense_solve(int n, const double* a, const double* b, double* x) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int j = 0; j < i; ++j) s -= a[i * n + j] * x[j];
        x[i] = s / a[i * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = x[i];
        for (int j = i + 1; j < n; ++j) s -= a[j * n + i] * x[j];
        x[i] = s / a[i * n + i];
    }
}

}  // namespace gmcn::la
