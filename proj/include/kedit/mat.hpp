#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace kedit {

using vec = std::vector<double>;

// Dense row-major matrix. Sizes in this project stay small (<= a few
// hundred per side), so plain loops beat any dependency here.
struct mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    mat() = default;
    mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0) {}

    double & operator()(int i, int j) { return a[size_t(i) * cols + j]; }
    double operator()(int i, int j) const { return a[size_t(i) * cols + j]; }

    double * row(int i) { return a.data() + size_t(i) * cols; }
    const double * row(int i) const { return a.data() + size_t(i) * cols; }

    std::span<double> row_span(int i) { return {row(i), size_t(cols)}; }
    std::span<const double> row_span(int i) const { return {row(i), size_t(cols)}; }

    friend bool operator==(const mat &, const mat &) = default;
};

inline double dot(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double nrm2(std::span<const double> x) {
    return std::sqrt(dot(x, x));
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// y = M x
void matvec(const mat & M, std::span<const double> x, std::span<double> y);
// y += M x
void matvec_add(const mat & M, std::span<const double> x, std::span<double> y);
// y = M^T x
void matvec_t(const mat & M, std::span<const double> x, std::span<double> y);

// C = A B^T  (A: m x k, B: n x k -> C: m x n)
mat matmul_nt(const mat & A, const mat & B);
// C = A B    (A: m x k, B: k x n)
mat matmul(const mat & A, const mat & B);

mat transpose(const mat & A);
// A += B
void add_inplace(mat & A, const mat & B);

bool all_finite(std::span<const double> x);
bool all_finite(const mat & M);

// In-place Cholesky of an SPD matrix (lower triangle). False if a pivot
// drops below tol.
bool cholesky_factor(mat & A, double tol = 0.0);
// Solve L L^T x = b for one rhs, L from cholesky_factor.
void cholesky_solve_vec(const mat & L, std::span<double> b);
// Solve A X = B column-by-column; B is n x m (rhs per COLUMN), overwritten.
void cholesky_solve_cols(const mat & L, mat & B);

} // namespace kedit
