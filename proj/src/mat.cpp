#include "kedit/mat.hpp"

namespace kedit {

void matvec(const mat & M, std::span<const double> x, std::span<double> y) {
    for (int i = 0; i < M.rows; ++i) {
        const double * r = M.row(i);
        double s = 0.0;
        for (int j = 0; j < M.cols; ++j) s += r[j] * x[j];
        y[i] = s;
    }
}

void matvec_add(const mat & M, std::span<const double> x, std::span<double> y) {
    for (int i = 0; i < M.rows; ++i) {
        const double * r = M.row(i);
        double s = 0.0;
        for (int j = 0; j < M.cols; ++j) s += r[j] * x[j];
        y[i] += s;
    }
}

void matvec_t(const mat & M, std::span<const double> x, std::span<double> y) {
    for (size_t j = 0; j < y.size(); ++j) y[j] = 0.0;
    for (int i = 0; i < M.rows; ++i) {
        const double * r = M.row(i);
        const double xi = x[i];
        if (xi == 0.0) continue;
        for (int j = 0; j < M.cols; ++j) y[j] += xi * r[j];
    }
}

mat matmul_nt(const mat & A, const mat & B) {
    mat C(A.rows, B.rows);
    for (int i = 0; i < A.rows; ++i) {
        const double * ai = A.row(i);
        for (int j = 0; j < B.rows; ++j) {
            const double * bj = B.row(j);
            double s = 0.0;
            for (int k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
            C(i, j) = s;
        }
    }
    return C;
}

mat matmul(const mat & A, const mat & B) {
    mat C(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double * ai = A.row(i);
        double * ci = C.row(i);
        for (int k = 0; k < A.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double * bk = B.row(k);
            for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return C;
}

mat transpose(const mat & A) {
    mat T(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
    return T;
}

void add_inplace(mat & A, const mat & B) {
    for (size_t i = 0; i < A.a.size(); ++i) A.a[i] += B.a[i];
}

bool all_finite(std::span<const double> x) {
    for (double v : x) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool all_finite(const mat & M) {
    return all_finite(std::span<const double>(M.a));
}

bool cholesky_factor(mat & A, double tol) {
    const int n = A.rows;
    for (int j = 0; j < n; ++j) {
        double d = A(j, j);
        for (int k = 0; k < j; ++k) d -= A(j, k) * A(j, k);
        if (!(d > tol)) return false;
        const double ljj = std::sqrt(d);
        A(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = A(i, j);
            for (int k = 0; k < j; ++k) s -= A(i, k) * A(j, k);
            A(i, j) = s / ljj;
        }
    }
    return true;
}

void cholesky_solve_vec(const mat & L, std::span<double> b) {
    const int n = L.rows;
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k) s -= L(i, k) * b[k];
        b[i] = s / L(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int k = i + 1; k < n; ++k) s -= L(k, i) * b[k];
        b[i] = s / L(i, i);
    }
}

void cholesky_solve_cols(const mat & L, mat & B) {
    const int n = L.rows;
    std::vector<double> col(static_cast<size_t>(n));
    for (int j = 0; j < B.cols; ++j) {
        for (int i = 0; i < n; ++i) col[i] = B(i, j);
        cholesky_solve_vec(L, col);
        for (int i = 0; i < n; ++i) B(i, j) = col[i];
    }
}

} // namespace kedit
