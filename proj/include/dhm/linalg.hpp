#pragma once

// Small dense 64-bit linear algebra for representation analysis: a row-major
// matrix, cyclic Jacobi for symmetric eigenproblems and one-sided Jacobi SVD.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dhm/error.hpp"

namespace dhm {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), a(std::move(v)) {
        if (a.size() != r * c) throw ShapeError("matrix: value count mismatch");
    }

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    double frobenius() const {
        double s = 0;
        for (double v : a) s += v * v;
        return std::sqrt(s);
    }
};

inline Matrix matmul(const Matrix& x, const Matrix& y) {
    if (x.cols != y.rows) throw ShapeError("matrix product: inner dimensions differ");
    Matrix z(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double v = x(i, k);
            if (v == 0.0) continue;
            for (std::size_t j = 0; j < y.cols; ++j) z(i, j) += v * y(k, j);
        }
    return z;
}

/// xᵀy without forming the transpose.
inline Matrix matmul_tn(const Matrix& x, const Matrix& y) {
    if (x.rows != y.rows) throw ShapeError("matrix product: row counts differ");
    Matrix z(x.cols, y.cols);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t i = 0; i < x.cols; ++i) {
            const double v = x(r, i);
            if (v == 0.0) continue;
            for (std::size_t j = 0; j < y.cols; ++j) z(i, j) += v * y(r, j);
        }
    return z;
}

inline Matrix center_columns(const Matrix& m) {
    Matrix c = m;
    for (std::size_t j = 0; j < m.cols; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < m.rows; ++i) mean += m(i, j);
        mean /= static_cast<double>(m.rows);
        for (std::size_t i = 0; i < m.rows; ++i) c(i, j) -= mean;
    }
    return c;
}

struct SymEigen {
    std::vector<double> values;  // descending
    Matrix vectors;              // columns, matching values
};

/// Cyclic Jacobi rotations on a symmetric matrix.
inline SymEigen sym_eigen(const Matrix& s, int max_sweeps = 100) {
    if (s.rows != s.cols) throw ShapeError("sym_eigen: matrix not square");
    const std::size_t n = s.rows;
    Matrix a = s;
    Matrix v = Matrix::identity(n);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0, diag = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += a(i, j) * a(i, j);
        if (off <= 1e-30 * std::max(diag, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    SymEigen out;
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values.push_back(a(idx[k], idx[k]));
        for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, idx[k]);
    }
    return out;
}

struct Svd {
    Matrix u;                   // rows x k, orthonormal columns (zero where s == 0)
    std::vector<double> s;      // k = min(rows, cols), descending
    Matrix v;                   // cols x k
};

/// One-sided Jacobi (Hestenes) SVD. Works on the wide case through the transpose.
inline Svd svd(const Matrix& m, int max_sweeps = 60) {
    if (m.rows < m.cols) {
        Svd t = svd(m.transposed(), max_sweeps);
        return Svd{t.v, t.s, t.u};
    }
    const std::size_t n = m.rows, d = m.cols;
    Matrix u = m;
    Matrix v = Matrix::identity(d);
    const double tol = 1e-15;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) {
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    alpha += u(i, p) * u(i, p);
                    beta += u(i, q) * u(i, q);
                    gamma += u(i, p) * u(i, q);
                }
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), sn = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double up = u(i, p), uq = u(i, q);
                    u(i, p) = c * up - sn * uq;
                    u(i, q) = sn * up + c * uq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - sn * vq;
                    v(i, q) = sn * vp + c * vq;
                }
            }
        if (!rotated) break;
    }
    std::vector<double> norms(d);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += u(i, j) * u(i, j);
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return norms[i] > norms[j]; });
    Svd out{Matrix(n, d), {}, Matrix(d, d)};
    for (std::size_t k = 0; k < d; ++k) {
        const std::size_t j = idx[k];
        out.s.push_back(norms[j]);
        for (std::size_t i = 0; i < n; ++i) out.u(i, k) = norms[j] > 0 ? u(i, j) / norms[j] : 0.0;
        for (std::size_t i = 0; i < d; ++i) out.v(i, k) = v(i, j);
    }
    return out;
}

}  // namespace dhm
