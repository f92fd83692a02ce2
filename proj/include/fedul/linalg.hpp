#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedul/matrix.hpp"

namespace fedul::linalg {

// Singular values of `a` (descending) by one-sided Jacobi rotations.
// Accurate for the small, well-scaled matrices used for prior checks.
inline std::vector<double> singular_values(Matrix a, int max_sweeps = 60) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                if (gamma == 0.0) continue;
                const double scale = std::sqrt(alpha * beta);
                if (scale == 0.0) continue;
                off = std::max(off, std::abs(gamma) / scale);
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p);
                    const double aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
            }
        }
        if (off < 1e-15) break;
    }
    std::vector<double> sv(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += a(i, j) * a(i, j);
        sv[j] = std::sqrt(acc);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

// Number of singular values above `tol`.
inline std::size_t numerical_rank(const Matrix& a, double tol) {
    const auto sv = singular_values(a.rows() >= a.cols() ? a : a.transposed());
    return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [tol](double s) { return s > tol; }));
}

// Minimises ||A x - b||_2 via Householder QR. Requires rows >= cols and full
// column rank; throws SingularityError otherwise.
inline std::vector<double> least_squares(Matrix a, std::vector<double> b) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (b.size() != m) throw ShapeError("least_squares: rhs length mismatch");
    if (m < n) throw ShapeError("least_squares: underdetermined system");

    double max_abs = 0.0;
    for (double v : a.values()) max_abs = std::max(max_abs, std::abs(v));

    for (std::size_t k = 0; k < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) norm += a(i, k) * a(i, k);
        norm = std::sqrt(norm);
        if (norm <= 1e-14 * std::max(1.0, max_abs)) throw SingularityError("least_squares: rank-deficient system");
        const double alpha = a(k, k) > 0 ? -norm : norm;
        std::vector<double> v(m - k);
        for (std::size_t i = k; i < m; ++i) v[i - k] = a(i, k);
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double x : v) vnorm2 += x * x;
        if (vnorm2 == 0.0) continue;
        for (std::size_t j = k; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < m; ++i) dot += v[i - k] * a(i, j);
            const double f = 2.0 * dot / vnorm2;
            for (std::size_t i = k; i < m; ++i) a(i, j) -= f * v[i - k];
        }
        double dot = 0.0;
        for (std::size_t i = k; i < m; ++i) dot += v[i - k] * b[i];
        const double f = 2.0 * dot / vnorm2;
        for (std::size_t i = k; i < m; ++i) b[i] -= f * v[i - k];
    }

    std::vector<double> x(n, 0.0);
    for (std::size_t kk = n; kk-- > 0;) {
        double acc = b[kk];
        for (std::size_t j = kk + 1; j < n; ++j) acc -= a(kk, j) * x[j];
        x[kk] = acc / a(kk, kk);
    }
    return x;
}

}  // namespace fedul::linalg
