#pragma once

#include <limits>
#include <vector>

#include "common.hpp"

namespace latent_forge {

/// Minimum-cost one-to-one assignment of every row to a distinct column
/// (rows <= cols). Shortest augmenting path with potentials, O(rows^2 * cols).
/// Returns column index per row.
template <class Derived>
std::vector<Index> solve_assignment(const Eigen::MatrixBase<Derived>& cost) {
    const Index n = cost.rows(), m = cost.cols();
    if (n > m) throw ShapeError("solve_assignment requires rows <= cols");
    if (n == 0) return {};
    if (!cost.allFinite()) throw NumericalError("solve_assignment: non-finite cost");
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based internals; index 0 is the virtual source.
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
    std::vector<Index> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
    for (Index i = 1; i <= n; ++i) {
        p[0] = i;
        Index j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
        std::vector<bool> used(static_cast<std::size_t>(m + 1), false);
        do {
            used[static_cast<std::size_t>(j0)] = true;
            const Index i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            Index j1 = 0;
            for (Index j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = static_cast<double>(cost(i0 - 1, j - 1)) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (Index j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const Index j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<Index> assignment(static_cast<std::size_t>(n), -1);
    for (Index j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] != 0) assignment[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return assignment;
}

/// Rows scaled to unit L2 norm; zero rows are left as zero.
inline Matrix<double> normalize_rows(const Matrix<double>& m) {
    Matrix<double> out = m;
    for (Index i = 0; i < out.rows(); ++i) {
        const double norm = out.row(i).norm();
        if (norm > 0.0) out.row(i) /= norm;
    }
    return out;
}

/// Cosine similarity between every row of a and every row of b.
inline Matrix<double> cosine_matrix(const Matrix<double>& a, const Matrix<double>& b) {
    if (a.cols() != b.cols()) throw ShapeError("cosine_matrix: column counts differ");
    return normalize_rows(a) * normalize_rows(b).transpose();
}

}  // namespace latent_forge
