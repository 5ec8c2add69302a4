#include "fisa/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fisa {

namespace {

// Potentials-based assignment for an n x m cost matrix with n <= m.
// Returns row -> column, all rows matched. O(n^2 m).
std::vector<int64_t> solve_rows_le_cols(const Tensor& a) {
    const int64_t n = a.rows(), m = a.cols();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int64_t> p(m + 1, n);  // p[j]: row matched to column j (n = free)
    std::vector<int64_t> way(m + 1, 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t j0 = m;  // virtual free column
        p[m] = i;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int64_t i0 = p[j0];
            double delta = inf;
            int64_t j1 = -1;
            for (int64_t j = 0; j < m; ++j) {
                if (used[j]) continue;
                const double cur = a.at(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != n);
        do {
            const int64_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != m);
    }
    std::vector<int64_t> row_to_col(n, -1);
    for (int64_t j = 0; j < m; ++j)
        if (p[j] != n) row_to_col[p[j]] = j;
    return row_to_col;
}

}  // namespace

MatchResult hungarian_match(const Tensor& cost) {
    if (cost.shape.size() != 2) throw ShapeError("cost matrix must be 2-d");
    const int64_t n = cost.rows(), m = cost.cols();
    if (n == 0 || m == 0) {
        MatchResult r;
        r.assignment.assign(static_cast<size_t>(n), -1);
        return r;
    }
    for (double x : cost.v)
        if (!std::isfinite(x)) throw NumericError("non-finite matching cost");
    MatchResult r;
    if (n <= m) {
        r.assignment = solve_rows_le_cols(cost);
    } else {
        // more proposals than targets: solve the transpose, leaving extra
        // proposal rows unmatched
        Tensor tr({m, n});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) tr.at(j, i) = cost.at(i, j);
        std::vector<int64_t> col_to_row = solve_rows_le_cols(tr);
        r.assignment.assign(static_cast<size_t>(n), -1);
        for (int64_t j = 0; j < m; ++j) r.assignment[col_to_row[j]] = j;
    }
    for (int64_t i = 0; i < n; ++i)
        if (r.assignment[i] >= 0) r.total_cost += cost.at(i, r.assignment[i]);
    return r;
}

}  // namespace fisa
