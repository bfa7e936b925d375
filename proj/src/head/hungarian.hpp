#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "common.hpp"

namespace tmg::head {

namespace detail {

// Classic O(n^3) potentials algorithm on a square matrix; returns the column
// assigned to each row.
inline std::vector<int> hungarian_square(const std::vector<double>& a, int n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(n) + 1, 0.0);
    std::vector<int> p(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(size_t(n) + 1, inf);
        std::vector<char> used(size_t(n) + 1, 0);
        do {
            used[size_t(j0)] = 1;
            int i0 = p[size_t(j0)], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[size_t(j)]) continue;
                double cur = a[size_t(i0 - 1) * size_t(n) + size_t(j - 1)] - u[size_t(i0)] - v[size_t(j)];
                if (cur < minv[size_t(j)]) {
                    minv[size_t(j)] = cur;
                    way[size_t(j)] = j0;
                }
                if (minv[size_t(j)] < delta) {
                    delta = minv[size_t(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[size_t(j)]) {
                    u[size_t(p[size_t(j)])] += delta;
                    v[size_t(j)] -= delta;
                } else {
                    minv[size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[size_t(j0)] != 0);
        do {
            int j1 = way[size_t(j0)];
            p[size_t(j0)] = p[size_t(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(size_t(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[size_t(j)] > 0) row_to_col[size_t(p[size_t(j)] - 1)] = j - 1;
    return row_to_col;
}

}  // namespace detail

// Minimum total cost of assigning min(n,m) row/column pairs. Rectangular
// inputs are padded square with zero-cost dummies (every complete square
// assignment carries the same dummy total, so the real part stays optimal).
inline double assignment_value(const std::vector<double>& cost, int64_t n, int64_t m) {
    check(n >= 0 && m >= 0 && int64_t(cost.size()) == n * m, "hungarian: cost size mismatch");
    if (n == 0 || m == 0) return 0.0;
    for (double c : cost) check(std::isfinite(c), "hungarian: costs must be finite");
    int s = int(std::max(n, m));
    std::vector<double> a(size_t(s) * size_t(s), 0.0);
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < m; ++c) a[size_t(r) * size_t(s) + size_t(c)] = cost[size_t(r * m + c)];
    auto row_to_col = detail::hungarian_square(a, s);
    double total = 0.0;
    for (int64_t r = 0; r < n; ++r)
        if (row_to_col[size_t(r)] < m) total += cost[size_t(r * m + row_to_col[size_t(r)])];
    return total;
}

// Optimal assignment of min(n,m) pairs, (row, col) sorted by row. Among
// all optimal assignments, returns the lexicographically smallest row->col
// map (unmatched rows compare as +inf), fixed greedily row by row with a
// re-solve of the remaining subproblem per candidate.
inline std::vector<std::pair<int64_t, int64_t>> hungarian(const std::vector<double>& cost,
                                                          int64_t n, int64_t m) {
    std::vector<std::pair<int64_t, int64_t>> out;
    if (n == 0 || m == 0) return out;
    double remaining = assignment_value(cost, n, m);
    std::vector<int64_t> rows(static_cast<size_t>(n)), cols(static_cast<size_t>(m));
    for (int64_t i = 0; i < n; ++i) rows[size_t(i)] = i;
    for (int64_t j = 0; j < m; ++j) cols[size_t(j)] = j;
    int64_t quota = std::min(n, m);
    auto sub_value = [&](const std::vector<int64_t>& rr, const std::vector<int64_t>& cc) {
        std::vector<double> sc(rr.size() * cc.size());
        for (size_t i = 0; i < rr.size(); ++i)
            for (size_t j = 0; j < cc.size(); ++j)
                sc[i * cc.size() + j] = cost[size_t(rr[i] * m + cc[j])];
        return assignment_value(sc, int64_t(rr.size()), int64_t(cc.size()));
    };
    while (quota > 0) {
        int64_t r = rows.front();
        std::vector<int64_t> rest_rows(rows.begin() + 1, rows.end());
        double eps = 1e-9 * (1.0 + std::abs(remaining));
        bool fixed = false;
        for (size_t j = 0; j < cols.size(); ++j) {
            std::vector<int64_t> rest_cols = cols;
            rest_cols.erase(rest_cols.begin() + std::ptrdiff_t(j));
            double with = cost[size_t(r * m + cols[j])] + sub_value(rest_rows, rest_cols);
            if (with <= remaining + eps) {
                out.emplace_back(r, cols[j]);
                remaining = with - cost[size_t(r * m + cols[j])];
                cols = std::move(rest_cols);
                --quota;
                fixed = true;
                break;
            }
        }
        // no column keeps the optimum -> this row sits out (only possible
        // when rows outnumber the quota)
        check(fixed || int64_t(rest_rows.size()) >= quota, "hungarian: internal fixing failure");
        rows = std::move(rest_rows);
    }
    return out;
}

}  // namespace tmg::head
