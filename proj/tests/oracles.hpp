#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace dhm::oracle {

struct DensityPartition {
    std::vector<bool> core;
    std::vector<int> labels;  // -1 for noise, canonical ids by minimum member index
};

/// DBSCAN by transitive closure of the core reachability relation, computed with
/// boolean Warshall on an explicit n x n matrix. Deliberately shares no code with
/// the library routine.
inline DensityPartition dbscan_closure(const std::vector<std::vector<double>>& pts, double eps, int min_samples) {
    const std::size_t n = pts.size();
    auto within = [&](std::size_t i, std::size_t j) {
        double s = 0;
        for (std::size_t t = 0; t < pts[i].size(); ++t) s += (pts[i][t] - pts[j][t]) * (pts[i][t] - pts[j][t]);
        return std::sqrt(s) <= eps;
    };
    DensityPartition out;
    out.core.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        int c = 0;
        for (std::size_t j = 0; j < n; ++j) c += within(i, j);
        out.core[i] = c >= min_samples;
    }
    std::vector<std::vector<char>> reach(n, std::vector<char>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) reach[i][j] = out.core[i] && out.core[j] && (i == j || within(i, j));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            if (reach[i][k])
                for (std::size_t j = 0; j < n; ++j)
                    if (reach[k][j]) reach[i][j] = 1;
    // Representative of each core point: the lowest-index core point it reaches.
    std::vector<long> rep(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (out.core[i])
            for (std::size_t j = 0; j < n; ++j)
                if (reach[i][j]) {
                    rep[i] = static_cast<long>(j);
                    break;
                }
    for (std::size_t i = 0; i < n; ++i)
        if (!out.core[i])
            for (std::size_t j = 0; j < n; ++j)
                if (out.core[j] && within(i, j)) {
                    rep[i] = rep[j];
                    break;
                }
    out.labels.assign(n, -1);
    std::vector<long> seen;
    for (std::size_t i = 0; i < n; ++i) {
        if (rep[i] < 0) continue;
        auto it = std::find(seen.begin(), seen.end(), rep[i]);
        if (it == seen.end()) {
            seen.push_back(rep[i]);
            it = seen.end() - 1;
        }
        out.labels[i] = static_cast<int>(it - seen.begin());
    }
    return out;
}

/// Maximum matched trace over all permutations (k small).
inline long long brute_force_matching(const std::vector<std::vector<long long>>& m) {
    std::vector<int> perm(m.size());
    std::iota(perm.begin(), perm.end(), 0);
    long long best = -1;
    do {
        long long s = 0;
        for (std::size_t i = 0; i < m.size(); ++i) s += m[i][static_cast<std::size_t>(perm[i])];
        best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

}  // namespace dhm::oracle
