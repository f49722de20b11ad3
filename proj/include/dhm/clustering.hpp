#pragma once

// Cluster assigners used to build tasks from unlabeled embeddings: DBSCAN for
// heterogeneous tasks, K-means for fixed-way tasks and zero-shot evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <vector>

#include "dhm/error.hpp"
#include "dhm/rng.hpp"
#include "dhm/tensor.hpp"

namespace dhm {

inline constexpr int NOISE = -1;

/// n points of dimension d, row-major.
struct PointSet {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> coords;

    PointSet() = default;
    PointSet(std::size_t n_, std::size_t d_, std::vector<double> c) : n(n_), d(d_), coords(std::move(c)) {
        if (coords.size() != n * d) throw ShapeError("point set: coordinate count mismatch");
        for (double v : coords)
            if (!std::isfinite(v)) throw NumericError("point set: non-finite coordinate");
    }

    const double* row(std::size_t i) const { return coords.data() + i * d; }

    double sqdist(std::size_t i, std::size_t j) const {
        double s = 0;
        const double* a = row(i);
        const double* b = row(j);
        for (std::size_t k = 0; k < d; ++k) {
            const double t = a[k] - b[k];
            s += t * t;
        }
        return s;
    }

    /// Rows of a 2-D tensor; higher ranks are flattened per sample.
    template <class T>
    static PointSet from_tensor(const Tensor<T>& t) {
        const std::size_t n = t.dim(0);
        const std::size_t d = t.numel() / n;
        return PointSet(n, d, std::vector<double>(t.data().begin(), t.data().end()));
    }

    PointSet subset(const std::vector<std::size_t>& idx) const {
        std::vector<double> c;
        c.reserve(idx.size() * d);
        for (auto i : idx) c.insert(c.end(), row(i), row(i) + d);
        return PointSet(idx.size(), d, std::move(c));
    }
};

/// Rows scaled to unit Euclidean norm; zero rows are left untouched.
inline PointSet normalize_rows(const PointSet& p) {
    PointSet out = p;
    for (std::size_t i = 0; i < p.n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < p.d; ++k) s += p.row(i)[k] * p.row(i)[k];
        if (s <= 0) continue;
        const double inv = 1.0 / std::sqrt(s);
        for (std::size_t k = 0; k < p.d; ++k) out.coords[i * p.d + k] *= inv;
    }
    return out;
}

struct ClusterAssignment {
    std::vector<int> labels;  // cluster id >= 0 or NOISE
    int num_clusters = 0;
    std::vector<bool> core;  // DBSCAN only

    std::vector<std::size_t> cluster_sizes() const {
        std::vector<std::size_t> s(static_cast<std::size_t>(num_clusters), 0);
        for (int l : labels)
            if (l != NOISE) ++s[static_cast<std::size_t>(l)];
        return s;
    }
};

struct DbscanParams {
    double eps = 1.0;
    int min_samples = 15;

    void validate() const {
        if (!(eps > 0) || !std::isfinite(eps)) throw ArgumentError("dbscan: eps must be > 0");
        if (min_samples < 1) throw ArgumentError("dbscan: min_samples must be >= 1");
    }
};

/// Euclidean DBSCAN. Core points have at least min_samples points (themselves
/// included) in their closed eps-ball. Border points join the cluster of their
/// lowest-index core neighbour. Cluster ids follow ascending minimum member index.
inline ClusterAssignment dbscan(const PointSet& pts, const DbscanParams& params) {
    params.validate();
    const std::size_t n = pts.n;
    const double eps2 = params.eps * params.eps;
    std::vector<std::vector<std::size_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i) {
        nbrs[i].push_back(i);
        for (std::size_t j = i + 1; j < n; ++j)
            if (pts.sqdist(i, j) <= eps2) {
                nbrs[i].push_back(j);
                nbrs[j].push_back(i);
            }
    }
    for (auto& v : nbrs) std::sort(v.begin(), v.end());

    ClusterAssignment out;
    out.labels.assign(n, NOISE);
    out.core.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) out.core[i] = nbrs[i].size() >= static_cast<std::size_t>(params.min_samples);

    // Connected components over core points.
    int comp = 0;
    std::vector<int> core_comp(n, -1);
    for (std::size_t s = 0; s < n; ++s) {
        if (!out.core[s] || core_comp[s] >= 0) continue;
        std::queue<std::size_t> q;
        q.push(s);
        core_comp[s] = comp;
        while (!q.empty()) {
            const auto u = q.front();
            q.pop();
            for (auto v : nbrs[u])
                if (out.core[v] && core_comp[v] < 0) {
                    core_comp[v] = comp;
                    q.push(v);
                }
        }
        ++comp;
    }

    std::vector<int> raw(n, NOISE);
    for (std::size_t i = 0; i < n; ++i) {
        if (out.core[i]) {
            raw[i] = core_comp[i];
            continue;
        }
        for (auto v : nbrs[i])  // ascending, so the first core neighbour is the lowest-index one
            if (out.core[v]) {
                raw[i] = core_comp[v];
                break;
            }
    }

    std::vector<int> remap(static_cast<std::size_t>(comp), -1);
    int next = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (raw[i] != NOISE && remap[static_cast<std::size_t>(raw[i])] < 0) remap[static_cast<std::size_t>(raw[i])] = next++;
    for (std::size_t i = 0; i < n; ++i)
        if (raw[i] != NOISE) out.labels[i] = remap[static_cast<std::size_t>(raw[i])];
    out.num_clusters = next;
    return out;
}

struct KMeansResult {
    ClusterAssignment assignment;
    PointSet centroids;
    std::vector<double> objective;  // after each iteration
    int iterations = 0;
};

/// Lloyd's algorithm from k distinct data points drawn with the seed. An emptied
/// cluster takes over the point farthest from its current centroid.
inline KMeansResult kmeans(const PointSet& pts, std::size_t k, int max_iters, std::uint64_t seed) {
    const std::size_t n = pts.n, d = pts.d;
    if (n == 0) throw ArgumentError("kmeans: empty point set");
    if (k == 0 || k > n) throw ArgumentError("kmeans: k=" + std::to_string(k) + " invalid for n=" + std::to_string(n));

    Rng rng(seed);
    const auto init = rng.sample_without_replacement(n, k);
    std::vector<double> cent(k * d);
    for (std::size_t j = 0; j < k; ++j) std::copy(pts.row(init[j]), pts.row(init[j]) + d, cent.begin() + j * d);

    auto dist2 = [&](std::size_t i, std::size_t j) {
        double s = 0;
        for (std::size_t t = 0; t < d; ++t) {
            const double u = pts.row(i)[t] - cent[j * d + t];
            s += u * u;
        }
        return s;
    };

    KMeansResult res;
    std::vector<int> assign(n, -1);
    for (int it = 0; it < std::max(max_iters, 1); ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = dist2(i, 0);
            for (std::size_t j = 1; j < k; ++j) {
                const double dd = dist2(i, j);
                if (dd < bd) {
                    bd = dd;
                    best = j;
                }
            }
            if (assign[i] != static_cast<int>(best)) {
                assign[i] = static_cast<int>(best);
                changed = true;
            }
        }
        std::vector<std::size_t> size(k, 0);
        for (int a : assign) ++size[static_cast<std::size_t>(a)];
        for (std::size_t j = 0; j < k; ++j) {
            if (size[j] > 0) continue;
            std::size_t far = n;
            double fd = -1;
            for (std::size_t i = 0; i < n; ++i) {
                if (size[static_cast<std::size_t>(assign[i])] < 2) continue;
                const double dd = dist2(i, static_cast<std::size_t>(assign[i]));
                if (dd > fd) {
                    fd = dd;
                    far = i;
                }
            }
            if (far == n) break;  // cannot happen while k <= n
            --size[static_cast<std::size_t>(assign[far])];
            assign[far] = static_cast<int>(j);
            size[j] = 1;
            changed = true;
        }
        std::fill(cent.begin(), cent.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < d; ++t) cent[static_cast<std::size_t>(assign[i]) * d + t] += pts.row(i)[t];
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t t = 0; t < d; ++t) cent[j * d + t] /= static_cast<double>(size[j]);
        double obj = 0;
        for (std::size_t i = 0; i < n; ++i) obj += dist2(i, static_cast<std::size_t>(assign[i]));
        res.objective.push_back(obj);
        res.iterations = it + 1;
        if (!changed) break;
    }
    res.assignment.labels = assign;
    res.assignment.num_clusters = static_cast<int>(k);
    res.centroids = PointSet(k, d, cent);
    return res;
}

struct PseudoLabels {
    std::vector<int> labels;          // one per kept point, in 0..num_classes-1
    std::vector<std::size_t> kept;    // original indices, ascending
    int num_classes = 0;
};

/// Cluster serial numbers as class targets. Noise is never kept; with drop_small,
/// clusters smaller than min_size are dropped too. Surviving ids are re-densified
/// in ascending order.
inline PseudoLabels make_pseudo_labels(const ClusterAssignment& a, bool drop_small, std::size_t min_size) {
    if (drop_small && min_size == 0) throw ArgumentError("make_pseudo_labels: min_size must be positive");
    const auto sizes = a.cluster_sizes();
    std::vector<int> remap(sizes.size(), -1);
    PseudoLabels out;
    for (std::size_t c = 0; c < sizes.size(); ++c)
        if (sizes[c] > 0 && (!drop_small || sizes[c] >= min_size)) remap[c] = out.num_classes++;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
        const int l = a.labels[i];
        if (l == NOISE || remap[static_cast<std::size_t>(l)] < 0) continue;
        out.kept.push_back(i);
        out.labels.push_back(remap[static_cast<std::size_t>(l)]);
    }
    return out;
}

}  // namespace dhm
