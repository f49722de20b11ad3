#pragma once

// Representation stability: SVCCA similarity of one layer's activations on a
// fixed probe batch between consecutive epochs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "dhm/linalg.hpp"
#include "dhm/model.hpp"

namespace dhm {

struct ActivationSnapshot {
    int epoch = 0;
    std::vector<std::pair<std::string, Matrix>> layers;
};

struct StabilityRecord {
    int epoch = 0;
    std::string layer;
    double rs = 0;
};

/// A probe batch is drawn once per run and reused unchanged for every snapshot.
template <class T>
struct ProbeBatch {
    Tensor<T> inputs;
    std::size_t size() const { return inputs.dim(0); }
};

template <class T>
Matrix to_matrix(const Tensor<T>& t) {
    const std::size_t n = t.dim(0);
    return Matrix(n, t.numel() / n, std::vector<double>(t.data().begin(), t.data().end()));
}

/// Post-nonlinearity activations of every body layer, followed by the head's
/// logits when a head is given. Convolutional maps n x c x h x w become
/// (n*h*w) x c so that spatial positions act as datapoints.
template <class T>
ActivationSnapshot capture_activations(const ArchSpec& arch, const ParamGroup<T>& body,
                                       std::type_identity_t<const ParamGroup<T>*> head,
                                       const ProbeBatch<T>& probe, int epoch = 0) {
    NoGrad ng;
    std::vector<Tensor<T>> acts;
    auto emb = forward_body(arch, body, probe.inputs, &acts);
    ActivationSnapshot snap;
    snap.epoch = epoch;
    const auto names = arch.layer_names();
    for (std::size_t l = 0; l < acts.size(); ++l) {
        const auto& a = acts[l];
        snap.layers.emplace_back(names[l], a.ndim() == 4 ? to_matrix(nchw_to_rows(a)) : to_matrix(a));
    }
    if (head) snap.layers.emplace_back("head", to_matrix(head_logits(*head, emb)));
    return snap;
}

/// Centers the columns and projects onto the fewest leading singular directions
/// whose squared singular values cover var_frac of the total.
inline Matrix svd_reduce(const Matrix& acts, double var_frac) {
    if (acts.rows < acts.cols || acts.cols == 0)
        throw ShapeError("svd_reduce: need rows >= cols >= 1, got " + std::to_string(acts.rows) + "x" +
                         std::to_string(acts.cols));
    if (!(var_frac > 0.0 && var_frac <= 1.0)) throw ArgumentError("svd_reduce: var_frac must lie in (0, 1]");
    for (double v : acts.a)
        if (!std::isfinite(v)) throw NumericError("svd_reduce: non-finite activation");
    const Matrix c = center_columns(acts);
    const Svd d = svd(c);
    double total = 0;
    for (double s : d.s) total += s * s;
    if (!(total > 0.0) || d.s.front() <= 1e-12 * std::max(1.0, c.frobenius()))
        throw DegenerateError("svd_reduce: activations have rank 0");
    std::size_t keep = 0;
    double acc = 0;
    // Relative slack so that var_frac = 1 keeps every direction despite rounding.
    const double target = var_frac * total * (1.0 - 1e-12);
    while (keep < d.s.size() && acc < target) {
        acc += d.s[keep] * d.s[keep];
        ++keep;
    }
    if (var_frac == 1.0) {
        keep = 0;
        for (double s : d.s)
            if (s > 0.0) ++keep;
    }
    Matrix out(c.rows, keep);
    for (std::size_t i = 0; i < c.rows; ++i)
        for (std::size_t k = 0; k < keep; ++k) out(i, k) = d.u(i, k) * d.s[k];
    return out;
}

inline constexpr double kCcaRidge = 1e-6;

namespace detail {

/// Inverse square root of a covariance. Eigenvalues are floored at ridge times
/// the largest one, which keeps near-singular reductions invertible while leaving
/// the result invariant to rescaling.
inline Matrix inv_sqrt_cov(const Matrix& cov, double ridge) {
    const SymEigen e = sym_eigen(cov);
    const double floor = ridge * std::max(e.values.front(), 0.0);
    const std::size_t n = cov.rows;
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = std::max(e.values[k], floor);
        if (!(lam > 0)) throw DegenerateError("cca: singular covariance");
        const double w = 1.0 / std::sqrt(lam);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out(i, j) += w * e.vectors(i, k) * e.vectors(j, k);
    }
    return out;
}

}  // namespace detail

/// Canonical correlations between the column spaces of two centered matrices,
/// clipped to [0, 1], in descending order.
inline std::vector<double> canonical_correlations(const Matrix& a, const Matrix& b, double ridge = kCcaRidge) {
    if (a.rows != b.rows) throw ShapeError("cca: row counts differ");
    const double norm = 1.0 / static_cast<double>(a.rows - 1);
    Matrix saa = matmul_tn(a, a), sbb = matmul_tn(b, b), sab = matmul_tn(a, b);
    for (auto* m : {&saa, &sbb, &sab})
        for (double& v : m->a) v *= norm;
    const Matrix m = matmul(matmul(detail::inv_sqrt_cov(saa, ridge), sab), detail::inv_sqrt_cov(sbb, ridge));
    auto s = svd(m).s;
    for (double& v : s) v = std::clamp(v, 0.0, 1.0);
    return s;
}

/// Mean canonical correlation between the SVD-reduced activations.
inline double svcca_similarity(const Matrix& a, const Matrix& b, double var_frac = 0.99) {
    if (a.rows != b.rows) throw ShapeError("svcca: row counts differ");
    if (a.rows < std::max(a.cols, b.cols)) throw ShapeError("svcca: need at least as many datapoints as neurons");
    const Matrix ar = svd_reduce(a, var_frac);
    const Matrix br = svd_reduce(b, var_frac);
    const auto cc = canonical_correlations(ar, br);
    double s = 0;
    for (double v : cc) s += v;
    return s / static_cast<double>(cc.size());
}

/// rs for every layer between two snapshots of the same probe batch.
inline std::vector<StabilityRecord> representation_stability(const ActivationSnapshot& prev,
                                                             const ActivationSnapshot& curr, double var_frac = 0.99) {
    if (prev.layers.size() != curr.layers.size())
        throw ContractError("representation_stability: snapshots have different layer sets");
    std::vector<StabilityRecord> out;
    for (std::size_t l = 0; l < curr.layers.size(); ++l) {
        if (prev.layers[l].first != curr.layers[l].first)
            throw ContractError("representation_stability: layer '" + prev.layers[l].first + "' vs '" +
                                curr.layers[l].first + "'");
        out.push_back({curr.epoch, curr.layers[l].first,
                       svcca_similarity(prev.layers[l].second, curr.layers[l].second, var_frac)});
    }
    return out;
}

/// One record per layer for each consecutive pair of snapshots.
inline std::vector<StabilityRecord> stability_curve(const std::vector<ActivationSnapshot>& snaps, double var_frac = 0.99) {
    if (snaps.size() < 2) throw ArgumentError("stability_curve: need at least two snapshots");
    std::vector<StabilityRecord> out;
    for (std::size_t t = 1; t < snaps.size(); ++t) {
        if (snaps[t].epoch <= snaps[t - 1].epoch) throw ArgumentError("stability_curve: epochs must ascend");
        auto recs = representation_stability(snaps[t - 1], snaps[t], var_frac);
        out.insert(out.end(), recs.begin(), recs.end());
    }
    return out;
}

/// Stability CSV: run_id,seed,epoch,layer,rs.
inline void write_stability_csv(std::ostream& os, const std::string& run_id, std::uint64_t seed,
                                const std::vector<StabilityRecord>& recs) {
    os << "run_id,seed,epoch,layer,rs\n";
    char buf[64];
    for (const auto& r : recs) {
        std::snprintf(buf, sizeof buf, "%.17g", r.rs);
        os << run_id << ',' << seed << ',' << r.epoch << ',' << r.layer << ',' << buf << '\n';
    }
}

}  // namespace dhm
