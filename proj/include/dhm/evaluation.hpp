#pragma once

// Episodic few-shot evaluation, zero-shot evaluation by clustering with optimal
// cluster-to-class matching.

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dhm/clustering.hpp"
#include "dhm/data.hpp"
#include "dhm/meta.hpp"
#include "dhm/model.hpp"

namespace dhm {

struct EvalReport {
    std::string metric_name;
    double mean = 0;
    double ci95 = 0;  // 1.96 * sample stddev / sqrt(n); 0 for a single value
    int n_episodes = 0;
    std::vector<double> per_episode;
};

inline EvalReport make_report(std::string name, std::vector<double> values) {
    EvalReport r;
    r.metric_name = std::move(name);
    r.n_episodes = static_cast<int>(values.size());
    if (!values.empty()) {
        r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        if (values.size() > 1) {
            double ss = 0;
            for (double v : values) ss += (v - r.mean) * (v - r.mean);
            const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
            r.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
        }
    }
    r.per_episode = std::move(values);
    return r;
}

/// Fraction of query samples classified correctly after adapting a head on the
/// support set. The starting head is the model's persistent head when the model
/// meta-learned it for this width, otherwise a fresh one from head_seed.
template <class T>
double adapt_and_score_episode(const TrainedModel<T>& model, const Episode<T>& ep, int adapt_steps, T alpha, Scope scope,
                               std::uint64_t head_seed) {
    if (adapt_steps < 0) throw ArgumentError("adapt_and_score_episode: adapt_steps must be >= 0");
    if (ep.query_labels.empty()) throw ArgumentError("adapt_and_score_episode: episode has no query samples");
    const auto way = static_cast<std::size_t>(ep.way);
    const ParamGroup<T>* persistent = model.head_is_init ? model.head_for(way) : nullptr;
    ParamGroup<T> head = persistent ? *persistent : init_dynamic_head<T>(model.embed_dim(), way, head_seed);
    auto adapted = inner_adapt(model.arch, model.body, head, ep.support, ep.support_labels, adapt_steps, alpha, scope);
    NoGrad ng;
    const auto pred = argmax_rows(network_logits(model.arch, adapted.body, adapted.head, ep.query));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i];
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

struct FewShotSpec {
    int way = 5;
    int shot = 1;
    int query = 15;
    int episodes = 100;
    int adapt_steps = 50;
    double alpha = 0.05;
    Scope scope = Scope::head_only;
};

template <class T>
EvalReport eval_fewshot(const TrainedModel<T>& model, const LabeledDataset<T>& split, const FewShotSpec& spec,
                        std::uint64_t seed) {
    if (spec.episodes < 1) throw ArgumentError("eval_fewshot: need at least one episode");
    std::vector<double> acc;
    for (int i = 0; i < spec.episodes; ++i) {
        const auto key = static_cast<std::uint64_t>(i);
        auto ep = sample_episode(split, spec.way, spec.shot, spec.query, stream_seed(seed, Stream::eval, {key}));
        acc.push_back(adapt_and_score_episode(model, ep, spec.adapt_steps, static_cast<T>(spec.alpha), spec.scope,
                                              stream_seed(seed, Stream::head_init, {key, 0xe7a1ULL})));
    }
    return make_report("fewshot_acc", std::move(acc));
}

struct Matching {
    std::vector<int> assignment;  // row -> column
    double accuracy = 0;
};

/// Maximum-weight perfect matching on a square count matrix (Hungarian method,
/// O(k^3)). accuracy is the matched total over the grand total.
inline Matching hungarian_match(const std::vector<std::vector<long long>>& confusion) {
    const std::size_t k = confusion.size();
    for (const auto& row : confusion)
        if (row.size() != k) throw ArgumentError("hungarian_match: matrix is not square");
    Matching m;
    if (k == 0) return m;
    long long maxv = 0, total = 0;
    for (const auto& row : confusion)
        for (auto v : row) {
            if (v < 0) throw ArgumentError("hungarian_match: negative count");
            maxv = std::max(maxv, v);
            total += v;
        }
    // Minimise cost = maxv - count. 1-based potentials as in the classic formulation.
    const long long INF = std::numeric_limits<long long>::max() / 4;
    std::vector<long long> u(k + 1, 0), v(k + 1, 0);
    std::vector<std::size_t> p(k + 1, 0), way(k + 1, 0);
    for (std::size_t i = 1; i <= k; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<long long> minv(k + 1, INF);
        std::vector<bool> used(k + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            long long delta = INF;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= k; ++j) {
                if (used[j]) continue;
                const long long cur = (maxv - confusion[i0 - 1][j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= k; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    m.assignment.assign(k, -1);
    long long matched = 0;
    for (std::size_t j = 1; j <= k; ++j) {
        m.assignment[p[j] - 1] = static_cast<int>(j - 1);
        matched += confusion[p[j] - 1][j - 1];
    }
    m.accuracy = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
    return m;
}

/// Embeds every sample with the body (no adaptation), clusters with K-means for
/// each seed and scores the Hungarian-matched accuracy against the true classes.
template <class T>
EvalReport eval_zeroshot(const TrainedModel<T>& model, const LabeledDataset<T>& split, std::size_t k,
                         const std::vector<std::uint64_t>& kmeans_seeds, int max_iters = 100) {
    if (k == 0 || k != static_cast<std::size_t>(split.class_count))
        throw ArgumentError("eval_zeroshot: k must equal the split's class count");
    if (kmeans_seeds.empty()) throw ArgumentError("eval_zeroshot: need at least one K-means seed");
    Tensor<T> emb;
    {
        NoGrad ng;
        emb = forward_body(model.arch, model.body, split.samples);
    }
    const auto pts = PointSet::from_tensor(emb);
    std::vector<double> acc;
    for (auto s : kmeans_seeds) {
        const auto km = kmeans(pts, k, max_iters, s);
        std::vector<std::vector<long long>> conf(k, std::vector<long long>(k, 0));
        for (std::size_t i = 0; i < split.size(); ++i)
            ++conf[static_cast<std::size_t>(km.assignment.labels[i])][static_cast<std::size_t>(split.labels[i])];
        acc.push_back(hungarian_match(conf).accuracy);
    }
    return make_report("zeroshot_acc", std::move(acc));
}

}  // namespace dhm
