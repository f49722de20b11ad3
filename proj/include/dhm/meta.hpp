#pragma once

// Bi-level training. The body is shared across tasks; each task gets its own head
// (fresh for dynamic heads, the persistent one for static heads), adapts for a few
// inner steps and contributes the gradient of its post-adaptation loss with
// respect to the pre-adaptation body. The outer step applies the mean of those
// gradients.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dhm/adapt.hpp"
#include "dhm/clustering.hpp"
#include "dhm/data.hpp"
#include "dhm/model.hpp"

namespace dhm {

struct HyperConfig {
    double alpha = 0.05;  // inner learning rate
    double eta = 0.001;   // outer learning rate
    int inner_steps = 5;
    int meta_batch = 8;
    int epochs = 300;
    std::size_t sub_sample = 100;
    DbscanParams dbscan{1.0, 15};
    std::size_t min_cluster_size = 0;  // 0: reuse dbscan.min_samples
    double drop_epoch_frac = 0.2;
    Order order = Order::first_order;  // exact diverges at default alpha on unnormalised inputs
    Scope scope = Scope::body_and_head;
    bool split_support_query = false;
    bool unit_norm = false;

    void validate() const {
        // Zero rates are accepted: they freeze the corresponding loop.
        if (!(alpha >= 0)) throw ArgumentError("hyper: alpha must be >= 0");
        if (!(eta >= 0)) throw ArgumentError("hyper: eta must be >= 0");
        if (inner_steps < 1) throw ArgumentError("hyper: inner_steps must be >= 1");
        if (meta_batch < 1) throw ArgumentError("hyper: meta_batch must be >= 1");
        if (epochs < 0) throw ArgumentError("hyper: epochs must be >= 0");
        if (sub_sample < 1) throw ArgumentError("hyper: sub_sample must be >= 1");
        if (!(drop_epoch_frac >= 0 && drop_epoch_frac <= 1)) throw ArgumentError("hyper: drop_epoch_frac must lie in [0,1]");
        dbscan.validate();
    }

    std::size_t small_cluster_threshold() const {
        return min_cluster_size > 0 ? min_cluster_size : static_cast<std::size_t>(dbscan.min_samples);
    }

    /// Small-cluster dropping switches on once this epoch (0-based) is reached.
    bool drop_small_at(int epoch) const { return static_cast<double>(epoch) >= drop_epoch_frac * epochs; }
};

/// Cross-entropy of head(body(x)) against labels.
template <class T>
Tensor<T> task_loss(const ArchSpec& arch, const ParamGroup<T>& body, const ParamGroup<T>& head, const Tensor<T>& x,
                    const std::vector<int>& labels) {
    return softmax_cross_entropy(network_logits(arch, body, head, x), labels);
}

template <class T>
struct AdaptedParams {
    ParamGroup<T> body;
    ParamGroup<T> head;
};

/// `steps` plain gradient updates on the parameters in scope (no graph kept).
/// head_only never touches the body, and reuses one body pass for every step.
template <class T>
AdaptedParams<T> inner_adapt(const ArchSpec& arch, const ParamGroup<T>& body, const ParamGroup<T>& head,
                             const Tensor<T>& inputs, const std::vector<int>& labels, int steps, T alpha, Scope scope) {
    if (steps < 0) throw ArgumentError("inner_adapt: steps must be >= 0");
    AdaptedParams<T> out{body, head};
    if (steps == 0 || alpha == T(0)) return out;
    GradMode recording(true);
    if (scope == Scope::head_only) {
        Tensor<T> emb;
        {
            NoGrad ng;
            emb = forward_body(arch, body, inputs);
        }
        for (int s = 0; s < steps; ++s) {
            auto h = out.head.leaves();
            auto g = backward(softmax_cross_entropy(head_logits(h, emb), labels), {&h});
            NoGrad ng;
            out.head = sgd_update(out.head, g, alpha);
        }
        return out;
    }
    for (int s = 0; s < steps; ++s) {
        auto b = out.body.leaves();
        auto h = out.head.leaves();
        auto g = backward(task_loss(arch, b, h, inputs, labels), {&b, &h});
        GradMap<T> gb, gh;
        gb.entries.assign(g.entries.begin(), g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()));
        gh.entries.assign(g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()), g.entries.end());
        NoGrad ng;
        out.body = sgd_update(out.body, gb, alpha);
        out.head = sgd_update(out.head, gh, alpha);
    }
    return out;
}

/// Model-level adapt_and_outer_grad: inner loss on (inputs, labels), outer loss on
/// the query pair when given, otherwise on the same data.
template <class T>
AdaptResult<T> adapt_and_outer_grad(const ArchSpec& arch, const ParamGroup<T>& body, const ParamGroup<T>& head,
                                    const Tensor<T>& inputs, const std::vector<int>& labels, int steps, T alpha,
                                    Scope scope, Order order, const Tensor<T>* query = nullptr,
                                    const std::vector<int>* query_labels = nullptr, bool want_head_grad = false) {
    if (labels.empty()) throw ArgumentError("adapt_and_outer_grad: no labelled samples");
    const std::size_t width = head_width(head);
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= width) throw IndexError("adapt_and_outer_grad: label outside head width");
    if (scope == Scope::head_only) {
        // The body stays fixed while the head adapts, so each input set is embedded once.
        std::optional<Tensor<T>> emb_in, emb_q;
        auto inner = [&](const ParamGroup<T>& b, const ParamGroup<T>& h) {
            if (!emb_in) emb_in = forward_body(arch, b, inputs);
            return softmax_cross_entropy(head_logits(h, *emb_in), labels);
        };
        if (query) {
            auto outer = [&](const ParamGroup<T>& b, const ParamGroup<T>& h) {
                if (!emb_q) emb_q = forward_body(arch, b, *query);
                return softmax_cross_entropy(head_logits(h, *emb_q), *query_labels);
            };
            return adapt_and_outer_grad(body, head, inner, outer, steps, alpha, scope, order, want_head_grad);
        }
        return adapt_and_outer_grad(body, head, inner, inner, steps, alpha, scope, order, want_head_grad);
    }
    auto inner = [&](const ParamGroup<T>& b, const ParamGroup<T>& h) { return task_loss(arch, b, h, inputs, labels); };
    if (query) {
        auto outer = [&](const ParamGroup<T>& b, const ParamGroup<T>& h) { return task_loss(arch, b, h, *query, *query_labels); };
        return adapt_and_outer_grad(body, head, inner, outer, steps, alpha, scope, order, want_head_grad);
    }
    return adapt_and_outer_grad(body, head, inner, inner, steps, alpha, scope, order, want_head_grad);
}

// ---- task construction -------------------------------------------------------

enum class TaskBuilder { dbscan, kmeans };

/// How unlabeled batches become tasks. The defaults are the full method; the
/// other settings realise the ablation variants.
struct UhtOptions {
    TaskBuilder builder = TaskBuilder::dbscan;
    /// K-means cluster count, or (with DBSCAN) the fixed way that clusters are
    /// resampled to. 0 leaves the way free.
    std::size_t fixed_way = 0;
    bool static_head = false;
    /// Pseudo-labels come from the frozen initial body instead of the current one.
    bool frozen_labels = false;
    int kmeans_iters = 50;
};

template <class T>
struct TaskContext {
    std::uint64_t seed = 0;
    int epoch = 0;
    int task = 0;
    bool drop_small = false;
    const ParamGroup<T>* label_body = nullptr;
    const ParamGroup<T>* static_head = nullptr;
};

template <class T>
struct TaskOutcome {
    bool skipped = false;
    std::string skip_reason;
    double loss = 0;
    GradMap<T> body_grad;
    GradMap<T> head_grad;
    int clusters = 0;     // before pseudo-label filtering
    int num_classes = 0;  // after
    std::size_t kept = 0;
};

template <class T>
struct TaskLabels {
    std::vector<std::size_t> kept;
    std::vector<int> labels;
    int clusters = 0;
    int num_classes = 0;
};

/// Clusters the body's embeddings of the batch and turns clusters into labels.
template <class T>
TaskLabels<T> construct_task_labels(const ArchSpec& arch, const ParamGroup<T>& body, const Tensor<T>& inputs,
                                    const HyperConfig& hyper, const UhtOptions& opts, const TaskContext<T>& ctx) {
    Tensor<T> emb;
    {
        NoGrad ng;
        emb = forward_body(arch, ctx.label_body ? *ctx.label_body : body, inputs);
    }
    PointSet pts = PointSet::from_tensor(emb);
    if (hyper.unit_norm) pts = normalize_rows(pts);
    ClusterAssignment assign;
    if (opts.builder == TaskBuilder::kmeans) {
        if (opts.fixed_way == 0) throw ArgumentError("k-means task construction needs a fixed way");
        if (opts.fixed_way > pts.n) return {};
        assign = kmeans(pts, opts.fixed_way, opts.kmeans_iters,
                        stream_seed(ctx.seed, Stream::kmeans, {static_cast<std::uint64_t>(ctx.epoch), static_cast<std::uint64_t>(ctx.task)}))
                     .assignment;
    } else {
        assign = dbscan(pts, hyper.dbscan);
    }
    auto pseudo = make_pseudo_labels(assign, ctx.drop_small, hyper.small_cluster_threshold());
    TaskLabels<T> out{pseudo.kept, pseudo.labels, assign.num_clusters, pseudo.num_classes};
    if (opts.builder == TaskBuilder::dbscan && opts.fixed_way > 0) {
        const auto way = opts.fixed_way;
        if (static_cast<std::size_t>(pseudo.num_classes) < way) {
            out.kept.clear();
            out.labels.clear();
            out.num_classes = 0;
            return out;
        }
        Rng rng(stream_seed(ctx.seed, Stream::ablate, {static_cast<std::uint64_t>(ctx.epoch), static_cast<std::uint64_t>(ctx.task)}));
        auto chosen = rng.sample_without_replacement(static_cast<std::size_t>(pseudo.num_classes), way);
        std::sort(chosen.begin(), chosen.end());
        std::vector<int> remap(static_cast<std::size_t>(pseudo.num_classes), -1);
        for (std::size_t k = 0; k < chosen.size(); ++k) remap[chosen[k]] = static_cast<int>(k);
        out.kept.clear();
        out.labels.clear();
        for (std::size_t i = 0; i < pseudo.kept.size(); ++i) {
            const int r = remap[static_cast<std::size_t>(pseudo.labels[i])];
            if (r < 0) continue;
            out.kept.push_back(pseudo.kept[i]);
            out.labels.push_back(r);
        }
        out.num_classes = static_cast<int>(way);
    }
    return out;
}

/// Within each class, members alternate between support (even rank) and query.
inline void split_alternating(const std::vector<int>& labels, int num_classes, std::vector<std::size_t>& support,
                              std::vector<std::size_t>& query) {
    std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& s = seen[static_cast<std::size_t>(labels[i])];
        (s++ % 2 == 0 ? support : query).push_back(i);
    }
}

/// One task of unsupervised heterogeneous task construction: embed, cluster,
/// label by cluster serial number, fit a head of matching width, and return the
/// post-adaptation loss with its gradient with respect to the body.
template <class T>
TaskOutcome<T> uht_task_outer_loss(const ArchSpec& arch, const ParamGroup<T>& body, const TaskBatch<T>& batch,
                                   const HyperConfig& hyper, const TaskContext<T>& ctx, const UhtOptions& opts = {}) {
    if (batch.source_indices.empty() && batch.inputs.numel() == 0) throw ArgumentError("uht task: empty batch");
    TaskOutcome<T> out;
    auto tl = construct_task_labels(arch, body, batch.inputs, hyper, opts, ctx);
    out.clusters = tl.clusters;
    out.num_classes = tl.num_classes;
    out.kept = tl.kept.size();
    auto skip = [&](std::string why) {
        out.skipped = true;
        out.skip_reason = std::move(why);
        out.body_grad = GradMap<T>::zeros_like(body);
        if (ctx.static_head) out.head_grad = GradMap<T>::zeros_like(*ctx.static_head);
        return out;
    };
    if (tl.num_classes < 2) return skip("fewer than 2 classes");

    ParamGroup<T> head;
    if (opts.static_head) {
        if (!ctx.static_head) throw ContractError("uht task: static head requested but not supplied");
        head = *ctx.static_head;
        if (head_width(head) < static_cast<std::size_t>(tl.num_classes)) return skip("more classes than static head width");
    } else {
        head = init_dynamic_head<T>(arch.embed_dim(), static_cast<std::size_t>(tl.num_classes),
                                    stream_seed(ctx.seed, Stream::head_init,
                                                {static_cast<std::uint64_t>(ctx.epoch), static_cast<std::uint64_t>(ctx.task)}));
    }

    const Tensor<T> x = gather_rows(batch.inputs, tl.kept);
    AdaptResult<T> res;
    if (hyper.split_support_query) {
        std::vector<std::size_t> s_idx, q_idx;
        split_alternating(tl.labels, tl.num_classes, s_idx, q_idx);
        if (q_idx.empty()) return skip("empty query half");
        std::vector<int> s_lab, q_lab;
        for (auto i : s_idx) s_lab.push_back(tl.labels[i]);
        for (auto i : q_idx) q_lab.push_back(tl.labels[i]);
        const auto xs = gather_rows(x, s_idx), xq = gather_rows(x, q_idx);
        res = adapt_and_outer_grad(arch, body, head, xs, s_lab, hyper.inner_steps, static_cast<T>(hyper.alpha), hyper.scope,
                                   hyper.order, &xq, &q_lab, opts.static_head);
    } else {
        res = adapt_and_outer_grad(arch, body, head, x, tl.labels, hyper.inner_steps, static_cast<T>(hyper.alpha), hyper.scope,
                                   hyper.order, static_cast<const Tensor<T>*>(nullptr), static_cast<const std::vector<int>*>(nullptr),
                                   opts.static_head);
    }
    out.loss = static_cast<double>(res.outer_loss);
    out.body_grad = std::move(res.body_grad);
    out.head_grad = std::move(res.head_grad);
    return out;
}

/// Elementwise mean of gradient maps with identical layout.
template <class T>
GradMap<T> mean_grads(const std::vector<const GradMap<T>*>& grads) {
    if (grads.empty()) throw ArgumentError("mean_grads: no gradients");
    NoGrad ng;
    GradMap<T> out = *grads.front();
    for (std::size_t k = 1; k < grads.size(); ++k)
        for (std::size_t i = 0; i < out.entries.size(); ++i) {
            if (grads[k]->entries[i].first != out.entries[i].first) throw ContractError("mean_grads: layout mismatch");
            out.entries[i].second = add(out.entries[i].second, grads[k]->entries[i].second);
        }
    const T inv = T(1) / static_cast<T>(grads.size());
    for (auto& e : out.entries) e.second = scale(e.second, inv);
    return out;
}

/// params - eta * mean(task gradients). With no gradients the step is a no-op.
template <class T>
ParamGroup<T> outer_step(const ParamGroup<T>& params, const std::vector<const GradMap<T>*>& task_grads, T eta) {
    if (task_grads.empty()) return params;
    NoGrad ng;
    return sgd_update(params, mean_grads(task_grads), eta);
}

// ---- training loops ------------------------------------------------------------

struct EpochStats {
    int epoch = 0;  // 1-based
    double loss = std::numeric_limits<double>::quiet_NaN();
    int tasks = 0;
    int skipped = 0;
    double seconds = 0;

    double skip_rate() const { return tasks > 0 ? static_cast<double>(skipped) / tasks : 0.0; }
};

template <class T>
struct TrainHooks {
    /// Called after every outer step with the 1-based epoch and the current model.
    std::function<void(int, const TrainedModel<T>&)> on_epoch;
};

template <class T>
struct TrainResult {
    TrainedModel<T> model;
    std::vector<EpochStats> log;
};

struct EpisodeSpec {
    int way_min = 5;
    int way_max = 5;
    int shot = 1;
    int query = 15;

    bool heterogeneous() const { return way_min != way_max; }
};

enum class HeadMode { static_head, dynamic_head };

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class T>
void finish_epoch(TrainResult<T>& r, EpochStats st, const TrainHooks<T>& hooks) {
    r.log.push_back(st);
    if (hooks.on_epoch) hooks.on_epoch(st.epoch, r.model);
}

inline double mean_or_nan(double total, int count) {
    return count > 0 ? total / count : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

/// Unsupervised training: tasks are random unlabeled batches labelled by
/// clustering the current body's embeddings.
template <class T>
TrainResult<T> train_dhm_uht(const LabeledDataset<T>& train, const ArchSpec& arch, const HyperConfig& hyper,
                             std::uint64_t seed, const UhtOptions& opts = {}, const TrainHooks<T>& hooks = {}) {
    hyper.validate();
    if (opts.static_head && opts.fixed_way < 2) throw ArgumentError("uht: a static head needs a fixed way >= 2");
    TrainResult<T> r;
    r.model.arch = arch;
    r.model.mode = TrainMode::uht;
    r.model.provenance.seed = seed;
    r.model.body = init_body<T>(arch, stream_seed(seed, Stream::body_init));
    if (opts.static_head) {
        r.model.heads[opts.fixed_way] = init_dynamic_head<T>(arch.embed_dim(), opts.fixed_way, stream_seed(seed, Stream::head_init));
        r.model.head_is_init = true;
    }
    const ParamGroup<T> initial_body = r.model.body;
    const std::size_t batch_size = std::min(hyper.sub_sample, train.size());

    for (int e = 0; e < hyper.epochs; ++e) {
        const auto t0 = detail::Clock::now();
        const ParamGroup<T> snapshot = r.model.body;
        const ParamGroup<T>* head = opts.static_head ? &r.model.heads.at(opts.fixed_way) : nullptr;
        std::vector<TaskOutcome<T>> outcomes;
        for (int t = 0; t < hyper.meta_batch; ++t) {
            TaskContext<T> ctx;
            ctx.seed = seed;
            ctx.epoch = e;
            ctx.task = t;
            ctx.drop_small = hyper.drop_small_at(e);
            ctx.label_body = opts.frozen_labels ? &initial_body : nullptr;
            ctx.static_head = head;
            auto batch = sample_unlabeled_batch(train, batch_size,
                                                stream_seed(seed, Stream::task, {static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(t)}));
            outcomes.push_back(uht_task_outer_loss(arch, snapshot, batch, hyper, ctx, opts));
        }
        EpochStats st;
        st.epoch = e + 1;
        st.tasks = hyper.meta_batch;
        std::vector<const GradMap<T>*> bg, hg;
        double total = 0;
        for (const auto& o : outcomes) {  // ascending task index
            if (o.skipped) {
                ++st.skipped;
                continue;
            }
            total += o.loss;
            bg.push_back(&o.body_grad);
            hg.push_back(&o.head_grad);
        }
        st.loss = detail::mean_or_nan(total, st.tasks - st.skipped);
        r.model.body = outer_step(snapshot, bg, static_cast<T>(hyper.eta));
        if (opts.static_head) r.model.heads[opts.fixed_way] = outer_step(*head, hg, static_cast<T>(hyper.eta));
        st.seconds = detail::seconds_since(t0);
        detail::finish_epoch(r, st, hooks);
    }
    return r;
}

/// Supervised bi-level training on labelled episodes. A static head (fixed way
/// only) persists and is meta-updated with the body; a dynamic head is created
/// per task with the episode's width and only the body is meta-updated.
template <class T>
TrainResult<T> train_supervised_meta(const LabeledDataset<T>& train, const ArchSpec& arch, const HyperConfig& hyper,
                                     const EpisodeSpec& spec, HeadMode head_mode, std::uint64_t seed,
                                     const TrainHooks<T>& hooks = {}) {
    hyper.validate();
    if (head_mode == HeadMode::static_head && spec.heterogeneous())
        throw ArgumentError("supervised meta: a static head cannot serve heterogeneous ways");
    if (spec.way_min < 2) throw ArgumentError("supervised meta: way must be >= 2");
    TrainResult<T> r;
    r.model.arch = arch;
    r.model.mode = hyper.scope == Scope::head_only ? TrainMode::anil : TrainMode::maml;
    r.model.provenance.seed = seed;
    r.model.body = init_body<T>(arch, stream_seed(seed, Stream::body_init));
    const bool is_static = head_mode == HeadMode::static_head;
    const auto way = static_cast<std::size_t>(spec.way_min);
    if (is_static) {
        r.model.heads[way] = init_dynamic_head<T>(arch.embed_dim(), way, stream_seed(seed, Stream::head_init));
        r.model.head_is_init = true;
    }
    for (int e = 0; e < hyper.epochs; ++e) {
        const auto t0 = detail::Clock::now();
        const ParamGroup<T> snapshot = r.model.body;
        std::vector<AdaptResult<T>> results;
        for (int t = 0; t < hyper.meta_batch; ++t) {
            const auto key = stream_seed(seed, Stream::episode, {static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(t)});
            auto ep = sample_heterogeneous_episode(train, spec.way_min, spec.way_max, spec.shot, spec.query, key);
            ParamGroup<T> head = is_static ? r.model.heads.at(way)
                                           : init_dynamic_head<T>(arch.embed_dim(), static_cast<std::size_t>(ep.way),
                                                                  stream_seed(seed, Stream::head_init,
                                                                              {static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(t)}));
            const bool has_query = !ep.query_labels.empty();
            results.push_back(adapt_and_outer_grad(arch, snapshot, head, ep.support, ep.support_labels, hyper.inner_steps,
                                                   static_cast<T>(hyper.alpha), hyper.scope, hyper.order,
                                                   has_query ? &ep.query : nullptr, has_query ? &ep.query_labels : nullptr,
                                                   is_static));
        }
        EpochStats st;
        st.epoch = e + 1;
        st.tasks = hyper.meta_batch;
        std::vector<const GradMap<T>*> bg, hg;
        double total = 0;
        for (const auto& res : results) {
            total += static_cast<double>(res.outer_loss);
            bg.push_back(&res.body_grad);
            hg.push_back(&res.head_grad);
        }
        st.loss = total / hyper.meta_batch;
        r.model.body = outer_step(snapshot, bg, static_cast<T>(hyper.eta));
        if (is_static) r.model.heads[way] = outer_step(r.model.heads.at(way), hg, static_cast<T>(hyper.eta));
        st.seconds = detail::seconds_since(t0);
        detail::finish_epoch(r, st, hooks);
    }
    return r;
}

/// Whole-class training: one minibatch cross-entropy step per epoch over all
/// classes with a persistent head of width class_count.
template <class T>
TrainResult<T> train_wct(const LabeledDataset<T>& train, const ArchSpec& arch, const HyperConfig& hyper,
                         std::size_t batch_size, std::uint64_t seed, const TrainHooks<T>& hooks = {}) {
    hyper.validate();
    if (train.class_count < 2) throw ArgumentError("wct: need at least 2 classes");
    if (batch_size == 0) throw ArgumentError("wct: batch size must be positive");
    TrainResult<T> r;
    r.model.arch = arch;
    r.model.mode = TrainMode::wct;
    r.model.provenance.seed = seed;
    r.model.body = init_body<T>(arch, stream_seed(seed, Stream::body_init));
    const auto C = static_cast<std::size_t>(train.class_count);
    r.model.heads[C] = init_dynamic_head<T>(arch.embed_dim(), C, stream_seed(seed, Stream::head_init));
    const std::size_t bs = std::min(batch_size, train.size());
    for (int e = 0; e < hyper.epochs; ++e) {
        const auto t0 = detail::Clock::now();
        Rng rng(stream_seed(seed, Stream::wct_batch, {static_cast<std::uint64_t>(e)}));
        const auto idx = rng.sample_without_replacement(train.size(), bs);
        std::vector<int> labels;
        for (auto i : idx) labels.push_back(train.labels[i]);
        const auto x = gather_rows(train.samples, idx);
        GradMode recording(true);
        auto b = r.model.body.leaves();
        auto h = r.model.heads.at(C).leaves();
        auto loss = task_loss(arch, b, h, x, labels);
        auto g = backward(loss, {&b, &h});
        GradMap<T> gb, gh;
        gb.entries.assign(g.entries.begin(), g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()));
        gh.entries.assign(g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()), g.entries.end());
        {
            NoGrad ng;
            r.model.body = sgd_update(r.model.body, gb, static_cast<T>(hyper.eta));
            r.model.heads[C] = sgd_update(r.model.heads.at(C), gh, static_cast<T>(hyper.eta));
        }
        EpochStats st;
        st.epoch = e + 1;
        st.tasks = 1;
        st.loss = static_cast<double>(loss.item());
        st.seconds = detail::seconds_since(t0);
        detail::finish_epoch(r, st, hooks);
    }
    return r;
}

/// Multi-task learning: the same episodes as the meta learners, but single-level.
/// One persistent head per distinct way; each episode takes a direct gradient of
/// its full (support + query) loss on the body and its way's head.
template <class T>
TrainResult<T> train_mtl(const LabeledDataset<T>& train, const ArchSpec& arch, const HyperConfig& hyper,
                         const EpisodeSpec& spec, std::uint64_t seed, const TrainHooks<T>& hooks = {}) {
    hyper.validate();
    if (spec.way_min < 2) throw ArgumentError("mtl: way must be >= 2");
    TrainResult<T> r;
    r.model.arch = arch;
    r.model.mode = TrainMode::mtl;
    r.model.provenance.seed = seed;
    r.model.body = init_body<T>(arch, stream_seed(seed, Stream::body_init));
    for (int e = 0; e < hyper.epochs; ++e) {
        const auto t0 = detail::Clock::now();
        struct Contribution {
            std::size_t way;
            GradMap<T> body, head;
            double loss;
        };
        std::vector<Contribution> contrib;
        for (int t = 0; t < hyper.meta_batch; ++t) {
            const auto key = stream_seed(seed, Stream::episode, {static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(t)});
            auto ep = sample_heterogeneous_episode(train, spec.way_min, spec.way_max, spec.shot, spec.query, key);
            const auto way = static_cast<std::size_t>(ep.way);
            if (!r.model.heads.count(way))
                r.model.heads[way] = init_dynamic_head<T>(arch.embed_dim(), way, stream_seed(seed, Stream::mtl_head, {way}));
            std::vector<std::size_t> all;
            std::vector<int> labels = ep.support_labels;
            labels.insert(labels.end(), ep.query_labels.begin(), ep.query_labels.end());
            Tensor<T> x = ep.support;
            if (!ep.query_labels.empty()) {
                std::vector<T> v(ep.support.values());
                v.insert(v.end(), ep.query.values().begin(), ep.query.values().end());
                Dims d = ep.support.dims();
                d[0] = labels.size();
                x = Tensor<T>::from(d, std::move(v));
            }
            GradMode recording(true);
            auto b = r.model.body.leaves();
            auto h = r.model.heads.at(way).leaves();
            auto loss = task_loss(arch, b, h, x, labels);
            auto g = backward(loss, {&b, &h});
            Contribution c{way, {}, {}, static_cast<double>(loss.item())};
            c.body.entries.assign(g.entries.begin(), g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()));
            c.head.entries.assign(g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()), g.entries.end());
            contrib.push_back(std::move(c));
        }
        std::vector<const GradMap<T>*> bg;
        std::map<std::size_t, std::vector<const GradMap<T>*>> hg;
        double total = 0;
        for (const auto& c : contrib) {
            bg.push_back(&c.body);
            hg[c.way].push_back(&c.head);
            total += c.loss;
        }
        r.model.body = outer_step(r.model.body, bg, static_cast<T>(hyper.eta));
        for (const auto& [way, gs] : hg) r.model.heads[way] = outer_step(r.model.heads.at(way), gs, static_cast<T>(hyper.eta));
        EpochStats st;
        st.epoch = e + 1;
        st.tasks = hyper.meta_batch;
        st.loss = total / hyper.meta_batch;
        st.seconds = detail::seconds_since(t0);
        detail::finish_epoch(r, st, hooks);
    }
    return r;
}

}  // namespace dhm
