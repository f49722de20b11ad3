#pragma once

// Experiment orchestration behind the dhm command-line tool. Every command
// takes a resolved RunConfig, writes its artifacts under cfg.out and returns
// the in-memory results so tests can inspect them without re-reading files.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/data.hpp"
#include "dhm/evaluation.hpp"
#include "dhm/harness/config.hpp"
#include "dhm/harness/metrics.hpp"
#include "dhm/meta.hpp"
#include "dhm/model.hpp"
#include "dhm/repstab.hpp"

namespace dhm::harness {

using Real = float;
namespace fs = std::filesystem;

struct Data {
    LabeledDataset<Real> full;
    Splits<Real> splits;
    LabeledDataset<Real> train;  // training split after label noise
};

inline LabeledDataset<Real> load_full_dataset(const RunConfig& c) {
    switch (c.dataset) {
        case DataSource::blobs:
            return gen_blobs<Real>(c.blob_classes, c.blob_dim, c.blob_per_class, c.blob_intra, c.blob_inter, c.data_seed);
        case DataSource::images: return load_image_dataset<Real>(c.data_path);
        case DataSource::tensor: return load_tensor_dataset<Real>(c.data_path);
    }
    throw ArgumentError("unknown dataset source");
}

inline Data load_data(const RunConfig& c) {
    Data d;
    d.full = load_full_dataset(c);
    d.splits = split_by_class(d.full, {c.train_frac, c.val_frac, 1.0 - c.train_frac - c.val_frac}, c.data_seed);
    d.train = c.label_noise > 0 ? inject_label_noise(d.splits.train, c.label_noise, stream_seed(c.data_seed, Stream::noise))
                                : d.splits.train;
    return d;
}

inline ArchSpec build_arch(const RunConfig& c, const LabeledDataset<Real>& ds) {
    const auto& dims = ds.samples.dims();
    if (c.arch == ArchKind::conv4) {
        if (dims.size() != 4) throw ArgumentError("arch = conv4 needs image samples (n x c x h x w)");
        return ArchSpec::conv4(c.conv_channels, dims[1], dims[2], dims[3]);
    }
    std::size_t in = 1;
    for (std::size_t i = 1; i < dims.size(); ++i) in *= dims[i];
    if (dims.size() != 2) throw ArgumentError("arch = mlp needs flat samples (n x features)");
    std::vector<std::size_t> mlp{in};
    mlp.insert(mlp.end(), c.hidden.begin(), c.hidden.end());
    mlp.push_back(c.embed_dim);
    return ArchSpec::mlp(std::move(mlp));
}

inline std::string run_id(const RunConfig& c) { return to_string(c.mode); }

/// Adaptation scope used at test time. Whole-class and multi-task models keep
/// the body frozen and fit only the head.
inline Scope eval_scope(const RunConfig& c, TrainMode mode) {
    return (mode == TrainMode::wct || mode == TrainMode::mtl) ? Scope::head_only : c.eval.scope;
}

inline void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    io::write_file(p, s);
}

template <class F>
void write_with(const fs::path& p, F&& f) {
    std::ostringstream os;
    f(os);
    write_text(p, os.str());
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char ch : s) {
        if (ch == '"') o += '"';
        o += ch == '\n' ? ' ' : ch;
    }
    return o + "\"";
}

// ---- training -------------------------------------------------------------------

struct TrainOutput {
    TrainedModel<Real> model;
    std::vector<EpochStats> log;
    std::vector<std::pair<int, double>> val_points;
    MetricsLog metrics{"", 0};
    std::vector<Milestone> milestones;
};

using EpochCallback = std::function<void(int, const TrainedModel<Real>&)>;

/// Runs the configured trainer. Validation accuracy is sampled every
/// cfg.eval_every epochs; on_epoch sees the model after every outer step.
inline TrainOutput train_model(const RunConfig& cfg, const Data& data, const UhtOptions& opts = {},
                               const EpochCallback& on_epoch = {}) {
    validate(cfg);
    const auto arch = build_arch(cfg, data.full);
    TrainOutput out;
    TrainHooks<Real> hooks;
    hooks.on_epoch = [&](int epoch, const TrainedModel<Real>& m) {
        if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            auto spec = cfg.eval;
            spec.episodes = cfg.eval_every_episodes;
            spec.scope = eval_scope(cfg, m.mode);
            out.val_points.emplace_back(epoch, eval_fewshot(m, data.splits.val, spec, stream_seed(cfg.seed, Stream::eval, {0x7a1ULL})).mean);
        }
        if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.hyper.epochs) {
            auto snap = m;
            snap.provenance.config_hash = config_hash(cfg);
            save_checkpoint(snap, fs::path(cfg.out) / ("model_epoch" + std::to_string(epoch) + ".ckpt"));
        }
        if (on_epoch) on_epoch(epoch, m);
    };
    auto hyper = cfg.hyper;
    TrainResult<Real> r;
    switch (cfg.mode) {
        case TrainMode::uht: r = train_dhm_uht(data.train, arch, hyper, cfg.seed, opts, hooks); break;
        case TrainMode::maml:
            hyper.scope = Scope::body_and_head;
            r = train_supervised_meta(data.train, arch, hyper, cfg.episodes, cfg.head_mode, cfg.seed, hooks);
            break;
        case TrainMode::anil:
            hyper.scope = Scope::head_only;
            r = train_supervised_meta(data.train, arch, hyper, cfg.episodes, cfg.head_mode, cfg.seed, hooks);
            break;
        case TrainMode::wct: r = train_wct(data.train, arch, hyper, cfg.wct_batch, cfg.seed, hooks); break;
        case TrainMode::mtl: r = train_mtl(data.train, arch, hyper, cfg.episodes, cfg.seed, hooks); break;
    }
    out.model = std::move(r.model);
    out.model.provenance.config_hash = config_hash(cfg);
    out.log = std::move(r.log);
    out.metrics = MetricsLog(run_id(cfg), cfg.seed);
    std::size_t v = 0;
    for (const auto& st : out.log) {
        out.metrics.add(st.epoch, Phase::train, "loss", st.loss);
        if (v < out.val_points.size() && out.val_points[v].first == st.epoch)
            out.metrics.add(st.epoch, Phase::eval_fewshot, "val_acc", out.val_points[v++].second);
    }
    out.milestones = compute_milestones(cfg.milestones, out.val_points, out.log);
    return out;
}

inline void echo_config(const RunConfig& cfg) { write_text(fs::path(cfg.out) / "config.resolved", to_text(cfg)); }

/// train: checkpoint, metrics.csv, steps.csv, milestones.csv and the resolved config.
inline TrainOutput cmd_train(const RunConfig& cfg) {
    validate(cfg);
    echo_config(cfg);
    const auto data = load_data(cfg);
    auto out = train_model(cfg, data);
    const fs::path dir(cfg.out);
    save_checkpoint(out.model, dir / "model.ckpt");
    write_with(dir / "metrics.csv", [&](std::ostream& os) { out.metrics.write_csv(os); });
    write_with(dir / "steps.csv", [&](std::ostream& os) { write_steps_csv(os, out.log); });
    write_with(dir / "milestones.csv", [&](std::ostream& os) { write_milestones_csv(os, out.milestones); });
    return out;
}

// ---- evaluation -----------------------------------------------------------------

struct EvalOutput {
    EvalReport fewshot;
    std::optional<EvalReport> zeroshot;
};

/// Few-shot and zero-shot accuracy on the test split.
inline EvalOutput evaluate(const RunConfig& cfg, const TrainedModel<Real>& model, const Data& data) {
    EvalOutput e;
    auto spec = cfg.eval;
    spec.scope = eval_scope(cfg, model.mode);
    e.fewshot = eval_fewshot(model, data.splits.test, spec, cfg.seed);
    const auto k = static_cast<std::size_t>(data.splits.test.class_count);
    if (k >= 2 && data.splits.test.size() >= k) {
        std::vector<std::uint64_t> seeds;
        for (int i = 0; i < cfg.zeroshot_seeds; ++i) seeds.push_back(stream_seed(cfg.seed, Stream::kmeans, {static_cast<std::uint64_t>(i)}));
        e.zeroshot = eval_zeroshot(model, data.splits.test, k, seeds);
    }
    return e;
}

inline void add_eval_rows(MetricsLog& log, int epoch, const EvalOutput& e) {
    log.add(epoch, Phase::eval_fewshot, "test_acc", e.fewshot.mean);
    log.add(epoch, Phase::eval_fewshot, "test_ci95", e.fewshot.ci95);
    if (e.zeroshot) {
        log.add(epoch, Phase::eval_zeroshot, "test_acc", e.zeroshot->mean);
        log.add(epoch, Phase::eval_zeroshot, "test_ci95", e.zeroshot->ci95);
    }
}

inline void check_input_shape(const TrainedModel<Real>& m, const LabeledDataset<Real>& ds, const std::string& what) {
    const auto& d = ds.samples.dims();
    bool ok;
    if (m.arch.arch == Arch::mlp) {
        ok = d.size() == 2 && d[1] == m.arch.mlp_dims.front();
    } else {
        ok = d.size() == 4 && d[1] == m.arch.in_c && d[2] == m.arch.in_h && d[3] == m.arch.in_w;
    }
    if (!ok) throw CheckpointError(what + ": checkpoint architecture does not match the dataset's sample shape");
}

/// eval: loads a checkpoint and writes eval_metrics.csv. Evaluation rows carry epoch 0.
inline EvalOutput cmd_eval(const RunConfig& cfg, const fs::path& ckpt) {
    validate(cfg);
    const auto model = load_checkpoint<Real>(ckpt);
    const auto data = load_data(cfg);
    check_input_shape(model, data.full, ckpt.string());
    const auto e = evaluate(cfg, model, data);
    MetricsLog log(run_id(cfg), cfg.seed);
    add_eval_rows(log, 0, e);
    write_with(fs::path(cfg.out) / "eval_metrics.csv", [&](std::ostream& os) { log.write_csv(os); });
    return e;
}

// ---- representation stability ---------------------------------------------------

/// The head whose logits are tracked. Persistent heads are used as they are;
/// models without one get a fresh head per epoch (as their tasks do), fitted on
/// a fixed labelled episode with the training inner loop.
inline ParamGroup<Real> stability_head(const RunConfig& cfg, const TrainedModel<Real>& m, const Episode<Real>& ep, int epoch) {
    if (const auto* h = m.sole_head()) return *h;
    auto head = init_dynamic_head<Real>(m.embed_dim(), static_cast<std::size_t>(ep.way),
                                        stream_seed(cfg.seed, Stream::probe, {static_cast<std::uint64_t>(epoch), 0x4eadULL}));
    return inner_adapt(m.arch, m.body, head, ep.support, ep.support_labels, cfg.hyper.inner_steps,
                       static_cast<Real>(cfg.hyper.alpha), Scope::head_only)
        .head;
}

struct StabilityOutput {
    TrainOutput train;
    std::vector<StabilityRecord> records;
};

/// Trains while snapshotting activations on a fixed probe batch after every
/// outer step; consecutive snapshots give one rs row per layer.
inline StabilityOutput run_stability(const RunConfig& cfg, const Data& data, const UhtOptions& opts = {}) {
    const auto arch = build_arch(cfg, data.full);
    const auto probe_n = std::min(cfg.probe_size, data.train.size());
    Rng rng(stream_seed(cfg.seed, Stream::probe));
    const ProbeBatch<Real> probe{gather_rows(data.train.samples, rng.sample_without_replacement(data.train.size(), probe_n))};
    const auto way = std::min(cfg.eval.way, data.train.class_count);
    const auto ep = sample_episode(data.train, way, cfg.eval.shot, 0, stream_seed(cfg.seed, Stream::probe, {1}));
    std::vector<ActivationSnapshot> snaps;
    StabilityOutput out;
    out.train = train_model(cfg, data, opts, [&](int epoch, const TrainedModel<Real>& m) {
        const auto head = stability_head(cfg, m, ep, epoch);
        snaps.push_back(capture_activations(arch, m.body, &head, probe, epoch));
    });
    if (snaps.size() >= 2) out.records = stability_curve(snaps, cfg.var_frac);
    // Interleave one stability row per layer after each epoch's training rows.
    MetricsLog merged(run_id(cfg), cfg.seed);
    std::size_t k = 0;
    for (const auto& row : out.train.metrics.rows()) {
        for (; k < out.records.size() && out.records[k].epoch < row.epoch; ++k)
            merged.add(out.records[k].epoch, Phase::stability, "rs_" + out.records[k].layer, out.records[k].rs);
        merged.add(row.epoch, row.phase, row.metric, row.value);
    }
    for (; k < out.records.size(); ++k)
        merged.add(out.records[k].epoch, Phase::stability, "rs_" + out.records[k].layer, out.records[k].rs);
    out.train.metrics = std::move(merged);
    return out;
}

inline StabilityOutput cmd_stability(const RunConfig& cfg) {
    validate(cfg);
    echo_config(cfg);
    auto out = run_stability(cfg, load_data(cfg));
    const fs::path dir(cfg.out);
    write_with(dir / "metrics.csv", [&](std::ostream& os) { out.train.metrics.write_csv(os); });
    write_with(dir / "stability.csv", [&](std::ostream& os) { write_stability_csv(os, run_id(cfg), cfg.seed, out.records); });
    write_with(dir / "stability.svg", [&](std::ostream& os) {
        write_stability_svg(os, out.records, "representation stability (" + run_id(cfg) + ", seed " + std::to_string(cfg.seed) + ")");
    });
    return out;
}

// ---- sweep ----------------------------------------------------------------------

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

/// Parses "key=v1,v2,..."; the key must be a config key.
inline GridAxis parse_grid(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ParseError("grid: expected key=v1,v2,... in '" + spec + "'", 0);
    GridAxis g{detail::trim(spec.substr(0, eq)), detail::split_list(spec.substr(eq + 1))};
    const auto keys = config_keys();
    if (std::find(keys.begin(), keys.end(), g.key) == keys.end()) throw ParseError("grid: unknown key '" + g.key + "'", 0);
    if (g.key == "out") throw ParseError("grid: 'out' cannot be swept", 0);
    if (g.values.empty() || std::any_of(g.values.begin(), g.values.end(), [](const auto& v) { return v.empty(); }))
        throw ParseError("grid: empty value for '" + g.key + "'", 0);
    return g;
}

struct SweepCell {
    std::vector<std::string> values;
    bool ok = false;
    std::string error;
    double fewshot_acc = 0, fewshot_ci95 = 0, zeroshot_acc = 0, skip_rate = 0;
};

inline std::vector<SweepCell> run_sweep(const RunConfig& base, const std::vector<GridAxis>& grid) {
    std::size_t total = 1;
    for (const auto& g : grid) total *= g.values.size();
    std::vector<SweepCell> cells(total);
    for (std::size_t i = 0; i < total; ++i) {
        auto& cell = cells[i];
        auto cfg = base;
        std::size_t rem = i;
        std::vector<std::size_t> pick(grid.size());
        for (std::size_t a = grid.size(); a-- > 0;) {
            pick[a] = rem % grid[a].values.size();
            rem /= grid[a].values.size();
        }
        std::ostringstream cellname;
        cellname << "cell" << i;
        cfg.out = (fs::path(base.out) / "cells" / cellname.str()).string();
        try {
            for (std::size_t a = 0; a < grid.size(); ++a) {
                cell.values.push_back(grid[a].values[pick[a]]);
                set_key(cfg, grid[a].key, grid[a].values[pick[a]]);
            }
            validate(cfg);
            echo_config(cfg);
            const auto data = load_data(cfg);
            const auto tr = train_model(cfg, data);
            const auto ev = evaluate(cfg, tr.model, data);
            int tasks = 0, skipped = 0;
            for (const auto& s : tr.log) {
                tasks += s.tasks;
                skipped += s.skipped;
            }
            cell.fewshot_acc = ev.fewshot.mean;
            cell.fewshot_ci95 = ev.fewshot.ci95;
            cell.zeroshot_acc = ev.zeroshot ? ev.zeroshot->mean : std::numeric_limits<double>::quiet_NaN();
            cell.skip_rate = tasks ? static_cast<double>(skipped) / tasks : 0.0;
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
        }
    }
    return cells;
}

/// cell,<grid keys>,status,fewshot_acc,fewshot_ci95,zeroshot_acc,skip_rate,error
inline void write_sweep_csv(std::ostream& os, const std::vector<GridAxis>& grid, const std::vector<SweepCell>& cells) {
    os << "cell";
    for (const auto& g : grid) os << ',' << g.key;
    os << ",status,fewshot_acc,fewshot_ci95,zeroshot_acc,skip_rate,error\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        os << i;
        for (const auto& v : c.values) os << ',' << csv_quote(v);
        for (std::size_t k = c.values.size(); k < grid.size(); ++k) os << ',';
        if (c.ok)
            os << ",ok," << detail::fmt_double(c.fewshot_acc) << ',' << detail::fmt_double(c.fewshot_ci95) << ','
               << detail::fmt_double(c.zeroshot_acc) << ',' << detail::fmt_double(c.skip_rate) << ",\n";
        else
            os << ",error,,,,," << csv_quote(c.error) << '\n';
    }
}

inline std::vector<SweepCell> cmd_sweep(const RunConfig& cfg, const std::vector<GridAxis>& grid) {
    validate(cfg);
    if (grid.empty()) throw ArgumentError("sweep: at least one --grid is required");
    echo_config(cfg);
    auto cells = run_sweep(cfg, grid);
    write_with(fs::path(cfg.out) / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, grid, cells); });
    return cells;
}

// ---- ablation -------------------------------------------------------------------

struct AblationRow {
    std::string variant;
    std::size_t persistent_heads = 0;
    std::uint64_t data_hash = 0;
    EvalOutput eval;
};

/// The four task-construction variants, in output order.
inline std::vector<std::pair<std::string, UhtOptions>> ablation_variants(std::size_t way) {
    UhtOptions g1;
    g1.builder = TaskBuilder::kmeans;
    g1.fixed_way = way;
    g1.static_head = true;
    UhtOptions g2;
    g2.frozen_labels = true;
    UhtOptions g3;
    g3.fixed_way = way;
    g3.static_head = true;
    return {{"G1", g1}, {"G2", g2}, {"G3", g3}, {"full", UhtOptions{}}};
}

inline std::vector<AblationRow> run_ablation(const RunConfig& cfg) {
    auto ucfg = cfg;
    ucfg.mode = TrainMode::uht;
    std::vector<AblationRow> rows;
    for (const auto& [name, opts] : ablation_variants(cfg.ablate_way)) {
        const auto data = load_data(ucfg);  // reloaded per variant; the hash shows the bytes agree
        AblationRow r;
        r.variant = name;
        r.data_hash = data.train.content_hash();
        const auto tr = train_model(ucfg, data, opts);
        r.persistent_heads = tr.model.heads.size();
        r.eval = evaluate(ucfg, tr.model, data);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// variant,metric,value,ci95,persistent_heads,data_hash
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "variant,metric,value,ci95,persistent_heads,data_hash\n";
    char hash[32];
    auto line = [&](const AblationRow& r, const char* metric, const EvalReport& e) {
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.data_hash));
        os << r.variant << ',' << metric << ',' << detail::fmt_double(e.mean) << ',' << detail::fmt_double(e.ci95) << ','
           << r.persistent_heads << ',' << hash << '\n';
    };
    for (const auto& r : rows) line(r, "fewshot_acc", r.eval.fewshot);
    for (const auto& r : rows)
        if (r.eval.zeroshot) line(r, "zeroshot_acc", *r.eval.zeroshot);
}

inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg) {
    validate(cfg);
    echo_config(cfg);
    auto rows = run_ablation(cfg);
    write_with(fs::path(cfg.out) / "ablation.csv", [&](std::ostream& os) { write_ablation_csv(os, rows); });
    return rows;
}

// ---- embeddings -----------------------------------------------------------------

/// index,label,e0,...,e{D-1} for every sample of the configured dataset.
inline void write_embeddings_csv(std::ostream& os, const TrainedModel<Real>& m, const LabeledDataset<Real>& ds) {
    Tensor<Real> emb;
    {
        NoGrad ng;
        emb = forward_body(m.arch, m.body, ds.samples);
    }
    const std::size_t n = emb.dim(0), d = emb.numel() / std::max<std::size_t>(n, 1);
    os << "index,label";
    for (std::size_t j = 0; j < d; ++j) os << ",e" << j;
    os << '\n';
    for (std::size_t i = 0; i < n; ++i) {
        os << i << ',' << ds.labels[i];
        for (std::size_t j = 0; j < d; ++j) os << ',' << detail::fmt_double(emb[i * d + j]);
        os << '\n';
    }
}

inline void cmd_export_embeddings(const RunConfig& cfg, const fs::path& ckpt) {
    validate(cfg);
    const auto model = load_checkpoint<Real>(ckpt);
    const auto ds = load_full_dataset(cfg);
    check_input_shape(model, ds, ckpt.string());
    write_with(fs::path(cfg.out) / "embeddings.csv", [&](std::ostream& os) { write_embeddings_csv(os, model, ds); });
}

}  // namespace dhm::harness
