#pragma once

// Run logs: the deterministic metrics CSV, per-step timing, accuracy
// milestones and a dependency-free SVG line plot.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/error.hpp"
#include "dhm/harness/config.hpp"
#include "dhm/meta.hpp"
#include "dhm/repstab.hpp"

namespace dhm::harness {

enum class Phase { train = 0, eval_fewshot = 1, eval_zeroshot = 2, stability = 3 };

inline const char* to_string(Phase p) {
    switch (p) {
        case Phase::train: return "train";
        case Phase::eval_fewshot: return "eval_fewshot";
        case Phase::eval_zeroshot: return "eval_zeroshot";
        case Phase::stability: return "stability";
    }
    return "?";
}

struct MetricRow {
    int epoch = 0;
    Phase phase = Phase::train;
    std::string metric;
    double value = 0;
};

/// Append-only metrics table. Rows must arrive ordered by (epoch, phase); several
/// metrics may share one (epoch, phase) key.
class MetricsLog {
public:
    MetricsLog(std::string run_id, std::uint64_t seed) : run_id_(std::move(run_id)), seed_(seed) {}

    void add(int epoch, Phase phase, std::string metric, double value) {
        if (!rows_.empty()) {
            const auto& last = rows_.back();
            if (epoch < last.epoch || (epoch == last.epoch && phase < last.phase))
                throw ContractError("metrics: rows must be ordered by (epoch, phase)");
        }
        rows_.push_back({epoch, phase, std::move(metric), value});
    }

    const std::vector<MetricRow>& rows() const { return rows_; }
    const std::string& run_id() const { return run_id_; }

    /// run_id,seed,epoch,phase,metric,value
    void write_csv(std::ostream& os) const {
        os << "run_id,seed,epoch,phase,metric,value\n";
        for (const auto& r : rows_)
            os << run_id_ << ',' << seed_ << ',' << r.epoch << ',' << to_string(r.phase) << ',' << r.metric << ','
               << detail::fmt_double(r.value) << '\n';
    }

private:
    std::string run_id_;
    std::uint64_t seed_;
    std::vector<MetricRow> rows_;
};

/// Wall-clock and task health per outer step. Timing makes this file differ
/// between runs, so it is kept apart from the metrics CSV.
inline void write_steps_csv(std::ostream& os, const std::vector<EpochStats>& log) {
    os << "epoch,seconds,tasks,skipped,skip_rate\n";
    for (const auto& s : log)
        os << s.epoch << ',' << detail::fmt_double(s.seconds) << ',' << s.tasks << ',' << s.skipped << ','
           << detail::fmt_double(s.skip_rate()) << '\n';
}

inline double mean_step_seconds(const std::vector<EpochStats>& log) {
    if (log.empty()) return 0;
    double t = 0;
    for (const auto& s : log) t += s.seconds;
    return t / static_cast<double>(log.size());
}

struct Milestone {
    double threshold = 0;
    std::optional<int> epoch;
    std::optional<double> seconds;  // cumulative training time, evaluation excluded
};

/// First validation point at which each threshold is reached.
/// val_points: (epoch, accuracy) in ascending epoch order.
inline std::vector<Milestone> compute_milestones(const std::vector<double>& thresholds,
                                                 const std::vector<std::pair<int, double>>& val_points,
                                                 const std::vector<EpochStats>& log) {
    std::vector<Milestone> out;
    for (double th : thresholds) {
        Milestone m;
        m.threshold = th;
        for (const auto& [epoch, acc] : val_points)
            if (acc >= th) {
                m.epoch = epoch;
                double t = 0;
                for (const auto& s : log)
                    if (s.epoch <= epoch) t += s.seconds;
                m.seconds = t;
                break;
            }
        out.push_back(m);
    }
    return out;
}

/// threshold,epoch,seconds with empty cells for thresholds never reached.
inline void write_milestones_csv(std::ostream& os, const std::vector<Milestone>& ms) {
    os << "threshold,epoch,seconds\n";
    for (const auto& m : ms) {
        os << detail::fmt_double(m.threshold) << ',';
        if (m.epoch) os << *m.epoch;
        os << ',';
        if (m.seconds) os << detail::fmt_double(*m.seconds);
        os << '\n';
    }
}

/// Line plot of rs against epoch with one <path> per layer.
inline void write_stability_svg(std::ostream& os, const std::vector<StabilityRecord>& recs, const std::string& title) {
    std::vector<std::string> layers;
    std::map<std::string, std::vector<std::pair<int, double>>> series;
    int emin = 0, emax = 1;
    bool first = true;
    for (const auto& r : recs) {
        if (!series.count(r.layer)) layers.push_back(r.layer);
        series[r.layer].emplace_back(r.epoch, r.rs);
        emin = first ? r.epoch : std::min(emin, r.epoch);
        emax = first ? r.epoch : std::max(emax, r.epoch);
        first = false;
    }
    if (emax == emin) ++emax;
    const double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
    const double pw = W - L - R, ph = H - T - B;
    auto px = [&](int e) { return L + pw * (e - emin) / static_cast<double>(emax - emin); };
    auto py = [&](double rs) { return T + ph * (1.0 - std::clamp(rs, 0.0, 1.0)); };
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

    auto esc = [](const std::string& s) {
        std::string o;
        for (char c : s) {
            if (c == '&') o += "&amp;";
            else if (c == '<') o += "&lt;";
            else if (c == '>') o += "&gt;";
            else if (c == '"') o += "&quot;";
            else o += c;
        }
        return o;
    };
    char buf[128];
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\">\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << esc(title) << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
    for (double v : {0.0, 0.5, 1.0}) {
        std::snprintf(buf, sizeof buf, "%.1f", v);
        os << "<text x=\"" << L - 8 << "\" y=\"" << py(v) + 4 << "\" font-family=\"sans-serif\" font-size=\"11\" "
           << "text-anchor=\"end\">" << buf << "</text>\n";
    }
    for (int e : {emin, emax})
        os << "<text x=\"" << px(e) << "\" y=\"" << T + ph + 18 << "\" font-family=\"sans-serif\" font-size=\"11\" "
           << "text-anchor=\"middle\">" << e << "</text>\n";
    os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10 << "\" font-family=\"sans-serif\" font-size=\"12\" "
       << "text-anchor=\"middle\">epoch</text>\n";
    os << "<text x=\"16\" y=\"" << T + ph / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
       << "transform=\"rotate(-90 16 " << T + ph / 2 << ")\" text-anchor=\"middle\">rs</text>\n";
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const char* col = colors[i % (sizeof colors / sizeof *colors)];
        std::ostringstream d;
        bool move = true;
        for (const auto& [e, rs] : series[layers[i]]) {
            std::snprintf(buf, sizeof buf, "%s%.2f %.2f", move ? "M" : " L", px(e), py(rs));
            d << buf;
            move = false;
        }
        os << "<path d=\"" << d.str() << "\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\">"
           << "<title>" << esc(layers[i]) << "</title></path>\n";
        const double ly = T + 16.0 * static_cast<double>(i) + 8;
        os << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 32 << "\" y2=\"" << ly
           << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << L + pw + 38 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
           << esc(layers[i]) << "</text>\n";
    }
    os << "</svg>\n";
}

}  // namespace dhm::harness
