#pragma once

// Flat `key = value` run configuration with a closed schema.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/error.hpp"
#include "dhm/evaluation.hpp"
#include "dhm/io.hpp"
#include "dhm/meta.hpp"

namespace dhm::harness {

enum class DataSource { blobs, images, tensor };
enum class ArchKind { mlp, conv4 };

struct RunConfig {
    TrainMode mode = TrainMode::uht;
    std::uint64_t seed = 0;
    std::string out = "out";

    // data
    DataSource dataset = DataSource::blobs;
    std::string data_path;
    int blob_classes = 16;
    std::size_t blob_dim = 32;
    int blob_per_class = 60;
    double blob_intra = 0.5;
    double blob_inter = 40.0;
    std::uint64_t data_seed = 1;
    double train_frac = 0.5;
    double val_frac = 0.125;
    double label_noise = 0.0;

    // backbone
    ArchKind arch = ArchKind::mlp;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t embed_dim = 64;
    std::size_t conv_channels = 32;

    HyperConfig hyper;

    // episodes for the supervised modes
    EpisodeSpec episodes;
    HeadMode head_mode = HeadMode::dynamic_head;
    std::size_t wct_batch = 64;

    // evaluation
    FewShotSpec eval;
    int eval_every = 0;  // periodic validation accuracy; 0 disables
    int eval_every_episodes = 20;
    int zeroshot_seeds = 5;

    // representation stability
    std::size_t probe_size = 256;
    double var_frac = 0.99;

    std::size_t ablate_way = 5;
    std::vector<double> milestones{0.5, 0.6, 0.7, 0.8, 0.9};
    int checkpoint_every = 0;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same value.
inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::string fmt_double(float v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || p != end || v.empty())
        throw ArgumentError(key + ": expected " + (std::is_floating_point_v<N> ? "a number" : "an integer") + ", got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) { return parse_number<double>(key, v); }

inline long long parse_int(const std::string& key, const std::string& v) { return parse_number<long long>(key, v); }

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ArgumentError(key + ": expected true or false, got '" + v + "'");
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> opts) {
    std::string names;
    for (const auto& [n, e] : opts) {
        if (v == n) return e;
        names += names.empty() ? n : std::string("|") + n;
    }
    throw ArgumentError(key + ": expected one of " + names + ", got '" + v + "'");
}

template <class E>
std::string enum_name(E e, std::initializer_list<std::pair<const char*, E>> opts) {
    for (const auto& [n, x] : opts)
        if (x == e) return n;
    return "?";
}

inline void require(bool ok, const std::string& key, const char* what) {
    if (!ok) throw ArgumentError(key + " " + what);
}

inline void require_range(double x, double lo, double hi, const std::string& key) {
    if (x >= lo && x <= hi) return;
    if (std::isinf(hi)) throw ArgumentError(key + " must be >= " + fmt_double(lo) + ", got " + fmt_double(x));
    throw ArgumentError(key + " must lie in [" + fmt_double(lo) + ", " + fmt_double(hi) + "], got " + fmt_double(x));
}

const std::initializer_list<std::pair<const char*, TrainMode>> kModes{
    {"uht", TrainMode::uht}, {"maml", TrainMode::maml}, {"anil", TrainMode::anil}, {"wct", TrainMode::wct}, {"mtl", TrainMode::mtl}};
const std::initializer_list<std::pair<const char*, DataSource>> kSources{
    {"blobs", DataSource::blobs}, {"images", DataSource::images}, {"tensor", DataSource::tensor}};
const std::initializer_list<std::pair<const char*, ArchKind>> kArchs{{"mlp", ArchKind::mlp}, {"conv4", ArchKind::conv4}};
const std::initializer_list<std::pair<const char*, Order>> kOrders{{"exact", Order::exact}, {"first_order", Order::first_order}};
const std::initializer_list<std::pair<const char*, Scope>> kScopes{{"body_and_head", Scope::body_and_head}, {"head_only", Scope::head_only}};
const std::initializer_list<std::pair<const char*, HeadMode>> kHeads{{"dynamic", HeadMode::dynamic_head}, {"static", HeadMode::static_head}};

struct Field {
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class I>
Field int_field(const char* key, I RunConfig::*m, long long lo) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                const auto x = parse_int(key, v);
                require(x >= lo, key, lo == 0 ? "must be >= 0" : "must be >= 1");
                c.*m = static_cast<I>(x);
            },
            [=](const RunConfig& c) { return std::to_string(c.*m); }};
}

template <class I, class S>
Field nested_int(const char* key, S RunConfig::*outer, I S::*m, long long lo) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                const auto x = parse_int(key, v);
                require(x >= lo, key, lo == 0 ? "must be >= 0" : "must be >= 1");
                (c.*outer).*m = static_cast<I>(x);
            },
            [=](const RunConfig& c) { return std::to_string((c.*outer).*m); }};
}

template <class S>
Field nested_real(const char* key, S RunConfig::*outer, double S::*m, double lo, double hi) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                const auto x = parse_real(key, v);
                require_range(x, lo, hi, key);
                (c.*outer).*m = x;
            },
            [=](const RunConfig& c) { return fmt_double((c.*outer).*m); }};
}

inline Field real_field(const char* key, double RunConfig::*m, double lo, double hi) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                const auto x = parse_real(key, v);
                require_range(x, lo, hi, key);
                c.*m = x;
            },
            [=](const RunConfig& c) { return fmt_double(c.*m); }};
}

template <class E>
Field enum_field(const char* key, std::function<E&(RunConfig&)> ref, std::initializer_list<std::pair<const char*, E>> opts) {
    return {key, [=](RunConfig& c, const std::string& v) { ref(c) = parse_enum(key, v, opts); },
            [=](const RunConfig& c) { return enum_name(ref(const_cast<RunConfig&>(c)), opts); }};
}

inline Field bool_field(const char* key, bool HyperConfig::*m) {
    return {key, [=](RunConfig& c, const std::string& v) { c.hyper.*m = parse_bool(key, v); },
            [=](const RunConfig& c) { return std::string(c.hyper.*m ? "true" : "false"); }};
}

inline const std::vector<Field>& schema() {
    constexpr double inf = std::numeric_limits<double>::infinity();
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back(enum_field<TrainMode>("mode", [](RunConfig& c) -> TrainMode& { return c.mode; }, kModes));
        f.push_back(int_field("seed", &RunConfig::seed, 0));
        f.push_back({"out", [](RunConfig& c, const std::string& v) { require(!v.empty(), "out", "must not be empty"); c.out = v; },
                     [](const RunConfig& c) { return c.out; }});
        f.push_back(enum_field<DataSource>("dataset", [](RunConfig& c) -> DataSource& { return c.dataset; }, kSources));
        f.push_back({"data_path", [](RunConfig& c, const std::string& v) { c.data_path = v; },
                     [](const RunConfig& c) { return c.data_path; }});
        f.push_back(int_field("blob_classes", &RunConfig::blob_classes, 1));
        f.push_back(int_field("blob_dim", &RunConfig::blob_dim, 1));
        f.push_back(int_field("blob_per_class", &RunConfig::blob_per_class, 1));
        f.push_back(real_field("blob_intra", &RunConfig::blob_intra, 0, inf));
        f.push_back(real_field("blob_inter", &RunConfig::blob_inter, 0, inf));
        f.push_back(int_field("data_seed", &RunConfig::data_seed, 0));
        f.push_back(real_field("train_frac", &RunConfig::train_frac, 0, 1));
        f.push_back(real_field("val_frac", &RunConfig::val_frac, 0, 1));
        f.push_back(real_field("label_noise", &RunConfig::label_noise, 0, 1));
        f.push_back(enum_field<ArchKind>("arch", [](RunConfig& c) -> ArchKind& { return c.arch; }, kArchs));
        f.push_back({"hidden",
                     [](RunConfig& c, const std::string& v) {
                         std::vector<std::size_t> dims;
                         if (!v.empty() && v != "none")
                             for (const auto& s : split_list(v)) {
                                 const auto x = parse_int("hidden", s);
                                 require(x >= 1, "hidden", "widths must be >= 1");
                                 dims.push_back(static_cast<std::size_t>(x));
                             }
                         c.hidden = std::move(dims);
                     },
                     [](const RunConfig& c) {
                         if (c.hidden.empty()) return std::string("none");
                         std::string s;
                         for (auto d : c.hidden) s += (s.empty() ? "" : ",") + std::to_string(d);
                         return s;
                     }});
        f.push_back(int_field("embed_dim", &RunConfig::embed_dim, 1));
        f.push_back(int_field("conv_channels", &RunConfig::conv_channels, 1));
        f.push_back(nested_real("alpha", &RunConfig::hyper, &HyperConfig::alpha, 0, inf));
        f.push_back(nested_real("eta", &RunConfig::hyper, &HyperConfig::eta, 0, inf));
        f.push_back(nested_int("inner_steps", &RunConfig::hyper, &HyperConfig::inner_steps, 1));
        f.push_back(nested_int("meta_batch", &RunConfig::hyper, &HyperConfig::meta_batch, 1));
        f.push_back(nested_int("epochs", &RunConfig::hyper, &HyperConfig::epochs, 0));
        f.push_back(nested_int("sub_sample", &RunConfig::hyper, &HyperConfig::sub_sample, 1));
        f.push_back({"eps",
                     [](RunConfig& c, const std::string& v) {
                         const auto x = parse_real("eps", v);
                         require(x > 0 && std::isfinite(x), "eps", "must be positive");
                         c.hyper.dbscan.eps = x;
                     },
                     [](const RunConfig& c) { return fmt_double(c.hyper.dbscan.eps); }});
        f.push_back({"min_samples",
                     [](RunConfig& c, const std::string& v) {
                         const auto x = parse_int("min_samples", v);
                         require(x >= 1, "min_samples", "must be >= 1");
                         c.hyper.dbscan.min_samples = static_cast<int>(x);
                     },
                     [](const RunConfig& c) { return std::to_string(c.hyper.dbscan.min_samples); }});
        f.push_back(nested_int("min_cluster_size", &RunConfig::hyper, &HyperConfig::min_cluster_size, 0));
        f.push_back(nested_real("drop_epoch_frac", &RunConfig::hyper, &HyperConfig::drop_epoch_frac, 0, 1));
        f.push_back(enum_field<Order>("order", [](RunConfig& c) -> Order& { return c.hyper.order; }, kOrders));
        f.push_back(enum_field<Scope>("scope", [](RunConfig& c) -> Scope& { return c.hyper.scope; }, kScopes));
        f.push_back(bool_field("split_support_query", &HyperConfig::split_support_query));
        f.push_back(bool_field("unit_norm", &HyperConfig::unit_norm));
        f.push_back(nested_int("way_min", &RunConfig::episodes, &EpisodeSpec::way_min, 2));
        f.push_back(nested_int("way_max", &RunConfig::episodes, &EpisodeSpec::way_max, 2));
        f.push_back(nested_int("shot", &RunConfig::episodes, &EpisodeSpec::shot, 1));
        f.push_back(nested_int("query", &RunConfig::episodes, &EpisodeSpec::query, 0));
        f.push_back(enum_field<HeadMode>("head_mode", [](RunConfig& c) -> HeadMode& { return c.head_mode; }, kHeads));
        f.push_back(int_field("wct_batch", &RunConfig::wct_batch, 1));
        f.push_back(nested_int("eval_way", &RunConfig::eval, &FewShotSpec::way, 2));
        f.push_back(nested_int("eval_shot", &RunConfig::eval, &FewShotSpec::shot, 1));
        f.push_back(nested_int("eval_query", &RunConfig::eval, &FewShotSpec::query, 1));
        f.push_back(nested_int("eval_episodes", &RunConfig::eval, &FewShotSpec::episodes, 1));
        f.push_back(nested_int("eval_adapt_steps", &RunConfig::eval, &FewShotSpec::adapt_steps, 0));
        f.push_back(nested_real("eval_alpha", &RunConfig::eval, &FewShotSpec::alpha, 0, inf));
        f.push_back(enum_field<Scope>("eval_scope", [](RunConfig& c) -> Scope& { return c.eval.scope; }, kScopes));
        f.push_back(int_field("eval_every", &RunConfig::eval_every, 0));
        f.push_back(int_field("eval_every_episodes", &RunConfig::eval_every_episodes, 1));
        f.push_back(int_field("zeroshot_seeds", &RunConfig::zeroshot_seeds, 1));
        f.push_back(int_field("probe_size", &RunConfig::probe_size, 2));
        f.push_back(real_field("var_frac", &RunConfig::var_frac, 1e-9, 1));
        f.push_back(int_field("ablate_way", &RunConfig::ablate_way, 2));
        f.push_back({"milestones",
                     [](RunConfig& c, const std::string& v) {
                         std::vector<double> m;
                         if (!v.empty() && v != "none")
                             for (const auto& s : split_list(v)) {
                                 const auto x = parse_real("milestones", s);
                                 require(x > 0 && x <= 1, "milestones", "thresholds must lie in (0,1]");
                                 m.push_back(x);
                             }
                         c.milestones = std::move(m);
                     },
                     [](const RunConfig& c) {
                         if (c.milestones.empty()) return std::string("none");
                         std::string s;
                         for (auto d : c.milestones) s += (s.empty() ? "" : ",") + fmt_double(d);
                         return s;
                     }});
        f.push_back(int_field("checkpoint_every", &RunConfig::checkpoint_every, 0));
        return f;
    }();
    return fields;
}

inline const Field* find_field(const std::string& key) {
    for (const auto& f : schema())
        if (key == f.key) return &f;
    return nullptr;
}

}  // namespace detail

/// Keys accepted by the parser, in echo order.
inline std::vector<std::string> config_keys() {
    std::vector<std::string> k;
    for (const auto& f : detail::schema()) k.emplace_back(f.key);
    return k;
}

/// Checks that need more than one key.
inline void validate(const RunConfig& c) {
    if (c.train_frac + c.val_frac >= 1.0) throw ArgumentError("train_frac + val_frac must be < 1");
    if (c.episodes.way_min > c.episodes.way_max) throw ArgumentError("way_min must be <= way_max");
    if (c.dataset != DataSource::blobs && c.data_path.empty()) throw ArgumentError("data_path is required for this dataset");
    if (c.head_mode == HeadMode::static_head && c.episodes.heterogeneous())
        throw ArgumentError("head_mode = static needs way_min == way_max");
    c.hyper.validate();
}

/// Sets one key from its text form. line > 0 tags errors with that line.
inline void set_key(RunConfig& c, const std::string& key, const std::string& value, int line = 0) {
    const auto* f = detail::find_field(key);
    if (!f) throw ParseError("unknown key '" + key + "'", line);
    try {
        f->set(c, value);
    } catch (const ArgumentError& e) {
        throw ParseError(e.what(), line);
    }
}

inline std::string get_key(const RunConfig& c, const std::string& key) {
    const auto* f = detail::find_field(key);
    if (!f) throw ParseError("unknown key '" + key + "'", 0);
    return f->get(c);
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    std::vector<std::string> seen;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const auto line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
        const auto key = detail::trim(line.substr(0, eq));
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ParseError("duplicate key '" + key + "'", lineno);
        seen.push_back(key);
        set_key(c, key, detail::trim(line.substr(eq + 1)), lineno);
    }
    try {
        validate(c);
    } catch (const ArgumentError& e) {
        throw ParseError(e.what(), 0);
    }
    return c;
}

inline RunConfig parse_config(const std::filesystem::path& p) { return parse_config_text(io::read_file(p)); }

/// Fully resolved config, one key per line in schema order.
inline std::string to_text(const RunConfig& c) {
    std::string s;
    for (const auto& f : detail::schema()) s += std::string(f.key) + " = " + f.get(c) + "\n";
    return s;
}

/// FNV-1a over the resolved text minus the output directory; stamped into
/// checkpoints so that artifacts do not depend on where they were written.
inline std::uint64_t config_hash(const RunConfig& c) {
    auto located = c;
    located.out = "out";
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_text(located)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dhm::harness
