#pragma once

// Datasets, class splits, label noise and task sampling. Every sampler is a pure
// function of (dataset, parameters, seed).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/io.hpp"
#include "dhm/rng.hpp"
#include "dhm/tensor.hpp"

namespace dhm {

template <class T>
struct LabeledDataset {
    Tensor<T> samples;  // n x feature dims
    std::vector<int> labels;
    int class_count = 0;
    std::vector<std::vector<std::size_t>> class_index;

    std::size_t size() const { return labels.size(); }

    Dims sample_dims() const { return Dims(samples.dims().begin() + 1, samples.dims().end()); }

    /// Rebuilds class_index from labels and checks the invariants.
    void reindex() {
        class_index.assign(static_cast<std::size_t>(class_count), {});
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= class_count)
                throw ContractError("dataset: label " + std::to_string(labels[i]) + " outside class range");
            class_index[static_cast<std::size_t>(labels[i])].push_back(i);
        }
    }

    /// FNV-1a over the encoded samples and labels.
    std::uint64_t content_hash() const {
        std::uint64_t h = io::fnv1a(encode_tsr(samples));
        std::string lab;
        for (int l : labels) io::put_u32(lab, static_cast<std::uint32_t>(l));
        return io::fnv1a(lab, h);
    }
};

/// Rows of t (first axis) at the given indices, as a constant tensor.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<std::size_t>& idx) {
    const std::size_t n = t.dim(0), row = t.numel() / n;
    std::vector<T> out;
    out.reserve(idx.size() * row);
    for (auto i : idx) {
        if (i >= n) throw IndexError("gather_rows: index out of range");
        out.insert(out.end(), t.data().begin() + static_cast<std::ptrdiff_t>(i * row),
                   t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * row));
    }
    Dims d = t.dims();
    d[0] = idx.size();
    return Tensor<T>::from(std::move(d), std::move(out));
}

template <class T>
LabeledDataset<T> make_dataset(Tensor<T> samples, std::vector<int> labels, int class_count) {
    LabeledDataset<T> ds;
    ds.samples = std::move(samples);
    ds.labels = std::move(labels);
    ds.class_count = class_count;
    if (ds.samples.dim(0) != ds.labels.size()) throw ShapeError("dataset: sample and label counts differ");
    ds.reindex();
    return ds;
}

/// Isotropic Gaussian blobs around class centres drawn uniformly in [0, inter_spread]^dim.
template <class T>
LabeledDataset<T> gen_blobs(int num_classes, std::size_t dim, int samples_per_class, double intra_spread,
                            double inter_spread, std::uint64_t seed) {
    if (num_classes < 1 || dim < 1 || samples_per_class < 1) throw ArgumentError("gen_blobs: counts must be positive");
    if (!(intra_spread >= 0.0) || !(inter_spread > 0.0)) throw ArgumentError("gen_blobs: spreads must be positive");
    Rng rng(stream_seed(seed, Stream::data));
    std::vector<double> centers(static_cast<std::size_t>(num_classes) * dim);
    for (auto& c : centers) c = rng.uniform(0.0, inter_spread);
    const std::size_t n = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(samples_per_class);
    std::vector<T> x(n * dim);
    std::vector<int> labels(n);
    std::size_t i = 0;
    for (int c = 0; c < num_classes; ++c)
        for (int s = 0; s < samples_per_class; ++s, ++i) {
            labels[i] = c;
            for (std::size_t k = 0; k < dim; ++k)
                x[i * dim + k] = static_cast<T>(centers[static_cast<std::size_t>(c) * dim + k] + intra_spread * rng.normal());
        }
    return make_dataset(Tensor<T>::from({n, dim}, std::move(x)), std::move(labels), num_classes);
}

/// Subset of the given classes, relabelled 0..k-1 in the listed order.
template <class T>
LabeledDataset<T> select_classes(const LabeledDataset<T>& ds, const std::vector<int>& classes) {
    std::vector<std::size_t> idx;
    std::vector<int> labels;
    for (std::size_t k = 0; k < classes.size(); ++k)
        for (auto i : ds.class_index.at(static_cast<std::size_t>(classes[k]))) {
            idx.push_back(i);
            labels.push_back(static_cast<int>(k));
        }
    if (idx.empty()) throw ArgumentError("select_classes: empty selection");
    return make_dataset(gather_rows(ds.samples, idx), std::move(labels), static_cast<int>(classes.size()));
}

template <class T>
struct Splits {
    LabeledDataset<T> train, val, test;
    std::vector<int> train_classes, val_classes, test_classes;  // original ids
};

/// Partitions classes (not samples) by a seeded shuffle. Counts follow the
/// largest-remainder rule.
template <class T>
Splits<T> split_by_class(const LabeledDataset<T>& ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
    double total = 0;
    for (double f : fractions) {
        if (!(f >= 0)) throw ArgumentError("split_by_class: negative fraction");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("split_by_class: fractions must sum to 1");
    const int C = ds.class_count;
    std::array<int, 3> counts{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int s = 0; s < 3; ++s) {
        const double exact = fractions[static_cast<std::size_t>(s)] * C;
        counts[static_cast<std::size_t>(s)] = static_cast<int>(std::floor(exact + 1e-9));
        rem[static_cast<std::size_t>(s)] = exact - counts[static_cast<std::size_t>(s)];
        assigned += counts[static_cast<std::size_t>(s)];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)]; });
    for (int k = 0; assigned < C; ++k, ++assigned) ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(k % 3)])];
    for (int c : counts)
        if (c < 1) throw ArgumentError("split_by_class: " + std::to_string(C) + " classes are too few for the fractions");

    std::vector<int> classes(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) classes[static_cast<std::size_t>(c)] = c;
    Rng rng(stream_seed(seed, Stream::split));
    rng.shuffle(classes);
    Splits<T> out;
    auto take = [&](int from, int count) {
        std::vector<int> v(classes.begin() + from, classes.begin() + from + count);
        std::sort(v.begin(), v.end());
        return v;
    };
    out.train_classes = take(0, counts[0]);
    out.val_classes = take(counts[0], counts[1]);
    out.test_classes = take(counts[0] + counts[1], counts[2]);
    out.train = select_classes(ds, out.train_classes);
    out.val = select_classes(ds, out.val_classes);
    out.test = select_classes(ds, out.test_classes);
    return out;
}

/// Symmetric label noise: round(ratio * n) samples, chosen without replacement,
/// get a uniformly drawn different class.
template <class T>
LabeledDataset<T> inject_label_noise(const LabeledDataset<T>& ds, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ArgumentError("inject_label_noise: ratio must lie in [0, 1]");
    if (ratio == 0.0) return ds;
    if (ds.class_count < 2) throw ArgumentError("inject_label_noise: need at least 2 classes");
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ds.size())));
    Rng rng(stream_seed(seed, Stream::noise));
    auto idx = rng.sample_without_replacement(ds.size(), count);
    LabeledDataset<T> out = ds;
    for (auto i : idx) {
        const int old = out.labels[i];
        int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.class_count - 1)));
        if (r >= old) ++r;
        out.labels[i] = r;
    }
    out.reindex();
    return out;
}

template <class T>
struct Episode {
    int way = 0;
    int shot = 0;
    int query_count = 0;
    Tensor<T> support;
    std::vector<int> support_labels;
    Tensor<T> query;
    std::vector<int> query_labels;
    std::vector<int> classes;  // dataset class for each episode label
    std::vector<std::size_t> support_index, query_index;
};

namespace detail {

template <class T>
Episode<T> sample_episode_with(Rng& rng, const LabeledDataset<T>& ds, int way, int shot, int query_count) {
    if (way < 1 || shot < 1 || query_count < 0) throw ArgumentError("sample_episode: way and shot must be positive");
    const std::size_t need = static_cast<std::size_t>(shot + query_count);
    std::vector<int> eligible;
    for (int c = 0; c < ds.class_count; ++c)
        if (ds.class_index[static_cast<std::size_t>(c)].size() >= need) eligible.push_back(c);
    if (eligible.size() < static_cast<std::size_t>(way))
        throw ArgumentError("sample_episode: only " + std::to_string(eligible.size()) + " classes hold " +
                            std::to_string(need) + " samples, need " + std::to_string(way));
    Episode<T> ep;
    ep.way = way;
    ep.shot = shot;
    ep.query_count = query_count;
    const auto picks = rng.sample_without_replacement(eligible.size(), static_cast<std::size_t>(way));
    for (int k = 0; k < way; ++k) {
        const int cls = eligible[picks[static_cast<std::size_t>(k)]];
        ep.classes.push_back(cls);
        const auto& members = ds.class_index[static_cast<std::size_t>(cls)];
        const auto chosen = rng.sample_without_replacement(members.size(), need);
        for (std::size_t j = 0; j < need; ++j) {
            if (j < static_cast<std::size_t>(shot)) {
                ep.support_index.push_back(members[chosen[j]]);
                ep.support_labels.push_back(k);
            } else {
                ep.query_index.push_back(members[chosen[j]]);
                ep.query_labels.push_back(k);
            }
        }
    }
    ep.support = gather_rows(ds.samples, ep.support_index);
    if (!ep.query_index.empty()) ep.query = gather_rows(ds.samples, ep.query_index);
    return ep;
}

}  // namespace detail

/// way classes, then shot + query_count distinct samples per class. Episode labels
/// follow the order in which classes were drawn.
template <class T>
Episode<T> sample_episode(const LabeledDataset<T>& ds, int way, int shot, int query_count, std::uint64_t seed) {
    Rng rng(seed);
    return detail::sample_episode_with(rng, ds, way, shot, query_count);
}

/// As sample_episode with way drawn uniformly from [way_min, way_max].
template <class T>
Episode<T> sample_heterogeneous_episode(const LabeledDataset<T>& ds, int way_min, int way_max, int shot,
                                        int query_count, std::uint64_t seed) {
    if (way_min < 1 || way_min > way_max || way_max > ds.class_count)
        throw ArgumentError("sample_heterogeneous_episode: bad way range [" + std::to_string(way_min) + "," +
                            std::to_string(way_max) + "] for " + std::to_string(ds.class_count) + " classes");
    Rng rng(seed);
    int way = way_min;
    if (way_max > way_min) way += static_cast<int>(rng.below(static_cast<std::uint64_t>(way_max - way_min + 1)));
    return detail::sample_episode_with(rng, ds, way, shot, query_count);
}

template <class T>
struct TaskBatch {
    Tensor<T> inputs;
    std::vector<std::size_t> source_indices;
};

template <class T>
TaskBatch<T> sample_unlabeled_batch(const LabeledDataset<T>& ds, std::size_t size, std::uint64_t seed) {
    if (size == 0 || size > ds.size())
        throw ArgumentError("sample_unlabeled_batch: size " + std::to_string(size) + " for " + std::to_string(ds.size()) +
                            " samples");
    Rng rng(seed);
    TaskBatch<T> b;
    b.source_indices = rng.sample_without_replacement(ds.size(), size);
    b.inputs = gather_rows(ds.samples, b.source_indices);
    return b;
}

// ---- loaders ------------------------------------------------------------------

namespace detail {

struct Pgm {
    std::size_t width = 0, height = 0;
    std::vector<unsigned char> pixels;
};

inline Pgm parse_pgm(const std::string& bytes, const std::string& path) {
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&]() -> std::size_t {
        skip_ws();
        std::size_t v = 0;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
        if (pos == start) throw FormatError("'" + path + "': malformed PGM header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("'" + path + "': not a binary PGM (P5)");
    pos = 2;
    Pgm p;
    p.width = number();
    p.height = number();
    const auto maxval = number();
    if (maxval == 0 || maxval > 255) throw FormatError("'" + path + "': only 8-bit PGM is supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw FormatError("'" + path + "': malformed PGM header");
    ++pos;
    const std::size_t count = p.width * p.height;
    if (p.width == 0 || p.height == 0 || bytes.size() - pos < count) throw FormatError("'" + path + "': truncated PGM");
    p.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + count));
    return p;
}

}  // namespace detail

/// root/<class>/<file>.pgm, classes in lexicographic directory order, files in
/// lexicographic order, pixels scaled to [0, 1]. Samples are 1 x h x w.
template <class T>
LabeledDataset<T> load_image_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("image dataset: '" + root.string() + "' is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw FormatError("image dataset: no class directories under '" + root.string() + "'");
    std::vector<T> values;
    std::vector<int> labels;
    std::size_t h = 0, w = 0;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[c]))
            if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw FormatError("image dataset: class directory '" + class_dirs[c].string() + "' holds no .pgm images");
        for (const auto& f : files) {
            std::string bytes;
            try {
                bytes = io::read_file(f);
            } catch (const IoError&) {
                throw IoError("image dataset: cannot read '" + f.string() + "'");
            }
            auto img = detail::parse_pgm(bytes, f.string());
            if (h == 0) {
                h = img.height;
                w = img.width;
            } else if (img.height != h || img.width != w) {
                throw FormatError("image dataset: '" + f.string() + "' is " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + ", expected " + std::to_string(w) + "x" + std::to_string(h));
            }
            for (auto px : img.pixels) values.push_back(static_cast<T>(px) / T(255));
            labels.push_back(static_cast<int>(c));
        }
    }
    const std::size_t n = labels.size();
    return make_dataset(Tensor<T>::from({n, 1, h, w}, std::move(values)), std::move(labels), static_cast<int>(class_dirs.size()));
}

/// dir/data.tsr (n x features) with dir/labels.csv ("index,label" header).
template <class T>
LabeledDataset<T> load_tensor_dataset(const std::filesystem::path& dir) {
    auto samples = load_tsr<T>(dir / "data.tsr");
    std::ifstream in(dir / "labels.csv");
    if (!in) throw IoError("tensor dataset: cannot open '" + (dir / "labels.csv").string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != "index,label")
        throw FormatError("tensor dataset: labels.csv must start with 'index,label'");
    std::vector<int> labels(samples.dim(0), -1);
    int max_label = -1;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::size_t idx;
        char comma;
        int lab;
        if (!(ls >> idx >> comma >> lab) || comma != ',' || idx >= labels.size() || lab < 0)
            throw FormatError("tensor dataset: bad labels.csv line " + std::to_string(lineno));
        labels[idx] = lab;
        max_label = std::max(max_label, lab);
    }
    for (int l : labels)
        if (l < 0) throw FormatError("tensor dataset: labels.csv does not cover every sample");
    return make_dataset(std::move(samples), std::move(labels), max_label + 1);
}

}  // namespace dhm
