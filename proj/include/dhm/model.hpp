#pragma once

// Backbones (the shared body), classification heads, and the checkpoint format.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dhm/io.hpp"
#include "dhm/params.hpp"
#include "dhm/rng.hpp"

namespace dhm {

enum class Arch : std::uint32_t { mlp = 1, conv4 = 2 };

/// Architecture of the body. The MLP puts ReLU between layers and leaves the embedding linear; conv4 stacks
/// four unpadded 3x3 ReLU convolutions and flattens the last feature map.
struct ArchSpec {
    Arch arch = Arch::mlp;
    std::vector<std::size_t> mlp_dims;  // input, hidden..., embed
    std::size_t channels = 32;
    std::size_t in_c = 1, in_h = 28, in_w = 28;

    static constexpr std::size_t kernel = 3;
    static constexpr int conv_layers = 4;

    static ArchSpec mlp(std::vector<std::size_t> dims) {
        ArchSpec a;
        a.arch = Arch::mlp;
        a.mlp_dims = std::move(dims);
        a.validate();
        return a;
    }

    static ArchSpec conv4(std::size_t channels, std::size_t c, std::size_t h, std::size_t w) {
        ArchSpec a;
        a.arch = Arch::conv4;
        a.channels = channels;
        a.in_c = c;
        a.in_h = h;
        a.in_w = w;
        a.validate();
        return a;
    }

    /// Stride 2 wherever the remaining layers still fit, stride 1 otherwise.
    std::vector<std::size_t> conv_strides() const {
        std::vector<std::size_t> s;
        std::size_t h = in_h, w = in_w;
        for (int l = 0; l < conv_layers; ++l) {
            const std::size_t remaining = static_cast<std::size_t>(conv_layers - 1 - l);
            const std::size_t need = 1 + (kernel - 1) * remaining;
            std::size_t stride = 2;
            if (h < kernel || w < kernel) throw ShapeError("conv4: input too small");
            if (conv_out_extent(h, kernel, 2) < need || conv_out_extent(w, kernel, 2) < need) stride = 1;
            h = conv_out_extent(h, kernel, stride);
            w = conv_out_extent(w, kernel, stride);
            s.push_back(stride);
        }
        return s;
    }

    std::pair<std::size_t, std::size_t> conv_output_hw() const {
        std::size_t h = in_h, w = in_w;
        for (auto st : conv_strides()) {
            h = conv_out_extent(h, kernel, st);
            w = conv_out_extent(w, kernel, st);
        }
        return {h, w};
    }

    void validate() const {
        if (arch == Arch::mlp) {
            if (mlp_dims.size() < 2) throw ArgumentError("mlp: need at least input and embedding widths");
            for (auto d : mlp_dims)
                if (d == 0) throw ArgumentError("mlp: zero width");
        } else {
            if (channels == 0 || in_c == 0) throw ArgumentError("conv4: zero channels");
            const std::size_t min_extent = 1 + (kernel - 1) * conv_layers;
            if (in_h < min_extent || in_w < min_extent)
                throw ArgumentError("conv4: input must be at least " + std::to_string(min_extent) + " pixels wide");
        }
    }

    std::size_t embed_dim() const {
        if (arch == Arch::mlp) return mlp_dims.back();
        auto [h, w] = conv_output_hw();
        return channels * h * w;
    }

    Dims sample_dims() const {
        if (arch == Arch::mlp) return {mlp_dims.front()};
        return {in_c, in_h, in_w};
    }

    std::size_t input_size() const { return dims_numel(sample_dims()); }

    std::size_t num_layers() const { return arch == Arch::mlp ? mlp_dims.size() - 1 : conv_layers; }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> n;
        for (std::size_t l = 0; l < num_layers(); ++l) n.push_back("body." + std::to_string(l));
        return n;
    }

    bool operator==(const ArchSpec&) const = default;
};

/// Body parameters with weights uniform in +-1/sqrt(fan_in) and zero biases.
template <class T>
ParamGroup<T> init_body(const ArchSpec& arch, std::uint64_t seed) {
    arch.validate();
    Rng rng(seed);
    ParamGroup<T> body(Role::body);
    auto uniform_tensor = [&](Dims dims, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<T> v(dims_numel(dims));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        return Tensor<T>::from(std::move(dims), std::move(v));
    };
    if (arch.arch == Arch::mlp) {
        for (std::size_t l = 0; l + 1 < arch.mlp_dims.size(); ++l) {
            const auto din = arch.mlp_dims[l], dout = arch.mlp_dims[l + 1];
            body.add("body." + std::to_string(l) + ".weight", uniform_tensor({din, dout}, din));
            body.add("body." + std::to_string(l) + ".bias", Tensor<T>::zeros({dout}));
        }
    } else {
        std::size_t cin = arch.in_c;
        for (int l = 0; l < ArchSpec::conv_layers; ++l) {
            const std::size_t k = ArchSpec::kernel;
            body.add("body." + std::to_string(l) + ".kernel", uniform_tensor({arch.channels, cin, k, k}, cin * k * k));
            cin = arch.channels;
        }
    }
    return body;
}

/// Body forward pass. When layers is non-null it receives each layer's output
/// (convolutional outputs in n x c x h x w form).
template <class T>
Tensor<T> forward_body(const ArchSpec& arch, const ParamGroup<T>& body, const Tensor<T>& x,
                       std::vector<Tensor<T>>* layers = nullptr) {
    const std::size_t n = x.dim(0);
    if (x.numel() != n * arch.input_size())
        throw ShapeError("backbone: input " + dims_str(x.dims()) + " does not match sample shape " +
                         dims_str(arch.sample_dims()));
    if (arch.arch == Arch::mlp) {
        Tensor<T> h = x.ndim() == 2 ? x : reshape(x, {n, arch.input_size()});
        const std::size_t last = arch.mlp_dims.size() - 2;
        for (std::size_t l = 0; l <= last; ++l) {
            const auto s = std::to_string(l);
            h = linear(h, body.at("body." + s + ".weight"), body.at("body." + s + ".bias"));
            if (l < last) h = relu(h);
            if (layers) layers->push_back(h);
        }
        return h;
    }
    Tensor<T> h = x.ndim() == 4 ? x : reshape(x, {n, arch.in_c, arch.in_h, arch.in_w});
    const auto strides = arch.conv_strides();
    for (int l = 0; l < ArchSpec::conv_layers; ++l) {
        h = relu(conv2d(h, body.at("body." + std::to_string(l) + ".kernel"), strides[static_cast<std::size_t>(l)]));
        if (layers) layers->push_back(h);
    }
    return reshape(h, {n, h.numel() / n});
}

/// A fresh linear head embed_dim -> class_count: weights uniform in
/// +-1/sqrt(embed_dim), bias zero.
template <class T>
ParamGroup<T> init_dynamic_head(std::size_t embed_dim, std::size_t class_count, std::uint64_t seed) {
    if (class_count < 2) throw ArgumentError("dynamic head: class_count must be >= 2, got " + std::to_string(class_count));
    if (embed_dim == 0) throw ArgumentError("dynamic head: zero embedding width");
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    std::vector<T> w(embed_dim * class_count);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    ParamGroup<T> head(Role::head);
    head.add("head.weight", Tensor<T>::from({embed_dim, class_count}, std::move(w)));
    head.add("head.bias", Tensor<T>::zeros({class_count}));
    return head;
}

template <class T>
std::size_t head_width(const ParamGroup<T>& head) {
    return head.at("head.bias").dim(0);
}

template <class T>
Tensor<T> head_logits(const ParamGroup<T>& head, const Tensor<T>& emb) {
    return linear(emb, head.at("head.weight"), head.at("head.bias"));
}

template <class T>
Tensor<T> network_logits(const ArchSpec& arch, const ParamGroup<T>& body, const ParamGroup<T>& head, const Tensor<T>& x) {
    return head_logits(head, forward_body(arch, body, x));
}

/// Row-wise argmax, ties to the lowest index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

enum class TrainMode : std::uint32_t { uht = 1, maml = 2, anil = 3, wct = 4, mtl = 5 };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::uht: return "uht";
        case TrainMode::maml: return "maml";
        case TrainMode::anil: return "anil";
        case TrainMode::wct: return "wct";
        case TrainMode::mtl: return "mtl";
    }
    return "?";
}

struct Provenance {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    bool operator==(const Provenance&) const = default;
};

/// A trained body plus any persistent heads, keyed by width. head_is_init marks
/// heads that serve as the adaptation starting point at test time (static-head
/// meta-learning); otherwise evaluation always starts from a fresh head.
template <class T>
struct TrainedModel {
    ArchSpec arch;
    ParamGroup<T> body{Role::body};
    std::map<std::size_t, ParamGroup<T>> heads;
    bool head_is_init = false;
    TrainMode mode = TrainMode::uht;
    Provenance provenance;

    std::size_t embed_dim() const { return arch.embed_dim(); }

    const ParamGroup<T>* head_for(std::size_t width) const {
        auto it = heads.find(width);
        return it == heads.end() ? nullptr : &it->second;
    }

    /// The single persistent head, when exactly one exists.
    const ParamGroup<T>* sole_head() const { return heads.size() == 1 ? &heads.begin()->second : nullptr; }
};

// ---- checkpoints --------------------------------------------------------------
//
// "MLCK", u32 version = 1, u32 parameter count; per parameter: u16 name length,
// UTF-8 name, u8 dtype, u8 ndim, u32 extents, little-endian payload.
// Architecture and provenance travel as a float64 parameter named "__meta__" whose
// entries are 32-bit unsigned integers.

inline constexpr const char* kMetaParam = "__meta__";

namespace detail {

inline std::vector<double> encode_meta(const ArchSpec& a, TrainMode mode, bool head_is_init, const Provenance& p) {
    std::vector<double> m;
    auto u32 = [&](std::uint64_t v) { m.push_back(static_cast<double>(static_cast<std::uint32_t>(v))); };
    u32(1);  // meta layout version
    u32(static_cast<std::uint32_t>(a.arch));
    u32(static_cast<std::uint32_t>(mode));
    u32(head_is_init ? 1 : 0);
    u32(p.config_hash >> 32);
    u32(p.config_hash & 0xffffffffULL);
    u32(p.seed >> 32);
    u32(p.seed & 0xffffffffULL);
    u32(a.channels);
    u32(a.in_c);
    u32(a.in_h);
    u32(a.in_w);
    u32(a.mlp_dims.size());
    for (auto d : a.mlp_dims) u32(d);
    return m;
}

template <class T>
void put_param(std::string& out, const std::string& name, const Tensor<T>& t) {
    if (name.size() > 0xffff) throw CheckpointError("checkpoint: parameter name too long");
    io::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    io::put_u8(out, static_cast<std::uint8_t>(dtype_of<T>()));
    io::put_u8(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto e : t.dims()) io::put_u32(out, static_cast<std::uint32_t>(e));
    io::put_values<T>(out, t.data());
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const TrainedModel<T>& m) {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    for (const auto& e : m.body.entries()) params.push_back(e);
    for (const auto& [width, head] : m.heads)
        for (const auto& [name, t] : head.entries()) params.emplace_back("heads." + std::to_string(width) + "." + name, t);

    std::string out = "MLCK";
    io::put_u32(out, 1);
    io::put_u32(out, static_cast<std::uint32_t>(params.size() + 1));
    const auto meta = detail::encode_meta(m.arch, m.mode, m.head_is_init, m.provenance);
    detail::put_param(out, kMetaParam, Tensor<double>::from({meta.size()}, meta));
    for (const auto& [name, t] : params) detail::put_param(out, name, t);
    return out;
}

template <class T>
TrainedModel<T> decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    try {
        io::Reader r(bytes, what);
        if (r.bytes(4) != "MLCK") throw CheckpointError(what + ": bad magic");
        const auto version = r.u32();
        if (version != 1) throw CheckpointError(what + ": unsupported version " + std::to_string(version));
        const auto count = r.u32();
        TrainedModel<T> m;
        bool have_meta = false;
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto len = r.u16();
            std::string name = r.bytes(len);
            const auto dt = r.u8();
            if (dt != 1 && dt != 2) throw CheckpointError(what + ": bad dtype for '" + name + "'");
            const auto ndim = r.u8();
            if (ndim == 0) throw CheckpointError(what + ": zero rank for '" + name + "'");
            Dims dims(ndim);
            for (auto& d : dims) {
                d = r.u32();
                if (d == 0) throw CheckpointError(what + ": zero extent for '" + name + "'");
            }
            if (name == kMetaParam) {
                auto v = r.values<double>(static_cast<DType>(dt), dims_numel(dims));
                auto u = [&](std::size_t k) {
                    if (k >= v.size()) throw CheckpointError(what + ": short metadata");
                    return static_cast<std::uint64_t>(v[k]);
                };
                if (u(0) != 1) throw CheckpointError(what + ": unknown metadata layout");
                m.arch.arch = static_cast<Arch>(u(1));
                m.mode = static_cast<TrainMode>(u(2));
                m.head_is_init = u(3) != 0;
                m.provenance.config_hash = (u(4) << 32) | u(5);
                m.provenance.seed = (u(6) << 32) | u(7);
                m.arch.channels = u(8);
                m.arch.in_c = u(9);
                m.arch.in_h = u(10);
                m.arch.in_w = u(11);
                const auto nd = u(12);
                m.arch.mlp_dims.clear();
                for (std::uint64_t k = 0; k < nd; ++k) m.arch.mlp_dims.push_back(u(13 + k));
                have_meta = true;
                continue;
            }
            auto t = Tensor<T>::from(dims, r.values<T>(static_cast<DType>(dt), dims_numel(dims)));
            if (name.rfind("heads.", 0) == 0) {
                const auto dot = name.find('.', 6);
                if (dot == std::string::npos) throw CheckpointError(what + ": malformed head name '" + name + "'");
                const auto width = static_cast<std::size_t>(std::stoul(name.substr(6, dot - 6)));
                auto [it, _] = m.heads.try_emplace(width, ParamGroup<T>(Role::head));
                it->second.add(name.substr(dot + 1), t);
            } else {
                m.body.add(name, t);
            }
        }
        if (r.remaining() != 0) throw CheckpointError(what + ": trailing bytes");
        if (!have_meta) throw CheckpointError(what + ": missing architecture metadata");
        m.arch.validate();
        // The stored body must be exactly what the architecture prescribes.
        auto expect = init_body<T>(m.arch, 0);
        if (expect.size() != m.body.size()) throw CheckpointError(what + ": body does not match architecture");
        for (std::size_t i = 0; i < expect.size(); ++i)
            if (expect.entries()[i].first != m.body.entries()[i].first ||
                expect[i].dims() != m.body[i].dims())
                throw CheckpointError(what + ": body parameter '" + m.body.entries()[i].first + "' does not match architecture");
        return m;
    } catch (const CheckpointError&) {
        throw;
    } catch (const Error& e) {
        throw CheckpointError(what + ": " + e.what());
    } catch (const std::exception& e) {
        throw CheckpointError(what + ": " + e.what());
    }
}

template <class T>
void save_checkpoint(const TrainedModel<T>& m, const std::filesystem::path& p) {
    io::write_file(p, encode_checkpoint(m));
}

template <class T>
TrainedModel<T> load_checkpoint(const std::filesystem::path& p) {
    std::string bytes;
    try {
        bytes = io::read_file(p);
    } catch (const IoError&) {
        throw IoError("checkpoint: cannot open '" + p.string() + "'");
    }
    return decode_checkpoint<T>(bytes, p.string());
}

}  // namespace dhm
