#pragma once

// Binary encodings shared by the .tsr tensor files and the checkpoint format.
// All integers and payloads are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dhm/tensor.hpp"

namespace dhm {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
    return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

namespace io {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

/// Appends values as little-endian IEEE-754 of width sizeof(T).
template <class T>
void put_values(std::string& out, std::span<const T> vals) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : vals) {
        const U bits = std::bit_cast<U>(v);
        if constexpr (sizeof(T) == 4)
            put_u32(out, bits);
        else
            put_u64(out, bits);
    }
}

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
public:
    Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    std::size_t remaining() const { return buf_.size() - pos_; }

    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError(what_ + ": truncated data");
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::uint64_t uint(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }

    /// Reads count values stored with dtype `stored`, converting to T.
    template <class T>
    std::vector<T> values(DType stored, std::size_t count) {
        const std::size_t width = stored == DType::f32 ? 4 : 8;
        if (count > remaining() / width) throw FormatError(what_ + ": truncated payload");
        std::vector<T> out(count);
        for (std::size_t i = 0; i < count; ++i) {
            if (stored == DType::f32)
                out[i] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(uint(4))));
            else
                out[i] = static_cast<T>(std::bit_cast<double>(uint(8)));
        }
        return out;
    }

private:
    const std::string& buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + p.string() + "'");
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace io

/// .tsr layout: "TSR1", dtype byte (1 = f32, 2 = f64), ndim byte, two zero bytes,
/// ndim u32 extents, row-major payload.
template <class T>
std::string encode_tsr(const Tensor<T>& t) {
    if (t.ndim() > 255) throw ShapeError("tsr: too many dimensions");
    std::string out = "TSR1";
    io::put_u8(out, static_cast<std::uint8_t>(dtype_of<T>()));
    io::put_u8(out, static_cast<std::uint8_t>(t.ndim()));
    io::put_u8(out, 0);
    io::put_u8(out, 0);
    for (auto e : t.dims()) io::put_u32(out, static_cast<std::uint32_t>(e));
    io::put_values<T>(out, t.data());
    return out;
}

/// Decodes either stored dtype into T.
template <class T>
Tensor<T> decode_tsr(const std::string& bytes, const std::string& what = "tsr") {
    io::Reader r(bytes, what);
    if (r.bytes(4) != "TSR1") throw FormatError(what + ": bad magic");
    const auto dt = r.u8();
    if (dt != 1 && dt != 2) throw FormatError(what + ": unknown dtype " + std::to_string(dt));
    const auto ndim = r.u8();
    if (r.u8() != 0 || r.u8() != 0) throw FormatError(what + ": reserved bytes must be zero");
    if (ndim == 0) throw FormatError(what + ": zero dimensions");
    Dims dims(ndim);
    for (auto& d : dims) {
        d = r.u32();
        if (d == 0) throw FormatError(what + ": zero extent");
    }
    auto vals = r.values<T>(static_cast<DType>(dt), dims_numel(dims));
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
    return Tensor<T>::from(std::move(dims), std::move(vals));
}

template <class T>
void save_tsr(const Tensor<T>& t, const std::filesystem::path& p) {
    io::write_file(p, encode_tsr(t));
}

template <class T>
Tensor<T> load_tsr(const std::filesystem::path& p) {
    return decode_tsr<T>(io::read_file(p), p.string());
}

}  // namespace dhm
