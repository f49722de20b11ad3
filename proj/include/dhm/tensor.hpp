#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every operation that consumes a tensor requiring gradients records a node whose
// backward rule is itself written with recorded operations. Differentiating with
// create_graph=true therefore yields gradients that can be differentiated again,
// which is what exact second-order meta-gradients need.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dhm/error.hpp"

namespace dhm {

using Dims = std::vector<std::size_t>;

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << ']';
    return os.str();
}

inline std::size_t dims_numel(const Dims& d) {
    std::size_t n = 1;
    for (auto e : d) n *= e;
    return n;
}

template <class T>
class Tensor;

namespace detail {

inline thread_local bool grad_enabled = true;

template <class T>
struct Node {
    Dims dims;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<Tensor<T>> parents;
    // Maps the gradient of this node to one gradient per parent.
    std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward;
};

}  // namespace detail

/// Scoped switch for tape recording on the current thread.
class GradMode {
public:
    explicit GradMode(bool enabled) : prev_(detail::grad_enabled) { detail::grad_enabled = enabled; }
    ~GradMode() { detail::grad_enabled = prev_; }
    GradMode(const GradMode&) = delete;
    GradMode& operator=(const GradMode&) = delete;
    static bool enabled() { return detail::grad_enabled; }

private:
    bool prev_;
};

struct NoGrad : GradMode {
    NoGrad() : GradMode(false) {}
};

template <class T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

public:
    using value_type = T;
    using Backward = std::function<std::vector<Tensor>(const Tensor&)>;

    Tensor() = default;

    /// All extents must be positive.
    static Tensor full(Dims dims, T fill) {
        check_dims(dims);
        auto n = std::make_shared<detail::Node<T>>();
        n->data.assign(dims_numel(dims), fill);
        n->dims = std::move(dims);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Dims dims) { return full(std::move(dims), T(0)); }

    static Tensor from(Dims dims, std::vector<T> values) {
        check_dims(dims);
        if (dims_numel(dims) != values.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill " + dims_str(dims));
        auto n = std::make_shared<detail::Node<T>>();
        n->dims = std::move(dims);
        n->data = std::move(values);
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    /// Result of an operation: recorded on the tape when recording is enabled and
    /// any parent requires gradients.
    static Tensor make(Dims dims, std::vector<T> values, std::vector<Tensor> parents, Backward bw) {
        auto n = std::make_shared<detail::Node<T>>();
        n->dims = std::move(dims);
        n->data = std::move(values);
        if (detail::grad_enabled) {
            bool any = false;
            for (const auto& p : parents) any = any || p.requires_grad();
            if (any) {
                n->requires_grad = true;
                n->parents = std::move(parents);
                n->backward = std::move(bw);
            }
        }
        return Tensor(std::move(n));
    }

    bool valid() const noexcept { return node_ != nullptr; }
    const Dims& dims() const { return node_->dims; }
    std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
    std::size_t ndim() const { return node_->dims.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + dims_str(dims()));
        return node_->data[0];
    }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    bool is_leaf() const noexcept { return node_ && !node_->backward; }

    /// Fresh leaf holding a copy of the values, tracked by the tape.
    Tensor leaf() const {
        auto n = std::make_shared<detail::Node<T>>();
        n->dims = node_->dims;
        n->data = node_->data;
        n->requires_grad = true;
        return Tensor(std::move(n));
    }

    /// Copy of the values, cut from the tape.
    Tensor detach() const { return from(node_->dims, node_->data); }

    const detail::Node<T>* node() const noexcept { return node_.get(); }

    bool same_values(const Tensor& o) const { return dims() == o.dims() && values() == o.values(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

    static void check_dims(const Dims& dims) {
        if (dims.empty()) throw ShapeError("tensor: empty extent list");
        for (auto e : dims)
            if (e == 0) throw ShapeError("tensor: zero extent in " + dims_str(dims));
    }

    std::shared_ptr<detail::Node<T>> node_;
};

/// Fills a new tensor; extents must be positive.
template <class T>
Tensor<T> tensor_new(const Dims& dims, T fill) {
    return Tensor<T>::full(dims, fill);
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

namespace detail {

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.dims() != b.dims())
        throw ShapeError(std::string(op) + ": shapes " + dims_str(a.dims()) + " and " + dims_str(b.dims()) + " differ");
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t r, const char* op) {
    if (a.ndim() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + dims_str(a.dims()));
}

}  // namespace detail

// ---- elementwise -------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor<T>::make(a.dims(), std::move(out), {a, b}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{g, g};
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c);

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor<T>::make(a.dims(), std::move(out), {a, b}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{g, scale(g, T(-1))};
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor<T>::make(a.dims(), std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, b), mul(g, a)};
    });
}

/// Multiplication by a constant (not differentiated with respect to c).
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
    return Tensor<T>::make(a.dims(), std::move(out), {a}, [c](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{scale(g, c)};
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a);

/// Scalar tensor broadcast to the given shape.
template <class T>
Tensor<T> expand(const Tensor<T>& s, const Dims& dims) {
    if (s.numel() != 1) throw ShapeError("expand: source must hold one value");
    std::vector<T> out(dims_numel(dims), s[0]);
    return Tensor<T>::make(dims, std::move(out), {s}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{sum(g)};
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    const Dims src = a.dims();
    return Tensor<T>::make({1}, {acc}, {a}, [src](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{expand(g, src)};
    });
}

/// a multiplied by a one-element tensor s; differentiable in both.
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar: multiplier must hold one value");
    return mul(a, expand(s, a.dims()));
}

/// Elementwise max(0, x); the subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    std::vector<T> mask(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool on = x[i] > T(0);
        out[i] = on ? x[i] : T(0);
        mask[i] = on ? T(1) : T(0);
    }
    auto m = Tensor<T>::from(x.dims(), std::move(mask));
    return Tensor<T>::make(x.dims(), std::move(out), {x}, [m](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, m)};
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Dims& dims) {
    if (dims_numel(dims) != a.numel())
        throw ShapeError("reshape: " + dims_str(a.dims()) + " to " + dims_str(dims));
    const Dims src = a.dims();
    return Tensor<T>::make(dims, a.values(), {a}, [src](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{reshape(g, src)};
    });
}

// ---- matrices ---------------------------------------------------------------

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return Tensor<T>::make({c, r}, std::move(out), {a}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{transpose(g)};
    });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimensions " + dims_str(a.dims()) + " x " + dims_str(b.dims()));
    std::vector<T> out(n * m, T(0));
    const T* A = a.data().data();
    const T* B = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        T* row = out.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            if (av == T(0)) continue;
            const T* brow = B + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
    return Tensor<T>::make({n, m}, std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{matmul(g, transpose(b)), matmul(transpose(a), g)};
    });
}

template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t n);

/// Column sums of an n x d matrix, giving a length-d vector.
template <class T>
Tensor<T> sum_rows(const Tensor<T>& x) {
    detail::require_rank(x, 2, "sum_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<T> out(d, T(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
    return Tensor<T>::make({d}, std::move(out), {x}, [n](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{broadcast_rows(g, n)};
    });
}

/// Stacks a length-d vector into n identical rows.
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t n) {
    detail::require_rank(v, 1, "broadcast_rows");
    const std::size_t d = v.dim(0);
    std::vector<T> out(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy(v.data().begin(), v.data().end(), out.begin() + i * d);
    return Tensor<T>::make({n, d}, std::move(out), {v}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{sum_rows(g)};
    });
}

template <class T>
Tensor<T> broadcast_cols(const Tensor<T>& v, std::size_t c);

/// Row sums of an n x c matrix, giving a length-n vector.
template <class T>
Tensor<T> row_sums(const Tensor<T>& x) {
    detail::require_rank(x, 2, "row_sums");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
    return Tensor<T>::make({n}, std::move(out), {x}, [c](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{broadcast_cols(g, c)};
    });
}

template <class T>
Tensor<T> broadcast_cols(const Tensor<T>& v, std::size_t c) {
    detail::require_rank(v, 1, "broadcast_cols");
    const std::size_t n = v.dim(0);
    std::vector<T> out(n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v[i];
    return Tensor<T>::make({n, c}, std::move(out), {v}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{row_sums(g)};
    });
}

template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    detail::require_rank(x, 2, "add_bias");
    detail::require_rank(b, 1, "add_bias");
    if (b.dim(0) != x.dim(1))
        throw ShapeError("add_bias: bias " + dims_str(b.dims()) + " against " + dims_str(x.dims()));
    return add(x, broadcast_rows(b, x.dim(0)));
}

/// y = xW + b for x of shape n x d_in, W of shape d_in x d_out, b of length d_out.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(W, 2, "linear");
    detail::require_rank(b, 1, "linear");
    if (x.dim(1) != W.dim(0) || W.dim(1) != b.dim(0))
        throw ShapeError("linear: x " + dims_str(x.dims()) + ", W " + dims_str(W.dims()) + ", b " + dims_str(b.dims()));
    auto y = add_bias(matmul(x, W), b);
    check_finite(y, "linear");
    return y;
}

/// Row-wise softmax with max shift.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    detail::require_rank(x, 2, "softmax");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        T mx = x[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
        T z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(x[i * c + j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    return Tensor<T>::make(x.dims(), std::move(out), {x}, [x](const Tensor<T>& g) {
        auto s = softmax(x);
        auto inner = row_sums(mul(g, s));
        return std::vector<Tensor<T>>{mul(s, sub(g, broadcast_cols(inner, s.dim(1))))};
    });
}

/// Mean over rows of -log softmax(logits)[target].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (targets.size() != n)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," +
                             std::to_string(c) + ")");
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data().data() + i * c;
        T mx = *std::max_element(row, row + c);
        T z = 0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        total += (std::log(z) + mx) - row[targets[i]];
    }
    const T loss = total / static_cast<T>(n);
    if (!std::isfinite(loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    std::vector<T> onehot(n * c, T(0));
    for (std::size_t i = 0; i < n; ++i) onehot[i * c + targets[i]] = T(1);
    auto target_t = Tensor<T>::from(logits.dims(), std::move(onehot));
    return Tensor<T>::make({1}, {loss}, {logits}, [logits, target_t, n](const Tensor<T>& g) {
        auto diff = scale(sub(softmax(logits), target_t), T(1) / static_cast<T>(n));
        return std::vector<Tensor<T>>{mul_scalar(diff, g)};
    });
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    return softmax_cross_entropy(logits, std::span<const int>(targets));
}

// ---- convolution ------------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride) {
    return (in - k) / stride + 1;
}

template <class T>
Tensor<T> col2im(const Tensor<T>& cols, const Dims& xdims, std::size_t k, std::size_t stride);

/// Patches of an n x c x h x w input as rows of an (n*oh*ow) x (c*k*k) matrix.
template <class T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t k, std::size_t stride) {
    detail::require_rank(x, 4, "im2col");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k > h || k > w) throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than input " + dims_str(x.dims()));
    const std::size_t oh = conv_out_extent(h, k, stride), ow = conv_out_extent(w, k, stride);
    const std::size_t cols = c * k * k;
    std::vector<T> out(n * oh * ow * cols);
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T* row = out.data() + ((ni * oh + oy) * ow + ox) * cols;
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            row[(ci * k + ky) * k + kx] =
                                x[((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx];
            }
    const Dims xd = x.dims();
    return Tensor<T>::make({n * oh * ow, cols}, std::move(out), {x}, [xd, k, stride](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{col2im(g, xd, k, stride)};
    });
}

/// Adjoint of im2col: scatter-adds patch rows back into an input-shaped tensor.
template <class T>
Tensor<T> col2im(const Tensor<T>& colsT, const Dims& xdims, std::size_t k, std::size_t stride) {
    const std::size_t n = xdims[0], c = xdims[1], h = xdims[2], w = xdims[3];
    const std::size_t oh = conv_out_extent(h, k, stride), ow = conv_out_extent(w, k, stride);
    const std::size_t cols = c * k * k;
    std::vector<T> out(n * c * h * w, T(0));
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* row = colsT.data().data() + ((ni * oh + oy) * ow + ox) * cols;
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            out[((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx] +=
                                row[(ci * k + ky) * k + kx];
            }
    return Tensor<T>::make(xdims, std::move(out), {colsT}, [k, stride](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{im2col(g, k, stride)};
    });
}

template <class T>
Tensor<T> nchw_to_rows(const Tensor<T>& x);

/// (n*h*w) x c rows back to an n x c x h x w tensor.
template <class T>
Tensor<T> rows_to_nchw(const Tensor<T>& y, std::size_t n, std::size_t h, std::size_t w) {
    detail::require_rank(y, 2, "rows_to_nchw");
    const std::size_t c = y.dim(1);
    if (y.dim(0) != n * h * w) throw ShapeError("rows_to_nchw: row count mismatch");
    std::vector<T> out(y.numel());
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t p = 0; p < h * w; ++p) out[(ni * c + ci) * h * w + p] = y[(ni * h * w + p) * c + ci];
    return Tensor<T>::make({n, c, h, w}, std::move(out), {y}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{nchw_to_rows(g)};
    });
}

/// n x c x h x w to (n*h*w) x c, so that spatial positions become rows.
template <class T>
Tensor<T> nchw_to_rows(const Tensor<T>& x) {
    detail::require_rank(x, 4, "nchw_to_rows");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t p = 0; p < h * w; ++p) out[(ni * h * w + p) * c + ci] = x[(ni * c + ci) * h * w + p];
    return Tensor<T>::make({n * h * w, c}, std::move(out), {x}, [n, h, w](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{rows_to_nchw(g, n, h, w)};
    });
}

/// Valid (unpadded) cross-correlation of x (n x c x h x w) with K (f x c x k x k).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& K, std::size_t stride) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(K, 4, "conv2d");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t f = K.dim(0), k = K.dim(2);
    if (K.dim(1) != x.dim(1) || K.dim(3) != k)
        throw ShapeError("conv2d: kernel " + dims_str(K.dims()) + " incompatible with input " + dims_str(x.dims()));
    auto cols = im2col(x, k, stride);
    auto kf = reshape(K, {f, K.numel() / f});
    auto y = matmul(cols, transpose(kf));
    auto out = rows_to_nchw(y, x.dim(0), conv_out_extent(x.dim(2), k, stride), conv_out_extent(x.dim(3), k, stride));
    check_finite(out, "conv2d");
    return out;
}

// ---- reverse pass -----------------------------------------------------------

/// Gradients of a scalar loss with respect to each tensor in wrt. Tensors the loss
/// does not reach get zeros. With create_graph the returned gradients are
/// themselves recorded and can be differentiated again.
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss, const std::vector<Tensor<T>>& wrt, bool create_graph = false) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + dims_str(loss.dims()));
    if (!loss.requires_grad()) throw TapeError("backward: loss is not attached to an active tape");

    using NodeT = detail::Node<T>;
    // Iterative post-order DFS: deterministic topological order.
    std::vector<const NodeT*> order;
    std::unordered_map<const NodeT*, std::size_t> state;  // 1 = visiting, 2 = done
    std::vector<std::pair<const NodeT*, std::size_t>> stack{{loss.node(), 0}};
    state[loss.node()] = 1;
    while (!stack.empty()) {
        auto& [nd, next] = stack.back();
        if (next < nd->parents.size()) {
            const NodeT* p = nd->parents[next++].node();
            if (p->requires_grad && !state.count(p)) {
                state[p] = 1;
                stack.emplace_back(p, 0);
            }
        } else {
            state[nd] = 2;
            order.push_back(nd);
            stack.pop_back();
        }
    }

    // Only nodes with a path down to some wrt tensor need a gradient.
    std::unordered_set<const NodeT*> needed;
    for (const auto& w : wrt) needed.insert(w.node());
    for (const NodeT* nd : order)  // parents precede children
        for (const auto& p : nd->parents)
            if (needed.count(p.node())) {
                needed.insert(nd);
                break;
            }

    GradMode mode(create_graph);
    std::unordered_map<const NodeT*, Tensor<T>> grads;
    grads.emplace(loss.node(), Tensor<T>::full(loss.dims(), T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const NodeT* nd = *it;
        if (!nd->backward || !needed.count(nd)) continue;
        auto git = grads.find(nd);
        if (git == grads.end()) continue;
        auto pgrads = nd->backward(git->second);
        for (std::size_t i = 0; i < nd->parents.size(); ++i) {
            const NodeT* p = nd->parents[i].node();
            if (!p->requires_grad || !needed.count(p)) continue;
            auto [pos, inserted] = grads.try_emplace(p, pgrads[i]);
            if (!inserted) pos->second = add(pos->second, pgrads[i]);
        }
    }

    std::vector<Tensor<T>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto git = grads.find(w.node());
        out.push_back(git != grads.end() ? git->second : Tensor<T>::zeros(w.dims()));
    }
    return out;
}

}  // namespace dhm
