#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dhm/tensor.hpp"

namespace dhm {

enum class Role { body, head };

/// Ordered, uniquely named parameter tensors. Order is insertion order and is the
/// order used by checkpoints and gradient maps.
template <class T>
class ParamGroup {
public:
    using Entry = std::pair<std::string, Tensor<T>>;

    ParamGroup() = default;
    explicit ParamGroup(Role role) : role_(role) {}

    Role role() const noexcept { return role_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    void add(std::string name, Tensor<T> t) {
        if (contains(name)) throw ContractError("parameter group: duplicate name '" + name + "'");
        entries_.emplace_back(std::move(name), std::move(t));
    }

    bool contains(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.first == name) return true;
        return false;
    }

    const Tensor<T>& at(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.first == name) return e.second;
        throw ContractError("parameter group: no parameter '" + name + "'");
    }

    const Tensor<T>& operator[](std::size_t i) const { return entries_[i].second; }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.second);
        return out;
    }

    /// Same names, new tensors (in order).
    ParamGroup with_tensors(const std::vector<Tensor<T>>& ts) const {
        if (ts.size() != entries_.size()) throw ShapeError("parameter group: tensor count mismatch");
        ParamGroup out(role_);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (ts[i].dims() != entries_[i].second.dims())
                throw ShapeError("parameter group: shape mismatch for '" + entries_[i].first + "'");
            out.entries_.emplace_back(entries_[i].first, ts[i]);
        }
        return out;
    }

    /// Every tensor replaced by a fresh tape leaf.
    ParamGroup leaves() const {
        ParamGroup out(role_);
        for (const auto& e : entries_) out.entries_.emplace_back(e.first, e.second.leaf());
        return out;
    }

    ParamGroup detached() const {
        ParamGroup out(role_);
        for (const auto& e : entries_) out.entries_.emplace_back(e.first, e.second.detach());
        return out;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    bool same_values(const ParamGroup& o) const {
        if (o.size() != size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (entries_[i].first != o.entries_[i].first || !entries_[i].second.same_values(o.entries_[i].second))
                return false;
        return true;
    }

private:
    Role role_ = Role::body;
    std::vector<Entry> entries_;
};

/// Gradients keyed by parameter name, in parameter order.
template <class T>
struct GradMap {
    std::vector<std::pair<std::string, Tensor<T>>> entries;

    std::size_t size() const noexcept { return entries.size(); }

    const Tensor<T>& at(const std::string& name) const {
        for (const auto& e : entries)
            if (e.first == name) return e.second;
        throw ContractError("gradient map: no entry '" + name + "'");
    }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& e : entries) out.push_back(e.second);
        return out;
    }

    static GradMap zeros_like(const ParamGroup<T>& p) {
        GradMap g;
        for (const auto& [name, t] : p.entries()) g.entries.emplace_back(name, Tensor<T>::zeros(t.dims()));
        return g;
    }
};

/// Reverse-mode gradients of a scalar loss with respect to every parameter of the
/// listed groups, concatenated in group order.
template <class T>
GradMap<T> backward(const Tensor<T>& loss, const std::vector<const ParamGroup<T>*>& wrt, bool create_graph = false) {
    std::vector<Tensor<T>> flat;
    std::vector<std::string> names;
    for (const auto* g : wrt)
        for (const auto& [name, t] : g->entries()) {
            flat.push_back(t);
            names.push_back(name);
        }
    auto gs = grad(loss, flat, create_graph);
    GradMap<T> out;
    for (std::size_t i = 0; i < gs.size(); ++i) out.entries.emplace_back(names[i], gs[i]);
    return out;
}

/// theta - lr * g for every parameter. Recorded on the tape when it is active, so
/// an update can sit inside a differentiated computation.
template <class T>
ParamGroup<T> sgd_update(const ParamGroup<T>& params, const GradMap<T>& grads, T lr) {
    if (grads.size() != params.size())
        throw ShapeError("sgd_update: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params.entries()[i];
        const auto& [gname, g] = grads.entries[i];
        if (gname != name) throw ShapeError("sgd_update: gradient '" + gname + "' does not match '" + name + "'");
        if (g.dims() != p.dims()) throw ShapeError("sgd_update: shape mismatch for '" + name + "'");
        out.push_back(lr == T(0) ? p : sub(p, scale(g, lr)));
    }
    return params.with_tensors(out);
}

}  // namespace dhm
