#pragma once

#include <string>

#include "dhm/params.hpp"

namespace dhm {

/// Which parameters the inner loop updates: all of them (MAML) or the head only (ANIL).
enum class Scope { body_and_head, head_only };

/// exact differentiates through the inner updates; first_order treats the adapted
/// parameters as constants of the outer gradient.
enum class Order { exact, first_order };

inline const char* to_string(Scope s) { return s == Scope::body_and_head ? "body_and_head" : "head_only"; }
inline const char* to_string(Order o) { return o == Order::exact ? "exact" : "first_order"; }

template <class T>
struct AdaptResult {
    ParamGroup<T> body;  // adapted
    ParamGroup<T> head;  // adapted
    T inner_loss = 0;    // loss before the first update
    T outer_loss = 0;    // loss at the adapted parameters
    GradMap<T> body_grad;  // d outer_loss / d initial body
    GradMap<T> head_grad;  // d outer_loss / d initial head (filled when requested)
};

/// Runs `steps` gradient updates theta <- theta - alpha * grad(inner_loss) on the
/// parameters in scope, evaluates outer_loss at the adapted parameters and returns
/// its gradient with respect to the pre-adaptation body (and head, when asked).
///
/// inner_loss and outer_loss are callables (const ParamGroup& body, const ParamGroup& head)
/// returning a scalar tensor. They may be the same callable.
template <class T, class InnerLoss, class OuterLoss>
AdaptResult<T> adapt_and_outer_grad(const ParamGroup<T>& body, const ParamGroup<T>& head, InnerLoss&& inner_loss,
                                    OuterLoss&& outer_loss, int steps, T alpha, Scope scope, Order order,
                                    bool want_head_grad = false) {
    if (steps < 1) throw ArgumentError("adapt_and_outer_grad: steps must be >= 1");
    if (!(alpha >= T(0))) throw ArgumentError("adapt_and_outer_grad: alpha must be >= 0");

    GradMode recording(true);
    const bool exact = order == Order::exact;
    ParamGroup<T> body0 = body.leaves();
    ParamGroup<T> head0 = head.leaves();
    ParamGroup<T> b = body0;
    ParamGroup<T> h = head0;

    AdaptResult<T> res;
    for (int s = 0; s < steps; ++s) {
        Tensor<T> loss = inner_loss(b, h);
        if (s == 0) res.inner_loss = loss.item();
        if (scope == Scope::body_and_head) {
            auto g = backward(loss, {&b, &h}, exact);
            GradMap<T> gb, gh;
            gb.entries.assign(g.entries.begin(), g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()));
            gh.entries.assign(g.entries.begin() + static_cast<std::ptrdiff_t>(b.size()), g.entries.end());
            if (exact) {
                b = sgd_update(b, gb, alpha);
                h = sgd_update(h, gh, alpha);
            } else {
                NoGrad ng;
                b = sgd_update(b, gb, alpha).leaves();
                h = sgd_update(h, gh, alpha).leaves();
            }
        } else {
            auto gh = backward(loss, {&h}, exact);
            if (exact) {
                h = sgd_update(h, gh, alpha);
            } else {
                NoGrad ng;
                h = sgd_update(h, gh, alpha).leaves();
            }
        }
    }

    Tensor<T> outer = outer_loss(b, h);
    res.outer_loss = outer.item();
    // In first-order mode the adapted tensors are leaves and stand in for the initial ones.
    const ParamGroup<T>& body_ref = exact ? body0 : b;
    const ParamGroup<T>& head_ref = exact ? head0 : h;
    if (!outer.requires_grad()) {
        res.body_grad = GradMap<T>::zeros_like(body);
        res.head_grad = GradMap<T>::zeros_like(head);
    } else if (want_head_grad) {
        auto g = backward(outer, {&body_ref, &head_ref}, false);
        res.body_grad.entries.assign(g.entries.begin(), g.entries.begin() + static_cast<std::ptrdiff_t>(body.size()));
        res.head_grad.entries.assign(g.entries.begin() + static_cast<std::ptrdiff_t>(body.size()), g.entries.end());
    } else {
        res.body_grad = backward(outer, {&body_ref}, false);
    }
    res.body = b.detached();
    res.head = h.detached();
    return res;
}

}  // namespace dhm
