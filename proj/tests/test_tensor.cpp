#include <cmath>
#include <sstream>

#include "dhm/adapt.hpp"
#include "dhm/io.hpp"
#include "testing.hpp"

using namespace dhm;
using dhm::testing::close_all;
using dhm::testing::numeric_grad;
using dhm::testing::random_tensor;
using TD = Tensor<double>;

namespace {

double scalar_of(const TD& t) { return t.item(); }

// Gradient of f(xs) w.r.t. xs[which], analytic and numeric.
void expect_grad_matches(const std::function<TD(const std::vector<TD>&)>& f, std::vector<TD> xs, std::size_t which,
                         double rtol = 1e-4) {
    std::vector<TD> leaves;
    for (auto& x : xs) leaves.push_back(x.leaf());
    const auto g = grad(f(leaves), {leaves[which]});
    const auto num = numeric_grad([&](const std::vector<TD>& v) { NoGrad ng; return scalar_of(f(v)); }, xs, which);
    EXPECT_TRUE(close_all(g[0].values(), num, rtol));
}

}  // namespace

TEST(TensorNew, FillsShape) {
    auto t = tensor_new<double>({2, 2}, 0.0);
    EXPECT_EQ(t.dims(), (Dims{2, 2}));
    EXPECT_EQ(t.values(), (std::vector<double>{0, 0, 0, 0}));
    auto u = tensor_new<double>({3}, 1.5);
    EXPECT_EQ(u.values(), (std::vector<double>{1.5, 1.5, 1.5}));
}

TEST(TensorNew, RejectsZeroExtent) {
    EXPECT_THROW(tensor_new<double>({0}, 1.0), ShapeError);
    EXPECT_THROW(tensor_new<double>({2, 0}, 1.0), ShapeError);
    EXPECT_THROW(TD::from({2}, {1.0}), ShapeError);
}

TEST(Linear, Examples) {
    auto eye = TD::from({2, 2}, {1, 0, 0, 1});
    auto y = linear(TD::from({1, 2}, {1, 2}), eye, TD::from({2}, {0, 0}));
    EXPECT_EQ(y.values(), (std::vector<double>{1, 2}));
    auto z = linear(TD::from({1, 2}, {1, 1}), TD::from({2, 1}, {2, 3}), TD::from({1}, {1}));
    EXPECT_EQ(z.values(), (std::vector<double>{6}));
}

TEST(Linear, ShapeMismatch) {
    EXPECT_THROW(linear(TD::zeros({1, 3}), TD::zeros({2, 2}), TD::zeros({2})), ShapeError);
    EXPECT_THROW(linear(TD::zeros({1, 2}), TD::zeros({2, 2}), TD::zeros({3})), ShapeError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
    auto f = [](const std::vector<TD>& v) { return sum(linear(v[0], v[1], v[2])); };
    std::vector<TD> xs{random_tensor({4, 3}, 1), random_tensor({3, 2}, 2), random_tensor({2}, 3)};
    for (std::size_t w = 0; w < 3; ++w) expect_grad_matches(f, xs, w);
}

TEST(Relu, Examples) {
    EXPECT_EQ(relu(TD::from({2}, {-1, 2})).values(), (std::vector<double>{0, 2}));
    auto x = TD::from({3}, {-1, -2, -0.5}).leaf();
    auto y = relu(x);
    EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(grad(sum(y), {x})[0].values(), (std::vector<double>{0, 0, 0}));
}

TEST(Relu, SubgradientAtZeroIsZero) {
    auto x = TD::from({1}, {0.0}).leaf();
    EXPECT_EQ(grad(sum(relu(x)), {x})[0][0], 0.0);
}

TEST(Relu, GradientAwayFromKink) {
    auto x = random_tensor({5, 4}, 9);
    std::vector<double> v = x.values();
    for (auto& e : v)
        if (std::abs(e) < 1e-3) e = 0.5;
    auto w = random_tensor({5, 4}, 10);
    auto f = [](const std::vector<TD>& xs) { return sum(mul(relu(xs[0]), xs[1])); };
    expect_grad_matches(f, {TD::from({5, 4}, v), w}, 0);
}

TEST(Conv2d, ScalarKernel) {
    auto x = TD::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = conv2d(x, TD::from({1, 1, 1, 1}, {2}), 1);
    EXPECT_EQ(y.dims(), (Dims{1, 1, 2, 2}));
    EXPECT_EQ(y.values(), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, OnesKernelSums) {
    auto y = conv2d(TD::from({1, 1, 2, 2}, {1, 2, 3, 4}), TD::full({1, 1, 2, 2}, 1.0), 1);
    EXPECT_EQ(y.dims(), (Dims{1, 1, 1, 1}));
    EXPECT_EQ(y.values(), (std::vector<double>{10}));
}

TEST(Conv2d, KernelLargerThanInput) {
    EXPECT_THROW(conv2d(TD::zeros({1, 1, 2, 2}), TD::zeros({1, 1, 3, 3}), 1), ShapeError);
}

TEST(Conv2d, OutputExtent) {
    EXPECT_EQ(conv_out_extent(5, 3, 2), 2u);
    EXPECT_EQ(conv_out_extent(28, 3, 2), 13u);
    auto y = conv2d(random_tensor({2, 3, 7, 6}, 4), random_tensor({5, 3, 3, 3}, 5), 2);
    EXPECT_EQ(y.dims(), (Dims{2, 5, 3, 2}));
}

TEST(Conv2d, MatchesDirectLoops) {
    auto x = random_tensor({2, 2, 6, 5}, 11);
    auto k = random_tensor({3, 2, 3, 3}, 12);
    const std::size_t s = 2, oh = 2, ow = 2;
    auto y = conv2d(x, k, s);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t f = 0; f < 3; ++f)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = 0;
                    for (std::size_t c = 0; c < 2; ++c)
                        for (std::size_t a = 0; a < 3; ++a)
                            for (std::size_t b = 0; b < 3; ++b)
                                acc += x[((n * 2 + c) * 6 + i * s + a) * 5 + j * s + b] * k[((f * 2 + c) * 3 + a) * 3 + b];
                    EXPECT_NEAR(y[((n * 3 + f) * oh + i) * ow + j], acc, 1e-12);
                }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    auto w = random_tensor({1, 3, 2, 2}, 23);
    auto f = [&](const std::vector<TD>& v) { return sum(mul(conv2d(v[0], v[1], 2), w)); };
    std::vector<TD> xs{random_tensor({1, 2, 5, 5}, 21), random_tensor({3, 2, 3, 3}, 22)};
    expect_grad_matches(f, xs, 0);
    expect_grad_matches(f, xs, 1);
}

TEST(SoftmaxCrossEntropy, Examples) {
    EXPECT_NEAR(softmax_cross_entropy(TD::full({1, 5}, 0.3), std::vector<int>{2}).item(), std::log(5.0), 1e-12);
    const double big = softmax_cross_entropy(TD::from({1, 2}, {1000, 0}), std::vector<int>{0}).item();
    EXPECT_TRUE(std::isfinite(big));
    EXPECT_NEAR(big, 0.0, 1e-12);
    const double want = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    const double got = softmax_cross_entropy(TD::from({1, 3}, {1, 2, 3}), std::vector<int>{2}).item();
    EXPECT_NEAR(got, want, 1e-12);
    EXPECT_NEAR(got, 0.40761, 1e-5);
}

TEST(SoftmaxCrossEntropy, Errors) {
    EXPECT_THROW(softmax_cross_entropy(TD::zeros({1, 3}), std::vector<int>{3}), IndexError);
    EXPECT_THROW(softmax_cross_entropy(TD::zeros({1, 3}), std::vector<int>{-1}), IndexError);
    EXPECT_THROW(softmax_cross_entropy(TD::zeros({2, 3}), std::vector<int>{0}), ShapeError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
    const std::vector<int> targets{0, 2, 1, 2};
    auto f = [&](const std::vector<TD>& v) { return softmax_cross_entropy(v[0], targets); };
    expect_grad_matches(f, {random_tensor({4, 3}, 31, -3, 3)}, 0);
}

TEST(Softmax, RowsSumToOneAndLossNonNegative) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto x = random_tensor({6, 7}, 100 + s, -20, 20);
        auto p = softmax(x);
        for (std::size_t i = 0; i < 6; ++i) {
            double acc = 0;
            for (std::size_t j = 0; j < 7; ++j) acc += p[i * 7 + j];
            EXPECT_NEAR(acc, 1.0, 1e-12);
        }
        EXPECT_GE(softmax_cross_entropy(x, std::vector<int>{0, 1, 2, 3, 4, 5}).item(), 0.0);
    }
}

TEST(ForwardChecks, NonFiniteIsAnError) {
    const double inf = std::numeric_limits<double>::infinity();
    EXPECT_THROW(linear(TD::from({1, 1}, {inf}), TD::from({1, 1}, {1}), TD::from({1}, {0})), NumericError);
}

TEST(Backward, SquareOfThree) {
    auto x = TD::from({1}, {3.0}).leaf();
    EXPECT_DOUBLE_EQ(grad(sum(mul(x, x)), {x})[0][0], 6.0);
}

TEST(Backward, UnreachedParameterGetsZero) {
    auto x = TD::from({2}, {1.0, 2.0}).leaf();
    auto y = TD::from({3}, {1.0, 2.0, 3.0}).leaf();
    auto g = grad(sum(mul(x, x)), {x, y});
    EXPECT_EQ(g[1].values(), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, Errors) {
    auto x = TD::from({2}, {1.0, 2.0}).leaf();
    EXPECT_THROW(grad(mul(x, x), {x}), ContractError);
    EXPECT_THROW(grad(sum(x.detach()), {x}), TapeError);
    NoGrad ng;
    EXPECT_THROW(grad(sum(mul(x, x)), {x}), TapeError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
    const std::vector<int> y{0, 2, 1, 1, 0};
    auto f = [&](const std::vector<TD>& v) {
        return softmax_cross_entropy(linear(relu(linear(v[0], v[1], v[2])), v[3], v[4]), y);
    };
    std::vector<TD> xs{random_tensor({5, 4}, 41), random_tensor({4, 8}, 42), random_tensor({8}, 43),
                       random_tensor({8, 3}, 44), random_tensor({3}, 45)};
    for (std::size_t w = 1; w < xs.size(); ++w) expect_grad_matches(f, xs, w);
}

TEST(Backward, Linearity) {
    auto x = random_tensor({3, 4}, 51).leaf();
    auto w = random_tensor({4, 2}, 52).leaf();
    auto l1 = [&] { return sum(mul(matmul(x, w), matmul(x, w))); };
    auto l2 = [&] { return softmax_cross_entropy(matmul(x, w), std::vector<int>{0, 1, 1}); };
    const double a = 0.7, b = -2.5;
    auto g = grad(add(scale(l1(), a), scale(l2(), b)), {w})[0];
    auto g1 = grad(l1(), {w})[0];
    auto g2 = grad(l2(), {w})[0];
    std::vector<double> want;
    for (std::size_t i = 0; i < g.numel(); ++i) want.push_back(a * g1[i] + b * g2[i]);
    EXPECT_TRUE(close_all(g.values(), want, 1e-10, 0));
}

TEST(Backward, Deterministic) {
    auto run = [] {
        auto x = random_tensor({4, 3}, 61).leaf();
        auto w = random_tensor({3, 3}, 62).leaf();
        return grad(softmax_cross_entropy(relu(matmul(x, w)), std::vector<int>{0, 1, 2, 0}), {x, w});
    };
    auto a = run(), b = run();
    EXPECT_TRUE(a[0].same_values(b[0]));
    EXPECT_TRUE(a[1].same_values(b[1]));
}

TEST(Backward, ReshapeTransposeMatmulGradients) {
    auto f = [](const std::vector<TD>& v) {
        auto m = matmul(transpose(reshape(v[0], {3, 4})), v[1]);
        return sum(mul(m, m));
    };
    std::vector<TD> xs{random_tensor({12}, 71), random_tensor({3, 2}, 72)};
    expect_grad_matches(f, xs, 0);
    expect_grad_matches(f, xs, 1);
}

TEST(Backward, SecondOrderOfCube) {
    auto x = TD::from({1}, {2.0}).leaf();
    auto g = grad(sum(mul(mul(x, x), x)), {x}, true)[0];
    EXPECT_DOUBLE_EQ(g[0], 12.0);
    EXPECT_DOUBLE_EQ(grad(sum(g), {x})[0][0], 12.0);
}

namespace {

ParamGroup<double> group(const std::string& name, TD t, Role role = Role::body) {
    ParamGroup<double> g(role);
    g.add(name, std::move(t));
    return g;
}

}  // namespace

TEST(ParamGroup, NamesUnique) {
    ParamGroup<double> g;
    g.add("w", TD::zeros({1}));
    EXPECT_THROW(g.add("w", TD::zeros({1})), ContractError);
}

TEST(SgdUpdate, Examples) {
    auto p = group("w", TD::from({1}, {1.0}));
    GradMap<double> g{{{"w", TD::from({1}, {0.5})}}};
    EXPECT_DOUBLE_EQ(sgd_update(p, g, 0.1).at("w")[0], 0.95);
    EXPECT_TRUE(sgd_update(p, g, 0.0).same_values(p));
    EXPECT_TRUE(sgd_update(p, GradMap<double>::zeros_like(p), 0.3).same_values(p));
}

TEST(SgdUpdate, ShapeMismatch) {
    auto p = group("w", TD::from({2}, {1.0, 2.0}));
    GradMap<double> g{{{"w", TD::from({1}, {0.5})}}};
    EXPECT_THROW(sgd_update(p, g, 0.1), ShapeError);
    GradMap<double> h{{{"v", TD::from({2}, {0.5, 0.5})}}};
    EXPECT_THROW(sgd_update(p, h, 0.1), ShapeError);
}

TEST(SgdUpdate, LrZeroIsIdentityOnRandomParams) {
    ParamGroup<double> p;
    p.add("a", random_tensor({3, 4}, 1));
    p.add("b", random_tensor({4}, 2));
    GradMap<double> g{{{"a", random_tensor({3, 4}, 3)}, {"b", random_tensor({4}, 4)}}};
    EXPECT_TRUE(sgd_update(p, g, 0.0).same_values(p));
}

namespace {

auto square_loss = [](const ParamGroup<double>& b, const ParamGroup<double>&) {
    auto t = b.at("theta");
    return sum(mul(t, t));
};

}  // namespace

TEST(AdaptAndOuterGrad, QuadraticClosedForm) {
    // L(theta) = theta^2, theta' = (1 - 2 alpha) theta.
    auto body = group("theta", TD::from({1}, {1.0}));
    auto head = group("unused", TD::from({1}, {0.0}), Role::head);
    auto ex = adapt_and_outer_grad(body, head, square_loss, square_loss, 1, 0.1, Scope::body_and_head, Order::exact);
    auto fo = adapt_and_outer_grad(body, head, square_loss, square_loss, 1, 0.1, Scope::body_and_head, Order::first_order);
    EXPECT_NEAR(ex.body.at("theta")[0], 0.8, 1e-12);
    EXPECT_NEAR(ex.body_grad.at("theta")[0], 2 * std::pow(1 - 2 * 0.1, 2) * 1.0, 1e-12);
    EXPECT_NEAR(ex.body_grad.at("theta")[0], 1.28, 1e-12);
    EXPECT_NEAR(fo.body_grad.at("theta")[0], 1.6, 1e-12);
}

TEST(AdaptAndOuterGrad, AlphaZeroMatchesPlainGradient) {
    auto body = group("theta", TD::from({2}, {0.3, -1.2}));
    auto head = group("unused", TD::from({1}, {0.0}), Role::head);
    auto ex = adapt_and_outer_grad(body, head, square_loss, square_loss, 3, 0.0, Scope::body_and_head, Order::exact);
    auto fo = adapt_and_outer_grad(body, head, square_loss, square_loss, 3, 0.0, Scope::body_and_head, Order::first_order);
    EXPECT_DOUBLE_EQ(ex.body_grad.at("theta")[0], 0.6);
    EXPECT_DOUBLE_EQ(ex.body_grad.at("theta")[1], -2.4);
    EXPECT_TRUE(ex.body_grad.at("theta").same_values(fo.body_grad.at("theta")));
}

TEST(AdaptAndOuterGrad, LinearInnerLossExactEqualsFirstOrder) {
    // Inner loss linear in head, so the update does not depend on head and the
    // Hessian term vanishes.
    auto x = random_tensor({4, 3}, 81);
    auto c = random_tensor({4, 2}, 82);
    auto inner = [&](const ParamGroup<double>& b, const ParamGroup<double>& h) {
        return add(sum(mul(matmul(x, h.at("w")), c)), sum(b.at("v")));
    };
    auto outer = [&](const ParamGroup<double>& b, const ParamGroup<double>& h) {
        auto z = matmul(x, h.at("w"));
        return add(sum(mul(z, z)), sum(mul(b.at("v"), b.at("v"))));
    };
    auto body = group("v", random_tensor({3}, 83));
    auto head = group("w", random_tensor({3, 2}, 84), Role::head);
    for (auto scope : {Scope::body_and_head, Scope::head_only}) {
        auto ex = adapt_and_outer_grad(body, head, inner, outer, 2, 0.05, scope, Order::exact, true);
        auto fo = adapt_and_outer_grad(body, head, inner, outer, 2, 0.05, scope, Order::first_order, true);
        EXPECT_TRUE(close_all(ex.head_grad.at("w").values(), fo.head_grad.at("w").values(), 1e-12));
        EXPECT_TRUE(close_all(ex.body_grad.at("v").values(), fo.body_grad.at("v").values(), 1e-12));
    }
}

TEST(AdaptAndOuterGrad, TinyMlpMatchesFiniteDifferences) {
    auto x = random_tensor({6, 4}, 91);
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    auto loss = [&](const ParamGroup<double>& b, const ParamGroup<double>& h) {
        return softmax_cross_entropy(linear(relu(linear(x, b.at("w1"), b.at("b1"))), h.at("w2"), h.at("b2")), y);
    };
    ParamGroup<double> body;
    body.add("w1", random_tensor({4, 8}, 92));
    body.add("b1", random_tensor({8}, 93, -0.1, 0.1));
    ParamGroup<double> head(Role::head);
    head.add("w2", random_tensor({8, 3}, 94));
    head.add("b2", random_tensor({3}, 95, -0.1, 0.1));
    const double alpha = 0.05;
    auto res = adapt_and_outer_grad(body, head, loss, loss, 1, alpha, Scope::body_and_head, Order::exact, true);

    // Composed pipeline evaluated without the tape.
    auto pipeline = [&](const std::vector<TD>& v) {
        auto b = body.with_tensors({v[0], v[1]}).leaves();
        auto h = head.with_tensors({v[2], v[3]}).leaves();
        GradMode on(true);
        auto g = backward(loss(b, h), {&b, &h});
        NoGrad ng;
        GradMap<double> gb{{g.entries[0], g.entries[1]}}, gh{{g.entries[2], g.entries[3]}};
        return loss(sgd_update(b, gb, alpha), sgd_update(h, gh, alpha)).item();
    };
    std::vector<TD> xs{body.at("w1"), body.at("b1"), head.at("w2"), head.at("b2")};
    const std::vector<std::string> names{"w1", "b1"};
    for (std::size_t i = 0; i < 2; ++i)
        EXPECT_TRUE(close_all(res.body_grad.at(names[i]).values(), numeric_grad(pipeline, xs, i), 1e-3, 1e-8));
    const std::vector<std::string> hnames{"w2", "b2"};
    for (std::size_t i = 0; i < 2; ++i)
        EXPECT_TRUE(close_all(res.head_grad.at(hnames[i]).values(), numeric_grad(pipeline, xs, i + 2), 1e-3, 1e-8));
}

TEST(AdaptAndOuterGrad, HeadOnlyLeavesBodyUntouched) {
    auto x = random_tensor({5, 3}, 101);
    auto loss = [&](const ParamGroup<double>& b, const ParamGroup<double>& h) {
        return softmax_cross_entropy(matmul(relu(matmul(x, b.at("w"))), h.at("v")), std::vector<int>{0, 1, 0, 1, 1});
    };
    auto body = group("w", random_tensor({3, 4}, 102));
    auto head = group("v", random_tensor({4, 2}, 103), Role::head);
    auto res = adapt_and_outer_grad(body, head, loss, loss, 3, 0.1, Scope::head_only, Order::exact);
    EXPECT_TRUE(res.body.same_values(body));
    EXPECT_FALSE(res.head.same_values(head));
}

TEST(AdaptAndOuterGrad, Preconditions) {
    auto body = group("theta", TD::from({1}, {1.0}));
    auto head = group("unused", TD::from({1}, {0.0}), Role::head);
    EXPECT_THROW(adapt_and_outer_grad(body, head, square_loss, square_loss, 0, 0.1, Scope::body_and_head, Order::exact),
                 ArgumentError);
    EXPECT_THROW(adapt_and_outer_grad(body, head, square_loss, square_loss, 1, -0.1, Scope::body_and_head, Order::exact),
                 ArgumentError);
}

TEST(TensorFile, RoundTripBothPrecisions) {
    auto t = random_tensor({2, 3, 4}, 111);
    EXPECT_TRUE(decode_tsr<double>(encode_tsr(t)).same_values(t));
    auto f = Tensor<float>::from({3}, {1.5f, -2.25f, 1e-7f});
    const auto bytes = encode_tsr(f);
    EXPECT_EQ(bytes.substr(0, 4), "TSR1");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 1);
    EXPECT_EQ(bytes.size(), 8u + 4u + 12u);
    EXPECT_TRUE(decode_tsr<float>(bytes).same_values(f));
}

TEST(TensorFile, RejectsCorruptInput) {
    const auto bytes = encode_tsr(random_tensor({2, 2}, 112));
    EXPECT_THROW(decode_tsr<double>(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_tsr<double>(bytes + "x"), FormatError);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_tsr<double>(bad), FormatError);
    bad = bytes;
    bad[4] = 7;
    EXPECT_THROW(decode_tsr<double>(bad), FormatError);
}
