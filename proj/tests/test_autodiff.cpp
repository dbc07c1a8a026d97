#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hdu/gradcheck.hpp"
#include "hdu/nn/conv.hpp"
#include "hdu/tensor.hpp"
#include "support.hpp"

using namespace hdu;
using hdu::testing::random_tensor;
using hdu::testing::random_tensor_off_zero;

namespace {

std::vector<double> values(const Tensord& t) { return {t.data().begin(), t.data().end()}; }
std::vector<double> grads(const Tensord& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST(Elementwise, AddIsArithmetic) {
    Tensord a({2}, {1, 2}), b({2}, {3, 4});
    EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
}

TEST(Elementwise, ReluZeroesNegatives) {
    Tensord a({3}, {-1, 0, 2});
    EXPECT_EQ(values(relu(a)), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, ClampToHounsfieldWindow) {
    Tensord a({3}, {-300, 100, 400});
    EXPECT_EQ(values(clamp(a, -200.0, 250.0)), (std::vector<double>{-200, 100, 250}));
}

TEST(Elementwise, ShapeMismatchReportsBothShapes) {
    Tensord a = Tensord::zeros({2, 3}), b = Tensord::zeros({3, 2});
    try {
        add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3)"), std::string::npos);
        EXPECT_NE(msg.find("(3,2)"), std::string::npos);
    }
}

TEST(Elementwise, RecordsTapeOnlyWhenNeeded) {
    Tensord a({2}, {1, 2}), b({2}, {3, 4}, true);
    EXPECT_TRUE(add(a, a).is_leaf());
    EXPECT_FALSE(add(a, b).is_leaf());
    NoGradGuard guard;
    EXPECT_TRUE(add(a, b).is_leaf());
}

TEST(Concat, ChannelCountsAdd) {
    EXPECT_EQ(concat_channels<double>({Tensord::zeros({1, 96, 2, 2}), Tensord::zeros({1, 48, 2, 2})}).dim(1), 144u);
    EXPECT_EQ(concat_channels<double>({Tensord::zeros({1, 1, 4, 4, 3}), Tensord::zeros({1, 3, 4, 4, 3})}).dim(1), 4u);
    std::vector<Tensord> parts{Tensord::zeros({1, 96, 1, 1})};
    for (int i = 0; i < 6; ++i) parts.push_back(Tensord::zeros({1, 48, 1, 1}));
    EXPECT_EQ(concat_channels(parts).dim(1), 384u);
}

TEST(Concat, RejectsMismatchedSpatialExtents) {
    EXPECT_THROW(concat_channels<double>({Tensord::zeros({1, 2, 4, 4}), Tensord::zeros({1, 2, 4, 5})}), ShapeError);
}

TEST(Concat, GradientSplitsByChannelRange) {
    std::mt19937_64 rng(3);
    auto a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 3, 3, 3}, rng);
    auto y = concat_channels<double>({a, b});
    std::vector<double> w(y.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(i);
    backward(dot<double>(y, w));
    // Element (n, c, i) of the concat sits at flat index (n*5 + c)*9 + i.
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
            for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(a.grad()[(n * 2 + c) * 9 + i], double((n * 5 + c) * 9 + i));
            for (std::size_t c = 0; c < 3; ++c)
                EXPECT_EQ(b.grad()[(n * 3 + c) * 9 + i], double((n * 5 + 2 + c) * 9 + i));
        }
}

TEST(Backward, SumOfSquares) {
    Tensord x({3}, {1, 2, 3}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(grads(x), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, UnreachableInputHasZeroGrad) {
    Tensord x({3}, {1, 2, 3}, true), y({3}, {4, 5, 6}, true);
    backward(sum(y));
    EXPECT_EQ(grads(x), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, RejectsNonScalarLoss) {
    Tensord x({3}, {1, 2, 3}, true);
    EXPECT_THROW(backward(mul(x, 2.0)), ShapeError);
}

TEST(Backward, NonGradTensorNeverAccumulates) {
    Tensord x({2}, {1, 2}, true), c({2}, {5, 6});
    backward(sum(mul(x, c)));
    EXPECT_EQ(grads(x), (std::vector<double>{5, 6}));
    EXPECT_EQ(grads(c), (std::vector<double>{0, 0}));
}

TEST(Backward, AddDistributesAcrossFanOut) {
    Tensord x({2}, {1, -2}, true);
    auto y = add(x, x);
    backward(sum(add(y, mul(x, 3.0))));
    EXPECT_EQ(grads(x), (std::vector<double>{5, 5}));
}

TEST(Backward, AccumulatesUntilZeroed) {
    Tensord x({2}, {1, 2}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    backward(loss);
    EXPECT_EQ(grads(x), (std::vector<double>{4, 8}));
    x.zero_grad();
    backward(loss);
    EXPECT_EQ(grads(x), (std::vector<double>{2, 4}));
}

TEST(Backward, RepeatedPassesAreDeterministic) {
    std::mt19937_64 rng(11);
    auto x = random_tensor({1, 2, 5, 5}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto y = relu(nn::conv(x, nn::ConvSpec::make(2, 3, 1, 3), w));
    auto loss = sum(mul(y, y));
    backward(loss);
    auto g1 = grads(w);
    w.zero_grad();
    backward(loss);
    EXPECT_EQ(g1, grads(w));
}

TEST(Backward, RandomGraphMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = hdu::testing::uniform_int(rng, 2, 7);
        auto a = random_tensor_off_zero({n}, rng), b = random_tensor_off_zero({n}, rng);
        auto f = [](const std::vector<Tensord>& in) {
            auto h = relu(add(mul(in[0], in[1]), in[0]));
            return sum(sub(mul(h, h), mul(in[1], 0.5)));
        };
        auto r = finite_diff_check(f, {a, b}, 1e-5);
        EXPECT_TRUE(r.ok(1e-4)) << r.max_rel_error;
    }
}

TEST(FiniteDiff, LinearFunctionIsExact) {
    std::mt19937_64 rng(1);
    auto r = finite_diff_check([](const std::vector<Tensord>& in) { return sum(in[0]); },
                               {random_tensor({4, 3}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(FiniteDiff, ReluAwayFromKink) {
    std::mt19937_64 rng(2);
    auto r = finite_diff_check([](const std::vector<Tensord>& in) { return sum(relu(in[0])); },
                               {random_tensor_off_zero({20}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(FiniteDiff, ThroughConvolution) {
    std::mt19937_64 rng(4);
    auto x = random_tensor({1, 2, 6, 6}, rng), w = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
    std::vector<double> proj = hdu::testing::random_values(2 * 36, rng);
    auto f = [&](const std::vector<Tensord>& in) {
        return dot<double>(nn::conv(in[0], nn::ConvSpec::make(2, 3, 1, 2), in[1], in[2]), proj);
    };
    auto r = finite_diff_check(f, {x, w, b});
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(FiniteDiff, ReportsNonFiniteCoordinates) {
    Tensord x({2}, {1.0, 0.0}, true);
    auto f = [](const std::vector<Tensord>& in) {
        // Weights 1/x make f non-finite at x = 0.
        auto v = in[0].data();
        std::vector<double> inv{1.0 / v[0], 1.0 / v[1]};
        return dot<double>(in[0], inv);
    };
    auto r = finite_diff_check(f, {x});
    EXPECT_FALSE(r.non_finite.empty());
}
