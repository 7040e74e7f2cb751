#include "ccad/core/autograd.hpp"

#include <gtest/gtest.h>

#include "ccad/core/rng.hpp"
#include "test_util.hpp"

using namespace ccad;
using ag::Var;

namespace {

Var<double> param(std::vector<int> shape, Rng& rng, double std_ = 0.7) {
    return Var<double>::leaf(Tensor<double>::randn(std::move(shape), rng, std_), true);
}

// Random fixed projection so the scalar head has non-uniform sensitivities.
Var<double> head(const Var<double>& x, Rng& rng) {
    auto r = Var<double>::constant(Tensor<double>::randn(x.val().shape, rng));
    return ag::mean_all(ag::mul(x, r));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
    Rng rng(1);
    auto a = param({3, 4}, rng);
    auto b = param({3, 4}, rng);
    ccad_test::check_gradients_fd({a, b}, [&] {
        Rng hr(2);
        auto s = ag::add(ag::mul(a, b), ag::scale(ag::sub(a, b), 0.5));
        return head(ag::silu(s), hr);
    });
}

TEST(Autograd, RsqrtEps) {
    Rng rng(3);
    auto a = Var<double>::leaf(Tensor<double>{{2, 3}, {0.5, 1.0, 2.0, 0.1, 3.0, 0.7}}, true);
    ccad_test::check_gradients_fd({a}, [&] {
        Rng hr(4);
        return head(ag::rsqrt_eps(a, 1e-3), hr);
    });
}

TEST(Autograd, MatmulBothSides) {
    Rng rng(5);
    auto a = param({4, 3}, rng);
    auto b = param({3, 5}, rng);
    ccad_test::check_gradients_fd({a, b}, [&] {
        Rng hr(6);
        return head(ag::matmul(a, b), hr);
    });
}

TEST(Autograd, BmmWithSharedRhs) {
    Rng rng(7);
    auto a = param({6, 2, 3}, rng);   // G=6
    auto b = param({3, 3, 4}, rng);   // Gb=3, cycled
    ccad_test::check_gradients_fd({a, b}, [&] {
        Rng hr(8);
        return head(ag::bmm(a, b), hr);
    });
}

TEST(Autograd, SoftmaxRowsSumToOne) {
    Rng rng(9);
    auto a = param({5, 7}, rng, 3.0);
    auto y = ag::softmax_last(a);
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.val().at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    ccad_test::check_gradients_fd({a}, [&] {
        Rng hr(10);
        return head(ag::softmax_last(a), hr);
    });
}

TEST(Autograd, SoftmaxStableForLargeLogits) {
    auto a = Var<double>::leaf(Tensor<double>{{1, 3}, {1000.0, 999.0, -1000.0}}, false);
    auto y = ag::softmax_last(a);
    EXPECT_TRUE(all_finite(y.val()));
    EXPECT_NEAR(y.val().data[0] + y.val().data[1] + y.val().data[2], 1.0, 1e-12);
}

TEST(Autograd, ReshapePermuteConcat) {
    Rng rng(11);
    auto a = param({2, 3, 2, 2}, rng);
    auto b = param({2, 1, 2, 2}, rng);
    ccad_test::check_gradients_fd({a, b}, [&] {
        Rng hr(12);
        auto c = ag::concat_dim1(a, b);             // (2,4,2,2)
        auto p = ag::permute(c, {0, 2, 3, 1});      // (2,2,2,4)
        auto r = ag::reshape(p, {8, 4});
        return head(r, hr);
    });
}

TEST(Autograd, Conv2dAllParents) {
    Rng rng(13);
    auto x = param({2, 3, 5, 5}, rng);
    auto w = param({4, 3, 3, 3}, rng, 0.4);
    auto b = param({4}, rng, 0.2);
    ccad_test::check_gradients_fd({x, w, b}, [&] {
        Rng hr(14);
        return head(ag::conv2d(x, w, b, 1), hr);
    });
}

TEST(Autograd, Conv1x1NoPad) {
    Rng rng(15);
    auto x = param({1, 2, 4, 4}, rng);
    auto w = param({3, 2, 1, 1}, rng);
    ccad_test::check_gradients_fd({x, w}, [&] {
        Rng hr(16);
        return head(ag::conv2d(x, w, Var<double>(), 0), hr);
    });
}

TEST(Autograd, PoolAndUpsample) {
    Rng rng(17);
    auto x = param({2, 2, 4, 4}, rng);
    ccad_test::check_gradients_fd({x}, [&] {
        Rng hr(18);
        return head(ag::upsample_nearest2(ag::avg_pool2(x)), hr);
    });
}

// The fused norms must agree with their op-by-op compositions, values and
// gradients both.
TEST(Autograd, FusedNormsMatchComposedRoute) {
    Rng rng(101);
    auto x = param({2, 6, 4, 4}, rng);
    auto gm = param({6}, rng, 0.5);
    auto bt = param({6}, rng, 0.5);
    auto rmat = Var<double>::constant(Tensor<double>::randn({2, 6, 4, 4}, rng));

    auto run = [&](bool fused) {
        x.zero_grad();
        gm.zero_grad();
        bt.zero_grad();
        auto y = fused ? ag::group_norm(x, 3, gm, bt) : ag::group_norm_composed(x, 3, gm, bt);
        auto loss = ag::mean_all(ag::mul(y, rmat));
        ag::backward(loss);
        return std::make_tuple(y.val(), x.grad(), gm.grad(), bt.grad());
    };
    auto [v1, gx1, gg1, gb1] = run(true);
    auto [v2, gx2, gg2, gb2] = run(false);
    EXPECT_LT(max_abs_diff(v1, v2), 1e-12);
    EXPECT_LT(max_abs_diff(gx1, gx2), 1e-12);
    EXPECT_LT(max_abs_diff(gg1, gg2), 1e-12);
    EXPECT_LT(max_abs_diff(gb1, gb2), 1e-12);

    auto t = param({3, 4, 6}, rng);
    auto run_ln = [&](bool fused) {
        t.zero_grad();
        gm.zero_grad();
        bt.zero_grad();
        auto y = fused ? ag::layer_norm(t, gm, bt) : ag::layer_norm_composed(t, gm, bt);
        auto loss = ag::mean_all(ag::mul(y, Var<double>::constant(Tensor<double>::full({3, 4, 6}, 0.3))));
        ag::backward(loss);
        return std::make_pair(y.val(), t.grad());
    };
    auto [lv1, lg1] = run_ln(true);
    auto [lv2, lg2] = run_ln(false);
    EXPECT_LT(max_abs_diff(lv1, lv2), 1e-12);
    EXPECT_LT(max_abs_diff(lg1, lg2), 1e-12);
}

TEST(Autograd, NormLayers) {
    Rng rng(19);
    auto x = param({2, 4, 3, 3}, rng);
    auto gm = param({4}, rng, 0.5);
    auto bt = param({4}, rng, 0.5);
    ccad_test::check_gradients_fd({x, gm, bt}, [&] {
        Rng hr(20);
        return head(ag::group_norm(x, 2, gm, bt), hr);
    });

    auto t = param({2, 5, 6}, rng);
    auto gl = param({6}, rng, 0.5);
    auto bl = param({6}, rng, 0.5);
    ccad_test::check_gradients_fd({t, gl, bl}, [&] {
        Rng hr(21);
        return head(ag::layer_norm(t, gl, bl), hr);
    });
}

TEST(Autograd, LinearAndBiasBroadcast) {
    Rng rng(22);
    auto x = param({2, 3, 4}, rng);
    auto w = param({4, 5}, rng);
    auto b = param({5}, rng);
    ccad_test::check_gradients_fd({x, w, b}, [&] {
        Rng hr(23);
        return head(ag::linear(x, w, b), hr);
    });
}

TEST(Autograd, AddChanBroadcast) {
    Rng rng(24);
    auto x = param({2, 3, 2, 2}, rng);
    auto v = param({2, 3}, rng);
    ccad_test::check_gradients_fd({x, v}, [&] {
        Rng hr(25);
        return head(ag::add_chan(x, v), hr);
    });
}

TEST(Autograd, MseAndSharedSubgraph) {
    Rng rng(26);
    auto a = param({3, 3}, rng);
    auto b = param({3, 3}, rng);
    // a participates twice; gradient must accumulate both paths
    ccad_test::check_gradients_fd({a, b}, [&] {
        return ag::mse(ag::mul(a, a), b);
    });
}

TEST(Autograd, NoGradGuardProducesLeafOutputs) {
    Rng rng(27);
    auto a = param({2, 2}, rng);
    {
        ag::NoGradGuard ng;
        auto y = ag::mul(a, a);
        EXPECT_FALSE(y.requires_grad());
        EXPECT_TRUE(y.node()->parents.empty());
    }
    auto y2 = ag::mul(a, a);
    EXPECT_TRUE(y2.requires_grad());
}

TEST(Autograd, BackwardRequiresScalarRoot) {
    Rng rng(28);
    auto a = param({2, 2}, rng);
    auto y = ag::mul(a, a);
    EXPECT_THROW(ag::backward(y), ShapeError);
}

TEST(Autograd, DeterministicRepeatedBackward) {
    Rng rng(29);
    auto a = param({4, 4}, rng);
    auto w = param({4, 4}, rng);
    auto run = [&] {
        a.zero_grad();
        w.zero_grad();
        auto loss = ag::mse(ag::silu(ag::matmul(a, w)), Var<double>::constant(Tensor<double>::zeros({4, 4})));
        ag::backward(loss);
        return std::make_pair(a.grad().data, w.grad().data);
    };
    auto r1 = run();
    auto r2 = run();
    EXPECT_EQ(r1.first, r2.first);    // bit-identical
    EXPECT_EQ(r1.second, r2.second);
}
