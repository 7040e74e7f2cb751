#include "ccad/fine_compression.hpp"

#include <gtest/gtest.h>

#include "ccad/core/rng.hpp"
#include "test_util.hpp"

using namespace ccad;

namespace {

AttentionParamsT<double> random_params(int d, int d_k, int heads, uint64_t seed) {
    return AttentionParamsT<double>::seeded(d, d_k, heads, seed);
}

Tensor<double> randmat(int r, int c, Rng& rng) { return Tensor<double>::randn({r, c}, rng); }

}  // namespace

TEST(FcmForward, SingleKeyIsQueryIndependent) {
    Rng rng(1);
    const int d = 4, dk = 4;
    auto p = random_params(d, dk, 1, 7);
    auto bank = randmat(1, d, rng);

    auto dbs1 = randmat(3, d, rng);
    auto dbs2 = randmat(3, d, rng);
    auto out1 = fcm_forward_t(dbs1, bank, p);
    auto out2 = fcm_forward_t(dbs2, bank, p);
    EXPECT_LT(max_abs_diff(out1, out2), 1e-12);

    // every row equals (b theta_V) theta_B
    Tensor<double> expect({1, d});
    for (int j = 0; j < d; ++j) {
        double acc = 0;
        for (int a = 0; a < dk; ++a) {
            double bv = 0;
            for (int e = 0; e < d; ++e) bv += bank.at(0, e) * p.theta_v.at(e, a);
            acc += bv * p.theta_b.at(a, j);
        }
        expect.at(0, j) = acc;
    }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j) EXPECT_NEAR(out1.at(i, j), expect.at(0, j), 1e-12);
}

// Identity-like projections with one-hot keys: output rows are convex
// combinations of the bank rows, checked on a 2x2 hand case.
TEST(FcmForward, HandEvaluatedTwoByTwoCase) {
    const int d = 2;
    AttentionParamsT<double> p;
    p.heads = 1;
    p.d_k = 2;
    p.theta_q = Tensor<double>({2, 2}, {1, 0, 0, 1});
    p.theta_w = Tensor<double>({2, 2}, {1, 0, 0, 1});
    p.theta_v = Tensor<double>({2, 2}, {1, 0, 0, 1});
    p.theta_b = Tensor<double>({2, 2}, {1, 0, 0, 1});
    Tensor<double> bank({2, 2}, {1, 0, 0, 1});  // one-hot rows
    Tensor<double> dbs({1, 2}, {2.0, 0.0});

    auto out = fcm_forward_t(dbs, bank, p);
    // logits = [2,0]/sqrt(2); weights = softmax -> w0 = e^s/(e^s+1), s = 2/sqrt(2)
    const double s = 2.0 / std::sqrt(2.0);
    const double w0 = std::exp(s) / (std::exp(s) + 1.0);
    EXPECT_NEAR(out.at(0, 0), w0, 1e-12);
    EXPECT_NEAR(out.at(0, 1), 1.0 - w0, 1e-12);
    EXPECT_NEAR(out.at(0, 0) + out.at(0, 1), 1.0, 1e-12);  // convex combination
}

TEST(FcmForward, MatchesDenseLoopOracle) {
    Rng rng(11);
    auto p = random_params(6, 8, 2, 13);
    auto dbs = randmat(3, 6, rng);
    auto bank = randmat(4, 6, rng);
    auto out = fcm_forward_t(dbs, bank, p);
    auto oracle = ccad_test::dense_attention_oracle(dbs, bank, p.theta_q, p.theta_w, p.theta_v, p.theta_b, 2);
    EXPECT_LT(max_abs_diff(out, oracle), 1e-6);
}

TEST(FcmForward, OracleAgreementAcrossRandomShapes) {
    Rng rng(17);
    for (int trial = 0; trial < 60; ++trial) {
        const int heads = std::vector<int>{1, 2, 4}[static_cast<size_t>(rng.uniform_int(0, 2))];
        const int dh = rng.uniform_int(1, 4);
        const int dk = heads * dh;
        const int d = rng.uniform_int(1, 8);
        const int zeta = rng.uniform_int(1, 6);
        const int xi = rng.uniform_int(1, 6);
        auto p = random_params(d, dk, heads, 1000 + static_cast<uint64_t>(trial));
        auto dbs = randmat(zeta, d, rng);
        auto bank = randmat(xi, d, rng);
        auto out = fcm_forward_t(dbs, bank, p);
        ASSERT_EQ(out.dim(0), zeta);
        ASSERT_EQ(out.dim(1), d);
        auto oracle =
            ccad_test::dense_attention_oracle(dbs, bank, p.theta_q, p.theta_w, p.theta_v, p.theta_b, heads);
        EXPECT_LT(max_abs_diff(out, oracle), 1e-6) << "zeta=" << zeta << " xi=" << xi << " heads=" << heads;
    }
}

TEST(FcmForward, AttentionRowsSumToOne) {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = rng.uniform_int(2, 6);
        auto p = random_params(d, 8, 2, 31 + static_cast<uint64_t>(trial));
        auto dbs = randmat(rng.uniform_int(1, 5), d, rng);
        auto bank = randmat(rng.uniform_int(1, 5), d, rng);
        auto w = fcm_attention_weights(dbs, bank, p);
        const int rows = w.dim(0) * w.dim(1);
        const int xi = w.dim(2);
        for (int r = 0; r < rows; ++r) {
            double s = 0;
            for (int j = 0; j < xi; ++j) s += w.data[static_cast<size_t>(r) * xi + j];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(FcmForward, BankRowPermutationInvariance) {
    Rng rng(23);
    auto p = random_params(5, 8, 4, 41);
    auto dbs = randmat(3, 5, rng);
    auto bank = randmat(6, 5, rng);
    auto out = fcm_forward_t(dbs, bank, p);

    // reverse the bank rows
    Tensor<double> perm({6, 5});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) perm.at(i, j) = bank.at(5 - i, j);
    auto out_perm = fcm_forward_t(dbs, perm, p);
    EXPECT_LT(max_abs_diff(out, out_perm), 1e-6);
}

TEST(FcmForward, DimensionMismatchNamesOperand) {
    Rng rng(29);
    auto p = random_params(4, 4, 1, 43);
    auto dbs = randmat(2, 4, rng);
    auto bank = randmat(3, 5, rng);  // wrong d
    try {
        fcm_forward_t(dbs, bank, p);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("bank"), std::string::npos);
    }
}

TEST(FcmGradients, ConstantLossGivesZeroGradients) {
    Rng rng(31);
    auto p = random_params(3, 4, 2, 47);
    auto dbs = randmat(2, 3, rng);
    auto bank = randmat(2, 3, rng);
    auto g = fcm_gradients<double>(dbs, bank, p, [](const ag::Var<double>& bf) {
        return ag::scale(ag::mean_all(bf), 0.0);
    });
    for (const auto* t : {&g.theta_q, &g.theta_w, &g.theta_v, &g.theta_b})
        for (double v : t->data) EXPECT_EQ(v, 0.0);
}

TEST(FcmGradients, SingleKeyCaseHasZeroQueryGradient) {
    Rng rng(37);
    auto p = random_params(3, 4, 1, 53);
    auto dbs = randmat(2, 3, rng);
    auto bank = randmat(1, 3, rng);  // xi = 1: output independent of queries
    auto g = fcm_gradients<double>(dbs, bank, p,
                                   [](const ag::Var<double>& bf) { return ag::mean_all(bf); });
    for (double v : g.theta_q.data) EXPECT_NEAR(v, 0.0, 1e-15);
    bool any_nonzero = false;
    for (double v : g.theta_v.data) any_nonzero = any_nonzero || v != 0.0;
    EXPECT_TRUE(any_nonzero);
}

TEST(FcmGradients, FiniteDifferenceAgreementAllFourMatrices) {
    Rng rng(41);
    for (int trial = 0; trial < 5; ++trial) {
        const int d = 4, dk = 4, heads = 2;
        auto p = random_params(d, dk, heads, 59 + static_cast<uint64_t>(trial));
        auto dbs = randmat(3, d, rng);
        auto bank = randmat(3, d, rng);
        auto rmat = Tensor<double>::randn({3, d}, rng);

        auto head = [&](const ag::Var<double>& bf) {
            return ag::mean_all(ag::mul(bf, ag::Var<double>::constant(rmat)));
        };
        auto tq = ag::Var<double>::leaf(p.theta_q, true);
        auto tw = ag::Var<double>::leaf(p.theta_w, true);
        auto tv = ag::Var<double>::leaf(p.theta_v, true);
        auto tb = ag::Var<double>::leaf(p.theta_b, true);
        ccad_test::check_gradients_fd({tq, tw, tv, tb}, [&] {
            auto bf = detail::fcm_graph(ag::Var<double>::constant(dbs), ag::Var<double>::constant(bank), tq,
                                        tw, tv, tb, heads);
            return head(bf);
        });
    }
}

TEST(BuildBatchSpace, CountsAndFingerprintCheck) {
    ExtractorConfig cfg;
    cfg.seed = 3;
    cfg.m = 8;
    cfg.d = 8;
    Rng rng(61);
    auto batch = Tensor<float>::randn({2, 3, 16, 16}, rng, 0.3f);
    auto dbs = build_batch_space(batch, cfg, cfg.fingerprint());
    EXPECT_EQ(dbs.zeta, 2 * 2 * 2);
    EXPECT_EQ(dbs.produced_by, cfg.fingerprint());

    EXPECT_THROW(build_batch_space(batch, cfg, "some-other-encoder"), ConfigError);

    // same image twice -> identical row blocks
    Tensor<float> dup({2, 3, 16, 16});
    for (int n = 0; n < 2; ++n)
        for (size_t i = 0; i < static_cast<size_t>(3 * 16 * 16); ++i)
            dup.data[static_cast<size_t>(n) * 3 * 16 * 16 + i] = batch.data[i];
    auto space = build_batch_space(dup, cfg);
    const int k = space.zeta / 2;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < 8; ++j) EXPECT_EQ(space.vectors.at(i, j), space.vectors.at(k + i, j));
}
