#include "ccad/backbone.hpp"

#include <gtest/gtest.h>

#include "ccad/core/rng.hpp"
#include "test_util.hpp"

using namespace ccad;
using ag::Var;

namespace {

BackboneConfig tiny_config(Variant variant, bool zero_init_cross = true) {
    BackboneConfig cfg;
    cfg.variant = variant;
    cfg.in_channels = 3;
    cfg.widths = {4, 8};
    cfg.bank_dim = 5;
    cfg.heads = 2;
    cfg.time_dim = 8;
    cfg.seed = 77;
    cfg.zero_init_cross = zero_init_cross;
    return cfg;
}

Tensor<double> rand_images(int n, int c, int hw, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor<double>::randn({n, c, hw, hw}, rng, scale);
}

}  // namespace

TEST(GcBlocks, ZeroInitCrossIsBitIdentity) {
    ParamRegistry<double> reg;
    Rng rng(1);
    GCBlockV<double> v(reg, "v", 4, 4, 8, 5, 2, rng, true, /*zero_init_cross=*/true);
    auto x = rand_images(2, 4, 8, 2);
    auto bank = Tensor<double>::randn({6, 5}, rng);
    auto out = gcb_forward(v, x, bank);
    EXPECT_EQ(out.data, x.data);

    ParamRegistry<double> reg2;
    GCBlockFC<double> fc(reg2, "fc", 4, 5, 2, rng, true, /*zero_init_cross=*/true);
    auto out2 = gcb_forward(fc, x, bank);
    EXPECT_EQ(out2.data, x.data);
}

TEST(GcBlocks, EmptyBankSkipsConditioning) {
    ParamRegistry<double> reg;
    Rng rng(3);
    GCBlockV<double> v(reg, "v", 4, 4, 8, 5, 2, rng, true, /*zero_init_cross=*/false);
    auto x = rand_images(1, 4, 8, 4);
    auto out = gcb_forward(v, x, Tensor<double>({0, 5}));
    EXPECT_EQ(out.data, x.data);
}

TEST(GcBlocks, BankRowPermutationInvariance) {
    ParamRegistry<double> reg;
    Rng rng(5);
    GCBlockV<double> v(reg, "v", 4, 4, 8, 5, 2, rng, true, /*zero_init_cross=*/false);
    auto x = rand_images(2, 4, 8, 6);
    Rng brng(7);
    auto bank = Tensor<double>::randn({5, 5}, brng);
    Tensor<double> perm({5, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) perm.at(i, j) = bank.at(4 - i, j);
    auto a = gcb_forward(v, x, bank);
    auto b = gcb_forward(v, x, perm);
    EXPECT_LT(max_abs_diff(a, b), 1e-6);
}

// The cross-attention inside a GCB is the same map the FCM oracle
// evaluates: queries from tokens, keys/values from bank rows.
TEST(GcBlocks, CrossAttentionMatchesDenseOracle) {
    ParamRegistry<double> reg;
    Rng rng(9);
    const int C = 4, S = 3;
    GCBlockV<double> v(reg, "v", C, C, 8, C, 2, rng, true, /*zero_init_cross=*/false);
    Rng drng(11);
    auto tokens = Tensor<double>::randn({1, 6, C}, drng);
    auto bank = Tensor<double>::randn({S, C}, drng);

    ag::NoGradGuard ng;
    auto term = v.cross_attn(Var<double>::constant(tokens), Var<double>::constant(bank));

    Tensor<double> tokens2d({6, C}, tokens.data);
    auto oracle = ccad_test::dense_attention_oracle(tokens2d, bank, v.cross_attn.q.w.val(),
                                                    v.cross_attn.k.w.val(), v.cross_attn.v.w.val(),
                                                    v.cross_attn.out.w.val(), 2);
    Tensor<double> got({6, C}, term.val().data);
    EXPECT_LT(max_abs_diff(got, oracle), 1e-9);
}

TEST(DenoiserV, ZeroInitConditioningIsInertAtInit) {
    DenoiserModel<double> model(tiny_config(Variant::V));
    auto x = rand_images(2, 3, 8, 13);
    Rng rng(15);
    auto bank_a = Tensor<double>::randn({4, 5}, rng);
    auto bank_b = Tensor<double>::randn({7, 5}, rng);
    auto ea = denoise_eps(model, x, 3, nullptr, bank_a);
    auto eb = denoise_eps(model, x, 3, nullptr, bank_b);
    EXPECT_EQ(ea.data, eb.data);
    EXPECT_EQ(ea.shape, x.shape);
}

TEST(DenoiserV, DeterministicAcrossInstances) {
    DenoiserModel<double> m1(tiny_config(Variant::V, false));
    DenoiserModel<double> m2(tiny_config(Variant::V, false));
    auto x = rand_images(1, 3, 8, 17);
    Rng rng(19);
    auto bank = Tensor<double>::randn({4, 5}, rng);
    auto e1 = denoise_eps(m1, x, 2, nullptr, bank);
    auto e2 = denoise_eps(m2, x, 2, nullptr, bank);
    EXPECT_EQ(e1.data, e2.data);
}

TEST(DenoiserV, ShapeTracksInputAcrossSizes) {
    for (int hw : {16, 32, 64}) {
        auto cfg = tiny_config(Variant::V);
        cfg.widths = {4, 8, 8};
        DenoiserModel<double> model(cfg);
        auto x = rand_images(1, 3, hw, 21);
        Rng rng(23);
        auto bank = Tensor<double>::randn({3, 5}, rng);
        auto eps = denoise_eps(model, x, 1, nullptr, bank);
        EXPECT_EQ(eps.shape, x.shape);
    }
}

TEST(DenoiserFC, RequiresLocalCondition) {
    DenoiserModel<double> fc(tiny_config(Variant::C));
    DenoiserModel<double> v(tiny_config(Variant::V));
    auto z = rand_images(1, 3, 8, 25);
    Rng rng(27);
    auto bank = Tensor<double>::randn({3, 5}, rng);
    EXPECT_THROW(denoise_eps(fc, z, 1, nullptr, bank), ConfigError);
    auto cond = rand_images(1, 3, 8, 29);
    EXPECT_THROW(denoise_eps(v, z, 1, &cond, bank), ConfigError);
    auto out = denoise_eps(fc, z, 1, &cond, bank);
    EXPECT_EQ(out.shape, z.shape);
}

TEST(DenoiserFC, FrozenTrunkExcludedFromTrainables) {
    DenoiserModel<double> model(tiny_config(Variant::F));
    size_t frozen = 0, trainable = 0;
    for (const auto& e : model.params().entries()) {
        if (e.trainable)
            trainable += e.var.val().numel();
        else
            frozen += e.var.val().numel();
        const bool is_sd = e.name.rfind("sd", 0) == 0;  // sdeb/sdmb/sd.time
        EXPECT_EQ(e.trainable, !is_sd) << e.name;
    }
    EXPECT_GT(frozen, 0u);
    EXPECT_GT(trainable, 0u);
    const uint64_t h = model.frozen_hash();
    auto x = rand_images(1, 3, 8, 31);
    Rng rng(33);
    auto bank = Tensor<double>::randn({3, 5}, rng);
    auto cond = rand_images(1, 3, 8, 35);
    (void)denoise_eps(model, x, 1, &cond, bank);
    EXPECT_EQ(model.frozen_hash(), h);  // forward never mutates
}

TEST(DenoiserV, GradientFlowAndFiniteDifferenceSpotChecks) {
    auto cfg = tiny_config(Variant::V, /*zero_init_cross=*/false);
    DenoiserModel<double> model(cfg);
    auto x = rand_images(1, 3, 8, 37, 0.5);
    Rng rng(39);
    auto bank_t = Tensor<double>::randn({3, 5}, rng);
    auto rmat = Tensor<double>::randn({1, 3, 8, 8}, rng);

    auto loss_fn = [&]() {
        auto out = model.forward(Var<double>::constant(x), {2}, Var<double>(),
                                 Var<double>::constant(bank_t));
        return ag::mean_all(ag::mul(out, Var<double>::constant(rmat)));
    };

    for (auto& p : model.params().trainable()) p.zero_grad();
    auto loss = loss_fn();
    ag::backward(loss);

    auto trainables = model.params().trainable();
    size_t with_grad = 0;
    for (auto& p : trainables) {
        if (p.has_grad()) {
            for (double g : p.grad().data) ASSERT_TRUE(std::isfinite(g));
            ++with_grad;
        }
    }
    EXPECT_EQ(with_grad, trainables.size());

    // finite-difference spot checks on 10 random scalar parameters
    Rng pick(41);
    const double h = 1e-5;
    for (int k = 0; k < 10; ++k) {
        auto& p = trainables[static_cast<size_t>(pick.uniform_int(0, static_cast<int>(trainables.size()) - 1))];
        const size_t idx = static_cast<size_t>(pick.uniform_int(0, static_cast<int>(p.val().numel()) - 1));
        const double orig = p.mutable_val().data[idx];
        p.mutable_val().data[idx] = orig + h;
        double fp;
        {
            ag::NoGradGuard ng;
            fp = loss_fn().val().data[0];
        }
        p.mutable_val().data[idx] = orig - h;
        double fm;
        {
            ag::NoGradGuard ng;
            fm = loss_fn().val().data[0];
        }
        p.mutable_val().data[idx] = orig;
        const double numeric = (fp - fm) / (2 * h);
        const double analytic = p.grad().data[idx];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
        EXPECT_LT(std::abs(numeric - analytic) / denom, 1e-3)
            << "param spot " << k << " analytic=" << analytic << " numeric=" << numeric;
    }
}

TEST(DenoiserFC, GradientsReachConditionBranchAndDecoder) {
    auto cfg = tiny_config(Variant::C, /*zero_init_cross=*/false);
    DenoiserModel<double> model(cfg);
    auto z = rand_images(1, 3, 8, 43, 0.5);
    auto cond = rand_images(1, 3, 8, 45, 0.5);
    Rng rng(47);
    auto bank_t = Tensor<double>::randn({3, 5}, rng);

    for (auto& p : model.params().trainable()) p.zero_grad();
    auto out = model.forward(Var<double>::constant(z), {1}, Var<double>::constant(cond),
                             Var<double>::constant(bank_t));
    ag::backward(ag::mse(out, Var<double>::constant(Tensor<double>::zeros(z.shape))));

    for (const auto& e : model.params().entries()) {
        auto var = e.var;  // shared handle
        if (!e.trainable) {
            EXPECT_FALSE(var.has_grad()) << e.name;
            continue;
        }
        ASSERT_TRUE(var.has_grad()) << e.name;
        for (double g : var.grad().data) ASSERT_TRUE(std::isfinite(g)) << e.name;
    }
}

TEST(DenoiserV, NoNanInfOverRandomTrials) {
    DenoiserModel<float> model(tiny_config(Variant::V, false));
    Rng rng(49);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<float> x({1, 3, 8, 8});
        for (auto& v : x.data) v = static_cast<float>(rng.uniform() * 6.0 - 3.0);
        Tensor<float> bank({2, 5});
        for (auto& v : bank.data) v = static_cast<float>(rng.uniform() * 6.0 - 3.0);
        const int t = rng.uniform_int(1, 1000);
        auto eps = denoise_eps(model, x, t, nullptr, bank);
        ASSERT_TRUE(all_finite(eps)) << "trial " << trial;
    }
}

TEST(LatentCodec, IdentityModeIsExactInversePair) {
    LatentCodec<double> codec;
    auto x = rand_images(2, 3, 8, 51);
    auto z = latent_encode(x, codec);
    EXPECT_EQ(z.data, x.data);
    auto back = latent_decode(z, codec);
    EXPECT_EQ(back.data, x.data);

    auto zero = Tensor<double>::zeros({1, 3, 4, 4});
    EXPECT_EQ(latent_decode(latent_encode(zero, codec), codec).data, zero.data);
}

TEST(LatentCodec, TinyAeShapesHalveAndRestore) {
    LatentCodec<double> codec(CodecMode::TinyConvAe, 5);
    auto x = rand_images(1, 3, 8, 53);
    auto z = latent_encode(x, codec);
    EXPECT_EQ(z.shape, (std::vector<int>{1, 4, 4, 4}));
    auto back = latent_decode(z, codec);
    EXPECT_EQ(back.shape, x.shape);
}

TEST(TimestepEmbedding, DistinctAndFinite) {
    auto e1 = nn::timestep_embedding<double>({1, 500, 1000}, 16);
    EXPECT_TRUE(all_finite(e1));
    double diff = 0;
    for (int j = 0; j < 16; ++j) diff += std::abs(e1.at(0, j) - e1.at(1, j));
    EXPECT_GT(diff, 0.1);
}
