#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ccad/core/autograd.hpp"
#include "ccad/core/errors.hpp"
#include "ccad/core/rng.hpp"
#include "ccad/core/tensor.hpp"
#include "ccad/feature_bank.hpp"

namespace ccad {

// Features of the current batch, used as attention queries.
struct BatchFeatureSpace {
    Tensor<float> vectors;  // zeta x d
    int zeta = 0;
    std::string produced_by;
};

// The four learnable matrices of the Fine Compression Module plus the head
// layout. No biases: the mapping is pure matrix products around one
// softmax.
template <typename T>
struct AttentionParamsT {
    Tensor<T> theta_q;  // d x d_k
    Tensor<T> theta_w;  // d x d_k
    Tensor<T> theta_v;  // d x d_k
    Tensor<T> theta_b;  // d_k x d
    int heads = 4;
    int d_k = 64;

    static AttentionParamsT seeded(int d, int d_k, int heads, uint64_t seed) {
        if (d_k % heads != 0) throw ParamError("AttentionParams: d_k must be divisible by heads");
        Rng rng(mix_seed(seed, 0xFC11ULL));
        const T std_ = T(1) / std::sqrt(static_cast<T>(d));
        AttentionParamsT p;
        p.heads = heads;
        p.d_k = d_k;
        p.theta_q = Tensor<T>::randn({d, d_k}, rng, std_);
        p.theta_w = Tensor<T>::randn({d, d_k}, rng, std_);
        p.theta_v = Tensor<T>::randn({d, d_k}, rng, std_);
        p.theta_b = Tensor<T>::randn({d_k, d}, rng, std_);
        return p;
    }

    void validate(int d) const {
        if (d_k % heads != 0 || heads < 1) throw ParamError("AttentionParams: d_k must be divisible by heads");
        if (theta_q.shape != std::vector<int>{d, d_k} || theta_w.shape != std::vector<int>{d, d_k} ||
            theta_v.shape != std::vector<int>{d, d_k})
            throw ShapeError("AttentionParams: theta_Q/theta_W/theta_V must be d x d_k");
        if (theta_b.shape != std::vector<int>{d_k, d})
            throw ShapeError("AttentionParams: theta_B must be d_k x d");
        for (const auto* t : {&theta_q, &theta_w, &theta_v, &theta_b})
            if (!all_finite(*t)) throw ParamError("AttentionParams: non-finite entries");
    }
};

using AttentionParams = AttentionParamsT<float>;

struct FineFeatureBank {
    Tensor<float> vectors;  // zeta x d, independent of xi
};

namespace detail {

// Multi-head cross-attention graph shared by the plain forward and the
// gradient path. Scaling uses the per-head width d_k / heads.
template <typename T>
ag::Var<T> fcm_graph(const ag::Var<T>& dbs, const ag::Var<T>& bank, const ag::Var<T>& tq,
                     const ag::Var<T>& tw, const ag::Var<T>& tv, const ag::Var<T>& tb, int heads) {
    using ag::Var;
    const int zeta = dbs.val().dim(0);
    const int d = dbs.val().dim(1);
    const int xi = bank.val().dim(0);
    const int dk = tq.val().dim(1);
    if (bank.val().dim(1) != d)
        throw ShapeError("fcm: bank dimension " + bank.val().shape_str() + " disagrees with batch space d=" +
                         std::to_string(d));
    const int dh = dk / heads;

    auto split = [&](const ag::Var<T>& m, int rows) {
        // (rows, dk) -> (heads, rows, dh)
        return ag::permute(ag::reshape(m, {rows, heads, dh}), {1, 0, 2});
    };
    auto q = split(ag::matmul(dbs, tq), zeta);
    auto k = split(ag::matmul(bank, tw), xi);
    auto v = split(ag::matmul(bank, tv), xi);
    auto logits = ag::scale(ag::bmm(q, ag::permute(k, {0, 2, 1})),
                            T(1) / std::sqrt(static_cast<T>(dh)));
    auto attn = ag::softmax_last(logits);              // (heads, zeta, xi)
    auto ctx = ag::bmm(attn, v);                       // (heads, zeta, dh)
    auto merged = ag::reshape(ag::permute(ctx, {1, 0, 2}), {zeta, dk});
    return ag::matmul(merged, tb);                     // (zeta, d)
}

}  // namespace detail

// Plain-tensor forward pass: B_f = softmax(Q K^T / sqrt(d_k)) V theta_B.
template <typename T>
Tensor<T> fcm_forward_t(const Tensor<T>& dbs, const Tensor<T>& bank, const AttentionParamsT<T>& p) {
    p.validate(dbs.dim(1));
    ag::NoGradGuard ng;
    using V = ag::Var<T>;
    return detail::fcm_graph(V::constant(dbs), V::constant(bank), V::constant(p.theta_q),
                             V::constant(p.theta_w), V::constant(p.theta_v), V::constant(p.theta_b),
                             p.heads)
        .val();
}

inline FineFeatureBank fcm_forward(const BatchFeatureSpace& dbs, const CoarseFeatureBank& bank,
                                   const AttentionParams& p) {
    if (bank.xi < 1) throw ConfigError("fcm_forward: empty coarse bank");
    FineFeatureBank out;
    out.vectors = fcm_forward_t(dbs.vectors, bank.vectors, p);
    return out;
}

// Softmax weights per head, exposed for the row-stochasticity checks.
template <typename T>
Tensor<T> fcm_attention_weights(const Tensor<T>& dbs, const Tensor<T>& bank, const AttentionParamsT<T>& p) {
    p.validate(dbs.dim(1));
    ag::NoGradGuard ng;
    using V = ag::Var<T>;
    const int zeta = dbs.dim(0), xi = bank.dim(0);
    const int dh = p.d_k / p.heads;
    auto split = [&](const ag::Var<T>& m, int rows) {
        return ag::permute(ag::reshape(m, {rows, p.heads, dh}), {1, 0, 2});
    };
    auto q = split(ag::matmul(V::constant(dbs), V::constant(p.theta_q)), zeta);
    auto k = split(ag::matmul(V::constant(bank), V::constant(p.theta_w)), xi);
    auto logits = ag::scale(ag::bmm(q, ag::permute(k, {0, 2, 1})), T(1) / std::sqrt(static_cast<T>(dh)));
    return ag::softmax_last(logits).val();
}

template <typename T>
struct FcmGradients {
    Tensor<T> theta_q;
    Tensor<T> theta_w;
    Tensor<T> theta_v;
    Tensor<T> theta_b;
    T loss;
};

// Gradients of an arbitrary differentiable scalar head of B_f with respect
// to all four parameter matrices.
template <typename T>
FcmGradients<T> fcm_gradients(const Tensor<T>& dbs, const Tensor<T>& bank, const AttentionParamsT<T>& p,
                              const std::function<ag::Var<T>(const ag::Var<T>&)>& loss_head) {
    p.validate(dbs.dim(1));
    using V = ag::Var<T>;
    auto tq = V::leaf(p.theta_q, true);
    auto tw = V::leaf(p.theta_w, true);
    auto tv = V::leaf(p.theta_v, true);
    auto tb = V::leaf(p.theta_b, true);
    auto bf = detail::fcm_graph(V::constant(dbs), V::constant(bank), tq, tw, tv, tb, p.heads);
    auto loss = loss_head(bf);
    ag::backward(loss);
    FcmGradients<T> g;
    g.theta_q = tq.has_grad() ? tq.grad() : Tensor<T>::zeros(p.theta_q.shape);
    g.theta_w = tw.has_grad() ? tw.grad() : Tensor<T>::zeros(p.theta_w.shape);
    g.theta_v = tv.has_grad() ? tv.grad() : Tensor<T>::zeros(p.theta_v.shape);
    g.theta_b = tb.has_grad() ? tb.grad() : Tensor<T>::zeros(p.theta_b.shape);
    g.loss = loss.val().data[0];
    return g;
}

// Batch-wise feature space through the same encoder that built the bank.
// In CCAD(F) the two fingerprints must agree.
inline BatchFeatureSpace build_batch_space(const Tensor<float>& batch, const ExtractorConfig& encoder,
                                           const std::string& required_fingerprint = "") {
    if (!required_fingerprint.empty() && encoder.fingerprint() != required_fingerprint)
        throw ConfigError("build_batch_space: encoder fingerprint '" + encoder.fingerprint() +
                          "' does not match bank fingerprint '" + required_fingerprint + "'");
    auto space = extract_features(batch, encoder);
    BatchFeatureSpace out;
    out.vectors = std::move(space.vectors);
    out.zeta = out.vectors.dim(0);
    out.produced_by = space.fingerprint;
    return out;
}

// Trainable FCM: the same graph with parameters owned as autograd leaves.
class FineCompressionModule {
public:
    FineCompressionModule(int d, int d_k, int heads, uint64_t seed) : d_(d), heads_(heads), d_k_(d_k) {
        auto p = AttentionParamsT<float>::seeded(d, d_k, heads, seed);
        tq_ = ag::Var<float>::leaf(p.theta_q, true);
        tw_ = ag::Var<float>::leaf(p.theta_w, true);
        tv_ = ag::Var<float>::leaf(p.theta_v, true);
        tb_ = ag::Var<float>::leaf(p.theta_b, true);
    }

    ag::Var<float> forward(const ag::Var<float>& dbs, const ag::Var<float>& bank) const {
        return detail::fcm_graph(dbs, bank, tq_, tw_, tv_, tb_, heads_);
    }

    std::vector<std::pair<std::string, ag::Var<float>>> named_parameters() const {
        return {{"fcm.theta_q", tq_}, {"fcm.theta_w", tw_}, {"fcm.theta_v", tv_}, {"fcm.theta_b", tb_}};
    }

    AttentionParams params() const {
        AttentionParams p;
        p.theta_q = tq_.val();
        p.theta_w = tw_.val();
        p.theta_v = tv_.val();
        p.theta_b = tb_.val();
        p.heads = heads_;
        p.d_k = d_k_;
        return p;
    }

    int d() const { return d_; }
    int heads() const { return heads_; }
    int d_k() const { return d_k_; }

private:
    int d_;
    int heads_;
    int d_k_;
    ag::Var<float> tq_, tw_, tv_, tb_;
};

}  // namespace ccad
