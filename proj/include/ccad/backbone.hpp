#pragma once

#include <cmath>
#include <memory>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "ccad/core/autograd.hpp"
#include "ccad/core/errors.hpp"
#include "ccad/core/rng.hpp"
#include "ccad/core/tensor.hpp"

namespace ccad {

enum class Variant { F, C, V };

inline char variant_tag(Variant v) { return v == Variant::F ? 'F' : v == Variant::C ? 'C' : 'V'; }
inline Variant variant_from_tag(char c) {
    switch (c) {
        case 'F': return Variant::F;
        case 'C': return Variant::C;
        case 'V': return Variant::V;
        default: throw ParamError(std::string("unknown variant tag '") + c + "'");
    }
}

// Named parameter table. Insertion order is the checkpoint order; frozen
// entries are excluded from optimization and hash-checked across training.
template <typename T>
class ParamRegistry {
public:
    ag::Var<T> create(const std::string& name, Tensor<T> init, bool trainable) {
        auto v = ag::Var<T>::leaf(std::move(init), trainable);
        entries_.push_back({name, v, trainable});
        return v;
    }

    struct Entry {
        std::string name;
        ag::Var<T> var;
        bool trainable;
    };

    const std::vector<Entry>& entries() const { return entries_; }

    std::vector<ag::Var<T>> trainable() const {
        std::vector<ag::Var<T>> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.var);
        return out;
    }

    size_t trainable_count() const {
        size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.var.val().numel();
        return n;
    }

    uint64_t frozen_hash() const {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& e : entries_) {
            if (e.trainable) continue;
            h = fnv1a64(e.name.data(), e.name.size(), h);
            h = fnv1a64(e.var.val().data.data(), e.var.val().numel() * sizeof(T), h);
        }
        return h;
    }

private:
    std::vector<Entry> entries_;
};

namespace nn {

inline int norm_groups(int channels, int preferred = 8) {
    for (int g = std::min(preferred, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

template <typename T>
struct Conv2dLayer {
    ag::Var<T> w, b;
    int pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int k, int pad_,
                Rng& rng, bool trainable, bool zero_init = false)
        : pad(pad_) {
        const T std_ = zero_init ? T(0) : T(1) / std::sqrt(static_cast<T>(cin * k * k));
        w = reg.create(name + ".w", zero_init ? Tensor<T>::zeros({cout, cin, k, k})
                                              : Tensor<T>::randn({cout, cin, k, k}, rng, std_),
                       trainable);
        b = reg.create(name + ".b", Tensor<T>::zeros({cout}), trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv2d(x, w, b, pad); }
};

template <typename T>
struct LinearLayer {
    ag::Var<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, Rng& rng,
                bool trainable, bool zero_init = false) {
        const T std_ = zero_init ? T(0) : T(1) / std::sqrt(static_cast<T>(cin));
        w = reg.create(name + ".w",
                       zero_init ? Tensor<T>::zeros({cin, cout}) : Tensor<T>::randn({cin, cout}, rng, std_),
                       trainable);
        b = reg.create(name + ".b", Tensor<T>::zeros({cout}), trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
};

template <typename T>
struct GroupNormLayer {
    ag::Var<T> gamma, beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamRegistry<T>& reg, const std::string& name, int channels, bool trainable) {
        groups = norm_groups(channels);
        gamma = reg.create(name + ".gamma", Tensor<T>::full({channels}, T(1)), trainable);
        beta = reg.create(name + ".beta", Tensor<T>::zeros({channels}), trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::group_norm(x, groups, gamma, beta); }
};

template <typename T>
struct LayerNormLayer {
    ag::Var<T> gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamRegistry<T>& reg, const std::string& name, int dim, bool trainable) {
        gamma = reg.create(name + ".gamma", Tensor<T>::full({dim}, T(1)), trainable);
        beta = reg.create(name + ".beta", Tensor<T>::zeros({dim}), trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::layer_norm(x, gamma, beta); }
};

// (N,C,H,W) <-> (N, H*W, C)
template <typename T>
ag::Var<T> to_tokens(const ag::Var<T>& x) {
    const auto& s = x.val().shape;
    return ag::permute(ag::reshape(x, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

template <typename T>
ag::Var<T> from_tokens(const ag::Var<T>& t, int h, int w) {
    const auto& s = t.val().shape;
    return ag::reshape(ag::permute(t, {0, 2, 1}), {s[0], s[2], h, w});
}

// (N, Tok, C) -> (N*heads, Tok, C/heads)
template <typename T>
ag::Var<T> split_heads(const ag::Var<T>& t, int heads) {
    const auto& s = t.val().shape;
    const int dh = s[2] / heads;
    return ag::reshape(ag::permute(ag::reshape(t, {s[0], s[1], heads, dh}), {0, 2, 1, 3}),
                       {s[0] * heads, s[1], dh});
}

template <typename T>
ag::Var<T> merge_heads(const ag::Var<T>& t, int batch, int heads) {
    const auto& s = t.val().shape;  // (batch*heads, Tok, dh)
    return ag::reshape(ag::permute(ag::reshape(t, {batch, heads, s[1], s[2]}), {0, 2, 1, 3}),
                       {batch, s[1], heads * s[2]});
}

template <typename T>
ag::Var<T> scaled_dot_attention(const ag::Var<T>& q, const ag::Var<T>& k, const ag::Var<T>& v) {
    const int dh = q.val().shape.back();
    auto logits = ag::scale(ag::bmm(q, ag::permute(k, {0, 2, 1})), T(1) / std::sqrt(static_cast<T>(dh)));
    return ag::bmm(ag::softmax_last(logits), v);
}

// Self-attention over token sequences, with residual outside.
template <typename T>
struct TokenSelfAttention {
    LinearLayer<T> q, k, v, out;
    int heads = 1;

    TokenSelfAttention() = default;
    TokenSelfAttention(ParamRegistry<T>& reg, const std::string& name, int dim, int heads_, Rng& rng,
                       bool trainable)
        : heads(heads_) {
        q = LinearLayer<T>(reg, name + ".q", dim, dim, rng, trainable);
        k = LinearLayer<T>(reg, name + ".k", dim, dim, rng, trainable);
        v = LinearLayer<T>(reg, name + ".v", dim, dim, rng, trainable);
        out = LinearLayer<T>(reg, name + ".out", dim, dim, rng, trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& tokens) const {
        const int n = tokens.val().dim(0);
        auto qh = split_heads(q(tokens), heads);
        auto kh = split_heads(k(tokens), heads);
        auto vh = split_heads(v(tokens), heads);
        return out(merge_heads(scaled_dot_attention(qh, kh, vh), n, heads));
    }
};

// Cross-attention from tokens (queries) to bank rows (keys/values). The
// output projection is zero-initialized so the block starts as identity
// under its residual; an empty bank makes the term vanish entirely.
template <typename T>
struct BankCrossAttention {
    LinearLayer<T> q, k, v, out;
    int heads = 1;

    BankCrossAttention() = default;
    BankCrossAttention(ParamRegistry<T>& reg, const std::string& name, int dim, int bank_dim, int heads_,
                       Rng& rng, bool trainable, bool zero_init_out)
        : heads(heads_) {
        q = LinearLayer<T>(reg, name + ".q", dim, dim, rng, trainable);
        k = LinearLayer<T>(reg, name + ".k", bank_dim, dim, rng, trainable);
        v = LinearLayer<T>(reg, name + ".v", bank_dim, dim, rng, trainable);
        out = LinearLayer<T>(reg, name + ".out", dim, dim, rng, trainable, zero_init_out);
    }

    // tokens (N,Tok,C); bank (S,bank_dim). Returns the additive term.
    ag::Var<T> operator()(const ag::Var<T>& tokens, const ag::Var<T>& bank) const {
        const int n = tokens.val().dim(0);
        auto qh = split_heads(q(tokens), heads);            // (N*h, Tok, dh)
        // bank keys/values shared across the batch: (h, S, dh)
        const int s = bank.val().dim(0);
        auto kb = ag::permute(ag::reshape(ag::linear(bank, k.w, k.b), {s, heads, k.w.val().dim(1) / heads}),
                              {1, 0, 2});
        auto vb = ag::permute(ag::reshape(ag::linear(bank, v.w, v.b), {s, heads, v.w.val().dim(1) / heads}),
                              {1, 0, 2});
        return out(merge_heads(scaled_dot_attention(qh, kb, vb), n, heads));
    }
};

template <typename T>
struct ResBlock {
    GroupNormLayer<T> norm1, norm2;
    Conv2dLayer<T> conv1, conv2;
    LinearLayer<T> emb;
    Conv2dLayer<T> shortcut;
    bool has_shortcut = false;

    ResBlock() = default;
    ResBlock(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int time_dim, Rng& rng,
             bool trainable) {
        norm1 = GroupNormLayer<T>(reg, name + ".norm1", cin, trainable);
        conv1 = Conv2dLayer<T>(reg, name + ".conv1", cin, cout, 3, 1, rng, trainable);
        emb = LinearLayer<T>(reg, name + ".emb", time_dim, cout, rng, trainable);
        norm2 = GroupNormLayer<T>(reg, name + ".norm2", cout, trainable);
        conv2 = Conv2dLayer<T>(reg, name + ".conv2", cout, cout, 3, 1, rng, trainable);
        has_shortcut = cin != cout;
        if (has_shortcut) shortcut = Conv2dLayer<T>(reg, name + ".shortcut", cin, cout, 1, 0, rng, trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& temb) const {
        auto h = conv1(ag::silu(norm1(x)));
        h = ag::add_chan(h, emb(ag::silu(temb)));
        h = conv2(ag::silu(norm2(h)));
        return ag::add(h, has_shortcut ? shortcut(x) : x);
    }
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Global feature Conditioned Blocks

// Fig-3(a) style: ResBlock -> spatial self-attention -> bank cross-attention,
// each attention under a pre-norm residual.
template <typename T>
struct GCBlockV {
    nn::ResBlock<T> res;
    nn::GroupNormLayer<T> self_norm, cross_norm;
    nn::TokenSelfAttention<T> self_attn;
    nn::BankCrossAttention<T> cross_attn;

    GCBlockV() = default;
    GCBlockV(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int time_dim, int bank_dim,
             int heads, Rng& rng, bool trainable, bool zero_init_cross) {
        res = nn::ResBlock<T>(reg, name + ".res", cin, cout, time_dim, rng, trainable);
        self_norm = nn::GroupNormLayer<T>(reg, name + ".self_norm", cout, trainable);
        self_attn = nn::TokenSelfAttention<T>(reg, name + ".self", cout, heads, rng, trainable);
        cross_norm = nn::GroupNormLayer<T>(reg, name + ".cross_norm", cout, trainable);
        cross_attn = nn::BankCrossAttention<T>(reg, name + ".cross", cout, bank_dim, heads, rng, trainable,
                                               zero_init_cross);
    }

    ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& temb, const ag::Var<T>& bank) const {
        auto h = res(x, temb);
        const int hh = h.val().dim(2), ww = h.val().dim(3);
        auto t = nn::to_tokens(self_norm(h));
        h = ag::add(h, nn::from_tokens(self_attn(t), hh, ww));
        h = cross_forward(h, bank);
        return h;
    }

    // Residual bank conditioning alone: x + cross(norm(x), bank); empty
    // bank or zero-init projection leaves x unchanged.
    ag::Var<T> cross_forward(const ag::Var<T>& x, const ag::Var<T>& bank) const {
        if (!bank.defined() || bank.val().dim(0) == 0) return x;
        const int hh = x.val().dim(2), ww = x.val().dim(3);
        auto t = nn::to_tokens(cross_norm(x));
        return ag::add(x, nn::from_tokens(cross_attn(t, bank), hh, ww));
    }
};

// Fig-3(b) style: the transformer block whose text cross-attention is
// replaced by bank cross-attention. Operates on token sequences.
template <typename T>
struct GCBlockFC {
    nn::LayerNormLayer<T> ln1, ln2, ln3;
    nn::TokenSelfAttention<T> self_attn;
    nn::BankCrossAttention<T> cross_attn;
    nn::LinearLayer<T> ff1, ff2;

    GCBlockFC() = default;
    GCBlockFC(ParamRegistry<T>& reg, const std::string& name, int dim, int bank_dim, int heads, Rng& rng,
              bool trainable, bool zero_init_cross) {
        ln1 = nn::LayerNormLayer<T>(reg, name + ".ln1", dim, trainable);
        self_attn = nn::TokenSelfAttention<T>(reg, name + ".self", dim, heads, rng, trainable);
        ln2 = nn::LayerNormLayer<T>(reg, name + ".ln2", dim, trainable);
        cross_attn = nn::BankCrossAttention<T>(reg, name + ".cross", dim, bank_dim, heads, rng, trainable,
                                               zero_init_cross);
        ln3 = nn::LayerNormLayer<T>(reg, name + ".ln3", dim, trainable);
        ff1 = nn::LinearLayer<T>(reg, name + ".ff1", dim, dim * 2, rng, trainable);
        ff2 = nn::LinearLayer<T>(reg, name + ".ff2", dim * 2, dim, rng, trainable);
    }

    ag::Var<T> operator()(const ag::Var<T>& x_spatial, const ag::Var<T>& bank) const {
        const int hh = x_spatial.val().dim(2), ww = x_spatial.val().dim(3);
        auto t = nn::to_tokens(x_spatial);
        t = ag::add(t, self_attn(ln1(t)));
        t = cross_tokens(t, bank);
        t = ag::add(t, ff2(ag::silu(ff1(ln3(t)))));
        return nn::from_tokens(t, hh, ww);
    }

    ag::Var<T> cross_tokens(const ag::Var<T>& tokens, const ag::Var<T>& bank) const {
        if (!bank.defined() || bank.val().dim(0) == 0) return tokens;
        return ag::add(tokens, cross_attn(ln2(tokens), bank));
    }

    // Spatial-input view of the bank-conditioning residual, mirroring GCBlockV.
    ag::Var<T> cross_forward(const ag::Var<T>& x_spatial, const ag::Var<T>& bank) const {
        const int hh = x_spatial.val().dim(2), ww = x_spatial.val().dim(3);
        return nn::from_tokens(cross_tokens(nn::to_tokens(x_spatial), bank), hh, ww);
    }
};

// Spec-level op: residual bank conditioning of spatial features.
template <typename T>
Tensor<T> gcb_forward(const GCBlockV<T>& block, const Tensor<T>& features, const Tensor<T>& bank_tokens) {
    ag::NoGradGuard ng;
    return block
        .cross_forward(ag::Var<T>::constant(features),
                       bank_tokens.numel() ? ag::Var<T>::constant(bank_tokens) : ag::Var<T>())
        .val();
}

template <typename T>
Tensor<T> gcb_forward(const GCBlockFC<T>& block, const Tensor<T>& features, const Tensor<T>& bank_tokens) {
    ag::NoGradGuard ng;
    return block
        .cross_forward(ag::Var<T>::constant(features),
                       bank_tokens.numel() ? ag::Var<T>::constant(bank_tokens) : ag::Var<T>())
        .val();
}

// ---------------------------------------------------------------------------

struct BackboneConfig {
    Variant variant = Variant::V;
    int in_channels = 3;
    std::vector<int> widths = {16, 32, 48, 64};  // one per resolution level
    int bank_dim = 64;
    int heads = 4;
    int time_dim = 64;
    uint64_t seed = 0;
    bool zero_init_cross = true;

    void validate() const {
        if (widths.empty()) throw ParamError("BackboneConfig: widths must be non-empty");
        for (int w : widths)
            if (w < 1) throw ParamError("BackboneConfig: widths must be positive");
        if (in_channels < 1 || bank_dim < 1 || heads < 1 || time_dim < 1)
            throw ParamError("BackboneConfig: dimensions must be positive");
        for (int w : widths)
            if (w % heads != 0) throw ParamError("BackboneConfig: widths must be divisible by heads");
    }

    // Bank conditioning sits at the three coarsest resolutions.
    bool gcb_at(int level) const {
        return level >= std::max(0, static_cast<int>(widths.size()) - 3);
    }
};

namespace nn {

// sinusoidal position features for integer timesteps
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor<T> out({static_cast<int>(ts.size()), dim});
    for (size_t n = 0; n < ts.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            out.at(static_cast<int>(n), i) = static_cast<T>(std::sin(ts[n] * freq));
            out.at(static_cast<int>(n), half + i) = static_cast<T>(std::cos(ts[n] * freq));
        }
        if (dim % 2) out.at(static_cast<int>(n), dim - 1) = T(1);
    }
    return out;
}

}  // namespace nn

// Fully trainable pixel-space UNet with GCBlockV conditioning (CCAD(V)).
template <typename T>
class DeskUNetV {
public:
    DeskUNetV(const BackboneConfig& cfg, ParamRegistry<T>& reg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, 0xB4C6B0EULL));
        const int L = static_cast<int>(cfg.widths.size());
        time1_ = nn::LinearLayer<T>(reg, "time.fc1", cfg.time_dim, cfg.time_dim, rng, true);
        time2_ = nn::LinearLayer<T>(reg, "time.fc2", cfg.time_dim, cfg.time_dim, rng, true);
        stem_ = nn::Conv2dLayer<T>(reg, "stem", cfg.in_channels, cfg.widths[0], 3, 1, rng, true);
        for (int l = 0; l < L; ++l) {
            const int cin = l == 0 ? cfg.widths[0] : cfg.widths[static_cast<size_t>(l) - 1];
            const int cout = cfg.widths[static_cast<size_t>(l)];
            if (cfg.gcb_at(l)) {
                enc_gcb_.emplace_back(reg, "enc" + std::to_string(l), cin, cout, cfg.time_dim, cfg.bank_dim,
                                      cfg.heads, rng, true, cfg.zero_init_cross);
                enc_res_.emplace_back();
            } else {
                enc_res_.emplace_back(reg, "enc" + std::to_string(l), cin, cout, cfg.time_dim, rng, true);
                enc_gcb_.emplace_back();
            }
        }
        const int cw = cfg.widths.back();
        mid_res1_ = nn::ResBlock<T>(reg, "mid.res1", cw, cw, cfg.time_dim, rng, true);
        mid_gcb_ = GCBlockV<T>(reg, "mid.gcb", cw, cw, cfg.time_dim, cfg.bank_dim, cfg.heads, rng, true,
                               cfg.zero_init_cross);
        mid_res2_ = nn::ResBlock<T>(reg, "mid.res2", cw, cw, cfg.time_dim, rng, true);
        for (int l = L - 1; l >= 0; --l) {
            const int skip_w = cfg.widths[static_cast<size_t>(l)];
            const int cin = (l == L - 1 ? cw : cfg.widths[static_cast<size_t>(l) + 1]) + skip_w;
            const int cout = skip_w;
            if (cfg.gcb_at(l)) {
                dec_gcb_.emplace_back(reg, "dec" + std::to_string(l), cin, cout, cfg.time_dim, cfg.bank_dim,
                                      cfg.heads, rng, true, cfg.zero_init_cross);
                dec_res_.emplace_back();
            } else {
                dec_res_.emplace_back(reg, "dec" + std::to_string(l), cin, cout, cfg.time_dim, rng, true);
                dec_gcb_.emplace_back();
            }
        }
        out_norm_ = nn::GroupNormLayer<T>(reg, "out.norm", cfg.widths[0], true);
        out_conv_ = nn::Conv2dLayer<T>(reg, "out.conv", cfg.widths[0], cfg.in_channels, 3, 1, rng, true,
                                       /*zero_init=*/false);
    }

    ag::Var<T> forward(const ag::Var<T>& x, const std::vector<int>& ts, const ag::Var<T>& bank) const {
        const int L = static_cast<int>(cfg_.widths.size());
        auto temb = ag::Var<T>::constant(nn::timestep_embedding<T>(expand_ts(ts, x.val().dim(0)), cfg_.time_dim));
        temb = time2_(ag::silu(time1_(temb)));

        auto h = stem_(x);
        std::vector<ag::Var<T>> skips;
        for (int l = 0; l < L; ++l) {
            if (l > 0) h = ag::avg_pool2(h);
            h = cfg_.gcb_at(l) ? enc_gcb_[static_cast<size_t>(l)](h, temb, bank)
                               : enc_res_[static_cast<size_t>(l)](h, temb);
            skips.push_back(h);
        }
        h = mid_res1_(h, temb);
        h = mid_gcb_(h, temb, bank);
        h = mid_res2_(h, temb);
        for (int i = 0; i < L; ++i) {
            const int l = L - 1 - i;
            h = ag::concat_dim1(h, skips[static_cast<size_t>(l)]);
            h = cfg_.gcb_at(l) ? dec_gcb_[static_cast<size_t>(i)](h, temb, bank)
                               : dec_res_[static_cast<size_t>(i)](h, temb);
            if (l > 0) h = ag::upsample_nearest2(h);
        }
        return out_conv_(ag::silu(out_norm_(h)));
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    static std::vector<int> expand_ts(const std::vector<int>& ts, int n) {
        if (static_cast<int>(ts.size()) == n) return ts;
        if (ts.size() == 1) return std::vector<int>(static_cast<size_t>(n), ts[0]);
        throw ShapeError("forward: timestep count must be 1 or batch size");
    }

    BackboneConfig cfg_;
    nn::LinearLayer<T> time1_, time2_;
    nn::Conv2dLayer<T> stem_;
    std::vector<nn::ResBlock<T>> enc_res_;
    std::vector<GCBlockV<T>> enc_gcb_;
    nn::ResBlock<T> mid_res1_, mid_res2_;
    GCBlockV<T> mid_gcb_;
    std::vector<nn::ResBlock<T>> dec_res_;
    std::vector<GCBlockV<T>> dec_gcb_;
    nn::GroupNormLayer<T> out_norm_;
    nn::Conv2dLayer<T> out_conv_;
};

// Latent-space model for CCAD(F)/CCAD(C): a frozen stable-diffusion-shaped
// trunk (SDEB encoder + SDMB middle), a trainable condition branch (GCEB)
// fed by the local condition through zero convolutions, and a trainable
// GCDB decoder whose blocks cross-attend to the bank.
template <typename T>
class DeskUNetFC {
public:
    DeskUNetFC(const BackboneConfig& cfg, ParamRegistry<T>& reg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, 0xFCFCULL));
        const int L = static_cast<int>(cfg.widths.size());

        // frozen trunk
        time1_ = nn::LinearLayer<T>(reg, "sd.time.fc1", cfg.time_dim, cfg.time_dim, rng, false);
        time2_ = nn::LinearLayer<T>(reg, "sd.time.fc2", cfg.time_dim, cfg.time_dim, rng, false);
        stem_ = nn::Conv2dLayer<T>(reg, "sdeb.stem", cfg.in_channels, cfg.widths[0], 3, 1, rng, false);
        for (int l = 0; l < L; ++l) {
            const int cin = l == 0 ? cfg.widths[0] : cfg.widths[static_cast<size_t>(l) - 1];
            sdeb_.emplace_back(reg, "sdeb" + std::to_string(l), cin, cfg.widths[static_cast<size_t>(l)],
                               cfg.time_dim, rng, false);
        }
        const int cw = cfg.widths.back();
        sdmb_res1_ = nn::ResBlock<T>(reg, "sdmb.res1", cw, cw, cfg.time_dim, rng, false);
        sdmb_norm_ = nn::GroupNormLayer<T>(reg, "sdmb.norm", cw, false);
        sdmb_attn_ = nn::TokenSelfAttention<T>(reg, "sdmb.self", cw, cfg.heads, rng, false);
        sdmb_res2_ = nn::ResBlock<T>(reg, "sdmb.res2", cw, cw, cfg.time_dim, rng, false);

        // trainable condition branch
        hint_conv_ = nn::Conv2dLayer<T>(reg, "gceb.hint", 3, cfg.widths[0], 3, 1, rng, true);
        hint_zero_ = nn::Conv2dLayer<T>(reg, "gceb.hint_zero", cfg.widths[0], cfg.widths[0], 1, 0, rng, true,
                                        /*zero_init=*/true);
        ctrl_stem_ = nn::Conv2dLayer<T>(reg, "gceb.stem", cfg.in_channels, cfg.widths[0], 3, 1, rng, true);
        for (int l = 0; l < L; ++l) {
            const int cin = l == 0 ? cfg.widths[0] : cfg.widths[static_cast<size_t>(l) - 1];
            const int cout = cfg.widths[static_cast<size_t>(l)];
            gceb_res_.emplace_back(reg, "gceb" + std::to_string(l) + ".res", cin, cout, cfg.time_dim, rng,
                                   true);
            if (cfg.gcb_at(l))
                gceb_gcb_.emplace_back(reg, "gceb" + std::to_string(l) + ".gcb", cout, cfg.bank_dim,
                                       cfg.heads, rng, true, cfg.zero_init_cross);
            else
                gceb_gcb_.emplace_back();
            gceb_zero_.emplace_back(reg, "gceb" + std::to_string(l) + ".zero", cout, cout, 1, 0, rng, true,
                                    /*zero_init=*/true);
        }
        gceb_mid_zero_ = nn::Conv2dLayer<T>(reg, "gceb.mid_zero", cw, cw, 1, 0, rng, true, /*zero_init=*/true);

        // trainable decoder
        for (int l = L - 1; l >= 0; --l) {
            const int skip_w = cfg.widths[static_cast<size_t>(l)];
            const int cin = (l == L - 1 ? cw : cfg.widths[static_cast<size_t>(l) + 1]) + skip_w;
            gcdb_res_.emplace_back(reg, "gcdb" + std::to_string(l) + ".res", cin, skip_w, cfg.time_dim, rng,
                                   true);
            if (cfg.gcb_at(l))
                gcdb_gcb_.emplace_back(reg, "gcdb" + std::to_string(l) + ".gcb", skip_w, cfg.bank_dim,
                                       cfg.heads, rng, true, cfg.zero_init_cross);
            else
                gcdb_gcb_.emplace_back();
        }
        out_norm_ = nn::GroupNormLayer<T>(reg, "out.norm", cfg.widths[0], true);
        out_conv_ = nn::Conv2dLayer<T>(reg, "out.conv", cfg.widths[0], cfg.in_channels, 3, 1, rng, true);
    }

    // z: latent batch; local_cond: pixel-space condition image, pooled to
    // the latent extent if larger.
    ag::Var<T> forward(const ag::Var<T>& z, const std::vector<int>& ts, const ag::Var<T>& local_cond,
                       const ag::Var<T>& bank) const {
        const int L = static_cast<int>(cfg_.widths.size());
        auto temb = ag::Var<T>::constant(nn::timestep_embedding<T>(expand_ts(ts, z.val().dim(0)), cfg_.time_dim));
        temb = time2_(ag::silu(time1_(temb)));

        // frozen trunk skips
        auto h = stem_(z);
        std::vector<ag::Var<T>> skips;
        for (int l = 0; l < L; ++l) {
            if (l > 0) h = ag::avg_pool2(h);
            h = sdeb_[static_cast<size_t>(l)](h, temb);
            skips.push_back(h);
        }
        h = sdmb_res1_(h, temb);
        {
            const int hh = h.val().dim(2), ww = h.val().dim(3);
            auto t = nn::to_tokens(sdmb_norm_(h));
            h = ag::add(h, nn::from_tokens(sdmb_attn_(t), hh, ww));
        }
        h = sdmb_res2_(h, temb);

        // condition branch adds deltas onto the skips and the middle
        auto hint = hint_zero_(hint_conv_(pool_to(local_cond, z.val().dim(2), z.val().dim(3))));
        auto c = ag::add(ctrl_stem_(z), hint);
        for (int l = 0; l < L; ++l) {
            if (l > 0) c = ag::avg_pool2(c);
            c = gceb_res_[static_cast<size_t>(l)](c, temb);
            if (cfg_.gcb_at(l)) c = gceb_gcb_[static_cast<size_t>(l)](c, bank);
            skips[static_cast<size_t>(l)] =
                ag::add(skips[static_cast<size_t>(l)], gceb_zero_[static_cast<size_t>(l)](c));
        }
        h = ag::add(h, gceb_mid_zero_(c));

        for (int i = 0; i < L; ++i) {
            const int l = L - 1 - i;
            h = ag::concat_dim1(h, skips[static_cast<size_t>(l)]);
            h = gcdb_res_[static_cast<size_t>(i)](h, temb);
            if (cfg_.gcb_at(l)) h = gcdb_gcb_[static_cast<size_t>(i)](h, bank);
            if (l > 0) h = ag::upsample_nearest2(h);
        }
        return out_conv_(ag::silu(out_norm_(h)));
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    static std::vector<int> expand_ts(const std::vector<int>& ts, int n) {
        if (static_cast<int>(ts.size()) == n) return ts;
        if (ts.size() == 1) return std::vector<int>(static_cast<size_t>(n), ts[0]);
        throw ShapeError("forward: timestep count must be 1 or batch size");
    }

    static ag::Var<T> pool_to(const ag::Var<T>& x, int th, int tw) {
        auto h = x;
        while (h.val().dim(2) > th || h.val().dim(3) > tw) {
            if (h.val().dim(2) % 2 || h.val().dim(3) % 2 || h.val().dim(2) < th || h.val().dim(3) < tw)
                throw ShapeError("local condition extent must reach the latent extent by halving");
            h = ag::avg_pool2(h);
        }
        return h;
    }

    BackboneConfig cfg_;
    nn::LinearLayer<T> time1_, time2_;
    nn::Conv2dLayer<T> stem_;
    std::vector<nn::ResBlock<T>> sdeb_;
    nn::ResBlock<T> sdmb_res1_, sdmb_res2_;
    nn::GroupNormLayer<T> sdmb_norm_;
    nn::TokenSelfAttention<T> sdmb_attn_;
    nn::Conv2dLayer<T> hint_conv_, hint_zero_, ctrl_stem_;
    std::vector<nn::ResBlock<T>> gceb_res_;
    std::vector<GCBlockFC<T>> gceb_gcb_;
    std::vector<nn::Conv2dLayer<T>> gceb_zero_;
    nn::Conv2dLayer<T> gceb_mid_zero_;
    std::vector<nn::ResBlock<T>> gcdb_res_;
    std::vector<GCBlockFC<T>> gcdb_gcb_;
    nn::GroupNormLayer<T> out_norm_;
    nn::Conv2dLayer<T> out_conv_;
};

// Variant dispatcher owning the parameter table.
template <typename T>
class DenoiserModel {
public:
    explicit DenoiserModel(const BackboneConfig& cfg) : cfg_(cfg) {
        if (cfg.variant == Variant::V)
            v_ = std::make_unique<DeskUNetV<T>>(cfg, reg_);
        else
            fc_ = std::make_unique<DeskUNetFC<T>>(cfg, reg_);
    }

    ag::Var<T> forward(const ag::Var<T>& x_or_z, const std::vector<int>& ts, const ag::Var<T>& local_cond,
                       const ag::Var<T>& bank) const {
        if (cfg_.variant == Variant::V) {
            if (local_cond.defined())
                throw ConfigError("denoise: CCAD(V) takes no local condition");
            return v_->forward(x_or_z, ts, bank);
        }
        if (!local_cond.defined())
            throw ConfigError("denoise: CCAD(F)/CCAD(C) requires a local condition image");
        return fc_->forward(x_or_z, ts, local_cond, bank);
    }

    const BackboneConfig& config() const { return cfg_; }
    ParamRegistry<T>& params() { return reg_; }
    const ParamRegistry<T>& params() const { return reg_; }
    uint64_t frozen_hash() const { return reg_.frozen_hash(); }

private:
    BackboneConfig cfg_;
    ParamRegistry<T> reg_;
    std::unique_ptr<DeskUNetV<T>> v_;
    std::unique_ptr<DeskUNetFC<T>> fc_;
};

// Spec-level denoising op: predicted noise for one timestep.
template <typename T>
Tensor<T> denoise_eps(const DenoiserModel<T>& model, const Tensor<T>& x_or_z, int t,
                      std::type_identity_t<const Tensor<T>*> local_cond, const Tensor<T>& bank_tokens) {
    ag::NoGradGuard ng;
    auto out = model.forward(ag::Var<T>::constant(x_or_z), {t},
                             local_cond ? ag::Var<T>::constant(*local_cond) : ag::Var<T>(),
                             ag::Var<T>::constant(bank_tokens));
    if (!all_finite(out.val())) throw DivergenceError("denoise: non-finite output");
    return out.val();
}

// ---------------------------------------------------------------------------
// pixel <-> latent codec

enum class CodecMode { Identity, TinyConvAe };

// Identity by default; the tiny convolutional autoencoder halves the
// spatial extent with 4 latent channels and is pre-trained separately.
template <typename T>
class LatentCodec {
public:
    explicit LatentCodec(CodecMode mode = CodecMode::Identity, uint64_t seed = 0, int latent_channels = 4)
        : mode_(mode), latent_channels_(latent_channels) {
        if (mode_ == CodecMode::TinyConvAe) {
            Rng rng(mix_seed(seed, 0xAEAEULL));
            enc1_ = nn::Conv2dLayer<T>(reg_, "codec.enc1", 3, 8, 3, 1, rng, true);
            enc2_ = nn::Conv2dLayer<T>(reg_, "codec.enc2", 8, latent_channels_, 3, 1, rng, true);
            dec1_ = nn::Conv2dLayer<T>(reg_, "codec.dec1", latent_channels_, 8, 3, 1, rng, true);
            dec2_ = nn::Conv2dLayer<T>(reg_, "codec.dec2", 8, 3, 3, 1, rng, true);
        }
    }

    CodecMode mode() const { return mode_; }
    int latent_channels() const { return mode_ == CodecMode::Identity ? 3 : latent_channels_; }
    int spatial_divisor() const { return mode_ == CodecMode::Identity ? 1 : 2; }

    ag::Var<T> encode(const ag::Var<T>& x) const {
        if (mode_ == CodecMode::Identity) return x;
        return enc2_(ag::avg_pool2(ag::silu(enc1_(x))));
    }

    ag::Var<T> decode(const ag::Var<T>& z) const {
        if (mode_ == CodecMode::Identity) return z;
        return dec2_(ag::silu(ag::upsample_nearest2(dec1_(z))));
    }

    Tensor<T> encode(const Tensor<T>& x) const {
        ag::NoGradGuard ng;
        return encode(ag::Var<T>::constant(x)).val();
    }

    Tensor<T> decode(const Tensor<T>& z) const {
        ag::NoGradGuard ng;
        return decode(ag::Var<T>::constant(z)).val();
    }

    ParamRegistry<T>& params() { return reg_; }

private:
    CodecMode mode_;
    int latent_channels_;
    ParamRegistry<T> reg_;
    nn::Conv2dLayer<T> enc1_, enc2_, dec1_, dec2_;
};

template <typename T>
Tensor<T> latent_encode(const Tensor<T>& x, const LatentCodec<T>& codec) {
    return codec.encode(x);
}

template <typename T>
Tensor<T> latent_decode(const Tensor<T>& z, const LatentCodec<T>& codec) {
    return codec.decode(z);
}

}  // namespace ccad
