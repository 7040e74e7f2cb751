#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ccad/backbone.hpp"
#include "ccad/core/autograd.hpp"
#include "ccad/core/errors.hpp"
#include "ccad/core/rng.hpp"
#include "ccad/core/serialize.hpp"
#include "ccad/fine_compression.hpp"
#include "ccad/schedules.hpp"

namespace ccad {

enum class OptimizerKind { Adam, AdamW };

struct TrainConfig {
    Variant variant = Variant::V;
    int epochs = 0;
    int batch_size = 0;
    double learning_rate = 0;
    double weight_decay = 0.05;
    OptimizerKind optimizer = OptimizerKind::Adam;
    uint64_t seed = 0;
    int T = 1000;
    double guidance_w = 1.0;  // V only
    int inference_steps = 10;
    int max_steps = 0;        // overrides epochs when > 0
    double clip_norm = 1.0;   // global-norm gradient clip; 0 disables

    // Per-variant defaults: batch 32/Adam/lr 3e-4 for V, batch 12/AdamW/
    // lr 1e-4 for F and C, weight decay 0.05 everywhere.
    static TrainConfig defaults(Variant v) {
        TrainConfig c;
        c.variant = v;
        if (v == Variant::V) {
            c.epochs = 1000;
            c.batch_size = 32;
            c.learning_rate = 3e-4;
            c.optimizer = OptimizerKind::Adam;
        } else {
            c.epochs = 200;
            c.batch_size = 12;
            c.learning_rate = 1e-4;
            c.optimizer = OptimizerKind::AdamW;
        }
        return c;
    }

    void validate() const {
        if (epochs < 0 || max_steps < 0) throw ParamError("TrainConfig: negative step budget");
        if (epochs == 0 && max_steps == 0) throw ParamError("TrainConfig: no steps requested");
        if (batch_size < 1) throw ParamError("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
            throw ParamError("TrainConfig: learning_rate must be finite and >= 0");
        if (!(weight_decay >= 0)) throw ParamError("TrainConfig: weight_decay must be >= 0");
        if (T < 1) throw ParamError("TrainConfig: T must be >= 1");
        if (inference_steps < 1 || inference_steps > T)
            throw ParamError("TrainConfig: inference_steps must lie in [1, T]");
        if (!(guidance_w >= 0) || !std::isfinite(guidance_w))
            throw ParamError("TrainConfig: guidance_w must be finite and >= 0");
    }
};

struct TrainState {
    int64_t steps = 0;
    std::vector<float> loss_history;  // one entry per completed step
    uint64_t seed = 0;
    uint64_t frozen_hash_before = 0;
    uint64_t frozen_hash_after = 0;
};

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
class GradientOptimizer {
public:
    GradientOptimizer(std::vector<ag::Var<T>> params, OptimizerKind kind, double lr, double weight_decay)
        : params_(std::move(params)), kind_(kind), lr_(lr), wd_(weight_decay) {
        for (auto& p : params_) {
            m_.push_back(Tensor<T>::zeros(p.val().shape));
            v_.push_back(Tensor<T>::zeros(p.val().shape));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Global-norm clip across every parameter gradient; 0 disables.
    double clip_gradients(double max_norm) {
        double total = 0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (T g : p.grad().data) total += static_cast<double>(g) * g;
        }
        total = std::sqrt(total);
        if (max_norm > 0 && total > max_norm) {
            const T s = static_cast<T>(max_norm / total);
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                for (T& g : p.grad().data) g *= s;
            }
        }
        return total;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto& val = p.mutable_val();
            auto& g = p.grad();
            for (size_t j = 0; j < val.numel(); ++j) {
                double grad = g.data[j];
                if (kind_ == OptimizerKind::Adam) grad += wd_ * val.data[j];  // coupled decay
                m_[i].data[j] = static_cast<T>(0.9 * m_[i].data[j] + 0.1 * grad);
                v_[i].data[j] = static_cast<T>(0.999 * v_[i].data[j] + 0.001 * grad * grad);
                const double mhat = m_[i].data[j] / bc1;
                const double vhat = v_[i].data[j] / bc2;
                double update = mhat / (std::sqrt(vhat) + 1e-8);
                if (kind_ == OptimizerKind::AdamW) update += wd_ * val.data[j];
                val.data[j] -= static_cast<T>(lr_ * update);
            }
        }
    }

private:
    std::vector<ag::Var<T>> params_;
    OptimizerKind kind_;
    double lr_;
    double wd_;
    int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// objectives

// Core epsilon-matching objective. The denoiser callable receives the
// noised batch, per-sample timesteps, and the drawn noise (so mock
// denoisers in tests can be exact); it returns the prediction.
template <typename T, typename Fn>
ag::Var<T> diffusion_loss_explicit(Fn&& denoiser, const Tensor<T>& batch, const std::vector<int>& ts,
                                   const Tensor<T>& eps, const NoiseSchedule& s) {
    require_same_shape(batch, eps, "diffusion_loss");
    if (static_cast<int>(ts.size()) != batch.dim(0))
        throw ShapeError("diffusion_loss: one timestep per sample required");
    // per-sample forward diffusion
    Tensor<T> noisy(batch.shape);
    const size_t per = batch.numel() / static_cast<size_t>(batch.dim(0));
    for (int n = 0; n < batch.dim(0); ++n) {
        const double ab = s.abar(ts[static_cast<size_t>(n)]);
        const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1 - ab));
        for (size_t j = 0; j < per; ++j) {
            const size_t i = static_cast<size_t>(n) * per + j;
            noisy.data[i] = a * batch.data[i] + b * eps.data[i];
        }
    }
    auto eps_hat = denoiser(noisy, ts, eps);
    return ag::mse(eps_hat, ag::Var<T>::constant(eps));
}

template <typename T, typename Fn>
ag::Var<T> diffusion_loss(Fn&& denoiser, const Tensor<T>& batch, const NoiseSchedule& s, Rng& rng) {
    std::vector<int> ts(static_cast<size_t>(batch.dim(0)));
    for (auto& t : ts) t = rng.uniform_int(1, s.T);
    Tensor<T> eps(batch.shape);
    for (auto& e : eps.data) e = static_cast<T>(rng.normal());
    return diffusion_loss_explicit(denoiser, batch, ts, eps, s);
}

inline ag::Var<float> bank_tokens_var(const CoarseFeatureBank& bank) {
    return ag::Var<float>::constant(bank.vectors);
}

// Unconditioned-bank objective shared by CCAD(C) and CCAD(V); CCAD(C)
// additionally passes the pixel image as the local condition.
inline ag::Var<float> loss_base(const DenoiserModel<float>& model, const Tensor<float>& batch_xz,
                                const Tensor<float>* local_cond, const ag::Var<float>& bank_tokens,
                                const NoiseSchedule& s, Rng& rng) {
    return diffusion_loss(
        [&](const Tensor<float>& noisy, const std::vector<int>& ts, const Tensor<float>&) {
            return model.forward(ag::Var<float>::constant(noisy), ts,
                                 local_cond ? ag::Var<float>::constant(*local_cond) : ag::Var<float>(),
                                 bank_tokens);
        },
        batch_xz, s, rng);
}

inline ag::Var<float> loss_ccad_v(const DenoiserModel<float>& model, const Tensor<float>& batch,
                                  const CoarseFeatureBank& bank, const NoiseSchedule& s, Rng& rng) {
    if (model.config().variant != Variant::V) throw ConfigError("loss_ccad_v: model variant must be V");
    return loss_base(model, batch, nullptr, bank_tokens_var(bank), s, rng);
}

inline ag::Var<float> loss_ccad_c(const DenoiserModel<float>& model, const Tensor<float>& batch,
                                  const CoarseFeatureBank& bank, const LatentCodec<float>& codec,
                                  const NoiseSchedule& s, Rng& rng) {
    if (model.config().variant != Variant::C) throw ConfigError("loss_ccad_c: model variant must be C");
    auto z0 = codec.encode(batch);
    return loss_base(model, z0, &batch, bank_tokens_var(bank), s, rng);
}

// CCAD(F): the fine bank is produced by the trainable compression module
// from the batch-wise feature space, so gradients reach both the backbone
// and the FCM parameters.
inline ag::Var<float> loss_ccad_f(const DenoiserModel<float>& model, const Tensor<float>& batch,
                                  const CoarseFeatureBank& bank, const FineCompressionModule& fcm,
                                  const LatentCodec<float>& codec, const ExtractorConfig& encoder,
                                  const NoiseSchedule& s, Rng& rng) {
    if (model.config().variant != Variant::F) throw ConfigError("loss_ccad_f: model variant must be F");
    if (bank.xi < 1) throw ConfigError("loss_ccad_f: bank required");
    auto dbs = build_batch_space(batch, encoder, bank.extractor_fingerprint);
    auto fine = fcm.forward(ag::Var<float>::constant(dbs.vectors), ag::Var<float>::constant(bank.vectors));
    auto z0 = codec.encode(batch);
    return diffusion_loss(
        [&](const Tensor<float>& noisy, const std::vector<int>& ts, const Tensor<float>&) {
            return model.forward(ag::Var<float>::constant(noisy), ts, ag::Var<float>::constant(batch), fine);
        },
        z0, s, rng);
}

// ---------------------------------------------------------------------------
// training loop (the training half of the variant algorithms)

struct TrainContext {
    DenoiserModel<float>* model = nullptr;
    FineCompressionModule* fcm = nullptr;      // Variant::F only
    const CoarseFeatureBank* bank = nullptr;
    const LatentCodec<float>* codec = nullptr; // F/C; identity if null
    ExtractorConfig encoder;                   // F: batch-space extraction
};

inline TrainState train(TrainContext& ctx, const Tensor<float>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (!ctx.model) throw ConfigError("train: model required");
    if (data.ndim() != 4 || data.dim(0) == 0) throw ParamError("train: data must be a non-empty NCHW batch");
    if (!ctx.bank) throw ConfigError("train: bank required (use an empty bank to ablate conditioning)");
    if (cfg.variant != ctx.model->config().variant) throw ConfigError("train: config/model variant mismatch");
    if (cfg.variant == Variant::F && !ctx.fcm) throw ConfigError("train: CCAD(F) requires the FCM");

    const LatentCodec<float> identity_codec;
    const LatentCodec<float>& codec = ctx.codec ? *ctx.codec : identity_codec;
    auto schedule = make_schedule(cfg.T, 1e-4, 0.02);

    const int n = data.dim(0);
    const int batch = std::min(cfg.batch_size, n);
    const int steps_per_epoch = n / batch;
    const int64_t total_steps =
        cfg.max_steps > 0 ? cfg.max_steps : static_cast<int64_t>(cfg.epochs) * std::max(1, steps_per_epoch);

    // Dedicated streams: reordering data draws must not perturb noise draws.
    Rng rng_data = Rng(cfg.seed).fork(0xDA7AULL);
    Rng rng_noise = Rng(cfg.seed).fork(0x4015EULL);

    std::vector<ag::Var<float>> params = ctx.model->params().trainable();
    if (cfg.variant == Variant::F)
        for (auto& [name, p] : ctx.fcm->named_parameters()) params.push_back(p);
    GradientOptimizer<float> opt(params, cfg.optimizer, cfg.learning_rate, cfg.weight_decay);

    TrainState state;
    state.seed = cfg.seed;
    state.frozen_hash_before = ctx.model->frozen_hash();

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = static_cast<size_t>(n);  // forces an initial shuffle

    const size_t per = data.numel() / static_cast<size_t>(n);
    Tensor<float> minibatch({batch, data.dim(1), data.dim(2), data.dim(3)});

    for (int64_t step = 0; step < total_steps; ++step) {
        for (int b = 0; b < batch; ++b) {
            if (cursor + 1 > static_cast<size_t>(n)) {
                // deterministic Fisher-Yates reshuffle per epoch
                for (int i = n - 1; i > 0; --i)
                    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng_data.uniform_int(0, i))]);
                cursor = 0;
            }
            const int src = order[cursor++];
            std::copy_n(data.data.data() + static_cast<size_t>(src) * per, per,
                        minibatch.data.data() + static_cast<size_t>(b) * per);
        }

        ag::Var<float> loss;
        switch (cfg.variant) {
            case Variant::V:
                loss = loss_ccad_v(*ctx.model, minibatch, *ctx.bank, schedule, rng_noise);
                break;
            case Variant::C:
                loss = loss_ccad_c(*ctx.model, minibatch, *ctx.bank, codec, schedule, rng_noise);
                break;
            case Variant::F:
                loss = loss_ccad_f(*ctx.model, minibatch, *ctx.bank, *ctx.fcm, codec, ctx.encoder, schedule,
                                   rng_noise);
                break;
        }

        const float lv = loss.val().data[0];
        if (!std::isfinite(lv)) {
            std::ostringstream os;
            os << "train: non-finite loss at step " << step << " (variant " << variant_tag(cfg.variant)
               << ", lr " << cfg.learning_rate << "); recent losses:";
            const size_t tail = std::min<size_t>(5, state.loss_history.size());
            for (size_t i = state.loss_history.size() - tail; i < state.loss_history.size(); ++i)
                os << " " << state.loss_history[i];
            throw DivergenceError(os.str());
        }

        opt.zero_grad();
        ag::backward(loss);
        opt.clip_gradients(cfg.clip_norm);
        opt.step();

        state.loss_history.push_back(lv);
        ++state.steps;
    }

    state.frozen_hash_after = ctx.model->frozen_hash();
    return state;
}

// ---------------------------------------------------------------------------
// reconstruction (the sampling half of the variant algorithms)

// CCAD(F)/CCAD(C): start from pure latent noise, iterate the conditioned
// DDIM update over a strided subsequence, decode back to pixels. For F the
// batch-wise space comes from the test images themselves.
inline Tensor<float> reconstruct_fc(const DenoiserModel<float>& model, const Tensor<float>& x_test,
                                    const CoarseFeatureBank& bank, const FineCompressionModule* fcm,
                                    const LatentCodec<float>& codec, const ExtractorConfig& encoder,
                                    const NoiseSchedule& s, int steps, Rng& rng) {
    if (model.config().variant == Variant::V) throw ConfigError("reconstruct_fc: variant must be F or C");
    if (steps > s.T) throw ParamError("reconstruct_fc: steps exceeds schedule length T");
    if (model.config().variant == Variant::F && !fcm) throw ConfigError("reconstruct_fc: CCAD(F) requires FCM");

    ag::NoGradGuard ng;
    Tensor<float> bank_tokens = bank.vectors;
    if (model.config().variant == Variant::F && bank.xi > 0) {
        auto dbs = build_batch_space(x_test, encoder, bank.extractor_fingerprint);
        bank_tokens =
            fcm->forward(ag::Var<float>::constant(dbs.vectors), ag::Var<float>::constant(bank.vectors)).val();
    }

    auto z0_shape = codec.encode(Tensor<float>(x_test.shape)).shape;
    Tensor<float> z(z0_shape);
    for (auto& v : z.data) v = static_cast<float>(rng.normal());

    const auto ts = strided_timesteps(s.T, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        auto eps = model
                       .forward(ag::Var<float>::constant(z), {t}, ag::Var<float>::constant(x_test),
                                ag::Var<float>::constant(bank_tokens))
                       .val();
        Tensor<float> fresh(z.shape);
        if (s.eta > 0)
            for (auto& v : fresh.data) v = static_cast<float>(rng.normal());
        z = ddim_step_to(z, eps, t, t_prev, s, fresh);
    }
    return codec.decode(z);
}

// CCAD(V): target-guided sampling. Each step forms the noised target from
// the current prediction, corrects epsilon toward the target, and steps.
inline Tensor<float> reconstruct_v(const DenoiserModel<float>& model, const Tensor<float>& xbar0,
                                   const CoarseFeatureBank& bank, const NoiseSchedule& s, double w,
                                   int steps, Rng& rng) {
    if (model.config().variant != Variant::V) throw ConfigError("reconstruct_v: variant must be V");
    if (steps > s.T) throw ParamError("reconstruct_v: steps exceeds schedule length T");
    GuidanceConfig g{w};
    g.validate();

    ag::NoGradGuard ng;
    Tensor<float> x(xbar0.shape);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());

    const auto ts = strided_timesteps(s.T, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        auto eps_u = model
                         .forward(ag::Var<float>::constant(x), {t}, ag::Var<float>(),
                                  ag::Var<float>::constant(bank.vectors))
                         .val();
        auto xbar_t = target_forward(xbar0, eps_u, t, s);
        auto eps = guided_epsilon(eps_u, x, xbar_t, g, t, s);
        Tensor<float> fresh(x.shape);
        if (s.eta > 0)
            for (auto& v : fresh.data) v = static_cast<float>(rng.normal());
        x = ddim_step_to(x, eps, t, t_prev, s, fresh);
    }
    return x;
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "CCADCKPT", LE u32 version=1, u8 variant tag,
// u32-length-prefixed UTF-8 JSON config echo, u32 tensor count, then per
// tensor: u16-length-prefixed name, u32 rank, rank x u32 dims, f32 payload.

struct NamedTensorList {
    std::vector<std::pair<std::string, Tensor<float>>> items;
};

template <typename T>
NamedTensorList snapshot_registry(const ParamRegistry<T>& reg, const std::string& prefix = "") {
    NamedTensorList out;
    for (const auto& e : reg.entries()) out.items.push_back({prefix + e.name, e.var.val().template cast<float>()});
    return out;
}

inline void save_checkpoint(const std::string& path, Variant variant, const std::string& config_json,
                            const NamedTensorList& tensors) {
    ByteWriter w;
    w.bytes("CCADCKPT", 8);
    w.u32(1);
    w.u8(static_cast<uint8_t>(variant_tag(variant)));
    w.str_u32(config_json);
    w.u32(static_cast<uint32_t>(tensors.items.size()));
    for (const auto& [name, tensor] : tensors.items) {
        w.str_u16(name);
        w.u32(static_cast<uint32_t>(tensor.shape.size()));
        for (int d : tensor.shape) w.u32(static_cast<uint32_t>(d));
        for (float v : tensor.data) w.f32(v);
    }
    w.save(path);
}

struct Checkpoint {
    Variant variant;
    std::string config_json;
    NamedTensorList tensors;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    auto r = ByteReader::from_file(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::string(magic, 8) != "CCADCKPT")
        throw DecodeError(DecodeError::Kind::BadMagic, "checkpoint: bad magic in " + path);
    const uint32_t version = r.u32();
    if (version != 1)
        throw DecodeError(DecodeError::Kind::BadVersion,
                          "checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.variant = variant_from_tag(static_cast<char>(r.u8()));
    ckpt.config_json = r.str_u32();
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str_u16();
        const uint32_t rank = r.u32();
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        Tensor<float> t(shape);
        for (auto& v : t.data) v = r.f32();
        ckpt.tensors.items.push_back({name, std::move(t)});
    }
    if (!r.eof()) throw DecodeError(DecodeError::Kind::Corrupt, "checkpoint: trailing bytes in " + path);
    return ckpt;
}

// Restores tensors into a registry by name; every registry entry must be
// present with matching shape.
template <typename T>
void restore_registry(ParamRegistry<T>& reg, const NamedTensorList& tensors, const std::string& prefix = "") {
    for (const auto& e : reg.entries()) {
        const std::string want = prefix + e.name;
        const Tensor<float>* found = nullptr;
        for (const auto& [name, t] : tensors.items)
            if (name == want) {
                found = &t;
                break;
            }
        if (!found) throw ConfigError("checkpoint: missing tensor '" + want + "'");
        if (found->shape != e.var.val().shape)
            throw ConfigError("checkpoint: shape mismatch for '" + want + "'");
        auto var = e.var;
        var.mutable_val() = found->template cast<T>();
    }
}

// ---------------------------------------------------------------------------
// codec pre-training (tiny-conv-ae mode)

template <typename T>
double codec_mae(const LatentCodec<T>& codec, const Tensor<T>& images) {
    auto rec = codec.decode(codec.encode(images));
    double s = 0;
    for (size_t i = 0; i < images.numel(); ++i) s += std::abs(static_cast<double>(rec.data[i]) - images.data[i]);
    return s / static_cast<double>(images.numel());
}

template <typename T>
void pretrain_codec(LatentCodec<T>& codec, const Tensor<T>& images, int steps, double lr, uint64_t seed) {
    if (codec.mode() != CodecMode::TinyConvAe) return;
    GradientOptimizer<T> opt(codec.params().trainable(), OptimizerKind::Adam, lr, 0.0);
    Rng rng(mix_seed(seed, 0xC0DECULL));
    const int n = images.dim(0);
    const int batch = std::min(8, n);
    const size_t per = images.numel() / static_cast<size_t>(n);
    Tensor<T> mb({batch, images.dim(1), images.dim(2), images.dim(3)});
    for (int step = 0; step < steps; ++step) {
        for (int b = 0; b < batch; ++b) {
            const int src = rng.uniform_int(0, n - 1);
            std::copy_n(images.data.data() + static_cast<size_t>(src) * per, per,
                        mb.data.data() + static_cast<size_t>(b) * per);
        }
        auto x = ag::Var<T>::constant(mb);
        auto loss = ag::mse(codec.decode(codec.encode(x)), x);
        opt.zero_grad();
        ag::backward(loss);
        opt.step();
    }
}

}  // namespace ccad
