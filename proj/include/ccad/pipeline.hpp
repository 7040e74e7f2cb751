#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ccad/config.hpp"
#include "ccad/dataset.hpp"
#include "ccad/scoring.hpp"
#include "ccad/synth.hpp"
#include "ccad/training.hpp"
#include "ccad/version.hpp"

namespace ccad {

inline const CategoryManifest& pick_category(const RunConfig& cfg, const DatasetManifest& man) {
    for (const auto& c : man.categories)
        if (c.name == cfg.synth_category) return c;
    return man.categories.front();
}

inline CoarseFeatureBank build_bank_for(const RunConfig& cfg, const DatasetManifest& man,
                                        std::vector<std::string>* warnings = nullptr) {
    const auto& cat = pick_category(cfg, man);
    auto images = load_image_batch(cat.train);
    auto space = extract_features(images, cfg.extractor_config());
    const auto init = cfg.bank_init == "index" ? CoresetInit::Index : CoresetInit::MaxNorm;
    if (cfg.bank_xi < 1) throw ParamError("build-bank: bank_xi must be >= 1");
    return coreset_compress(space, cfg.bank_xi, init, 0, warnings);
}

// Everything a trained run needs at inference time.
struct TrainedBundle {
    std::unique_ptr<DenoiserModel<float>> model;
    std::unique_ptr<FineCompressionModule> fcm;
    std::unique_ptr<LatentCodec<float>> codec;
    TrainState state;
    std::string config_json;

    Variant variant() const { return model->config().variant; }
};

inline TrainedBundle make_bundle(const RunConfig& cfg) {
    TrainedBundle b;
    b.model = std::make_unique<DenoiserModel<float>>(cfg.backbone_config());
    b.codec = std::make_unique<LatentCodec<float>>(cfg.codec(), cfg.seed);
    if (cfg.variant() == Variant::F)
        b.fcm = std::make_unique<FineCompressionModule>(cfg.extractor_dim, cfg.fcm_d_k, cfg.fcm_heads,
                                                        cfg.seed);
    b.config_json = cfg.to_json();
    return b;
}

inline TrainedBundle train_pipeline(const RunConfig& cfg, const DatasetManifest& man,
                                    const CoarseFeatureBank& bank) {
    const auto& cat = pick_category(cfg, man);
    auto data = load_image_batch(cat.train);

    auto bundle = make_bundle(cfg);
    if (bundle.codec->mode() == CodecMode::TinyConvAe)
        pretrain_codec(*bundle.codec, data, cfg.codec_pretrain_steps, 3e-3, cfg.seed);

    TrainContext ctx;
    ctx.model = bundle.model.get();
    ctx.fcm = bundle.fcm.get();
    ctx.bank = &bank;
    ctx.codec = bundle.codec.get();
    ctx.encoder = cfg.extractor_config();
    bundle.state = train(ctx, data, cfg.train_config());
    return bundle;
}

inline void save_bundle(const std::string& path, const TrainedBundle& bundle) {
    NamedTensorList tensors;
    for (auto& [name, t] : snapshot_registry(bundle.model->params(), "model.").items)
        tensors.items.push_back({name, t});
    if (bundle.fcm)
        for (auto& [name, p] : bundle.fcm->named_parameters()) tensors.items.push_back({name, p.val()});
    if (bundle.codec->mode() != CodecMode::Identity)
        for (auto& [name, t] : snapshot_registry(bundle.codec->params(), "").items)
            tensors.items.push_back({name, t});
    save_checkpoint(path, bundle.variant(), bundle.config_json, tensors);
}

inline TrainedBundle load_bundle(const std::string& path) {
    auto ckpt = load_checkpoint(path);
    RunConfig cfg;
    {
        nlohmann::json j = nlohmann::json::parse(ckpt.config_json);
        for (auto it = j.begin(); it != j.end(); ++it)
            cfg.set(it.key(), it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
    }
    cfg.validate();
    if (cfg.variant() != ckpt.variant)
        throw DecodeError(DecodeError::Kind::Corrupt, "checkpoint: variant tag disagrees with config echo");

    auto bundle = make_bundle(cfg);
    restore_registry(bundle.model->params(), ckpt.tensors, "model.");
    if (bundle.fcm) {
        for (auto& [name, p] : bundle.fcm->named_parameters()) {
            bool found = false;
            for (const auto& [tn, t] : ckpt.tensors.items)
                if (tn == name) {
                    if (t.shape != p.val().shape)
                        throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
                    auto var = p;
                    var.mutable_val() = t;
                    found = true;
                    break;
                }
            if (!found) throw ConfigError("checkpoint: missing tensor '" + name + "'");
        }
    }
    if (bundle.codec->mode() != CodecMode::Identity) restore_registry(bundle.codec->params(), ckpt.tensors);
    bundle.config_json = ckpt.config_json;
    return bundle;
}

// Model-shape keys of the active config must agree with the checkpoint's
// echo; evaluation knobs may differ.
inline void require_bundle_matches(const RunConfig& cfg, const TrainedBundle& bundle) {
    nlohmann::json echo = nlohmann::json::parse(bundle.config_json);
    auto mismatch = [&](const char* key, const std::string& live) {
        const auto stored =
            echo.at(key).is_string() ? echo.at(key).get<std::string>() : echo.at(key).dump();
        if (stored != live)
            throw ConfigError(std::string("evaluate: config key '") + key + "' (" + live +
                              ") disagrees with the checkpoint (" + stored + ")");
    };
    mismatch("train_variant", cfg.train_variant);
    mismatch("model_widths", cfg.model_widths);
    mismatch("model_heads", std::to_string(cfg.model_heads));
    mismatch("model_time_dim", std::to_string(cfg.model_time_dim));
    mismatch("extractor_dim", std::to_string(cfg.extractor_dim));
    mismatch("codec_mode", cfg.codec_mode);
    mismatch("schedule_T", std::to_string(cfg.schedule_T));
}

inline Tensor<float> reconstruct_image(const RunConfig& cfg, const TrainedBundle& bundle,
                                       const CoarseFeatureBank& bank, const Tensor<float>& image,
                                       Rng& rng) {
    const auto schedule = cfg.schedule();
    switch (bundle.variant()) {
        case Variant::V:
            return reconstruct_v(*bundle.model, image, bank, schedule, cfg.train_guidance_w,
                                 cfg.train_inference_steps, rng);
        case Variant::C:
            return reconstruct_fc(*bundle.model, image, bank, nullptr, *bundle.codec,
                                  cfg.extractor_config(), schedule, cfg.train_inference_steps, rng);
        case Variant::F:
            return reconstruct_fc(*bundle.model, image, bank, bundle.fcm.get(), *bundle.codec,
                                  cfg.extractor_config(), schedule, cfg.train_inference_steps, rng);
    }
    throw ConfigError("reconstruct: unknown variant");
}

struct EvaluateOutputs {
    ScoreReport report;
    std::vector<AnomalyMap> maps;                 // test-set order
    std::vector<Tensor<float>> reconstructions;   // test-set order
};

// Per-image fan-out with results merged in manifest order. Each image owns
// an independent RNG stream, so the outcome is identical for any worker
// count.
inline EvaluateOutputs evaluate_pipeline(const RunConfig& cfg, const DatasetManifest& man,
                                         const CoarseFeatureBank& bank, const TrainedBundle& bundle) {
    const auto& cat = pick_category(cfg, man);
    if (cat.test.empty()) throw IngestError("evaluate: category '" + cat.name + "' has no test images");

    const auto psi = cfg.psi_config();
    const auto layers = RunConfig::parse_int_list(cfg.score_layers, "score_layers");
    const auto sigmas = RunConfig::parse_double_list(cfg.score_sigma_l, "score_sigma_l");

    const size_t n = cat.test.size();
    EvaluateOutputs out;
    out.maps.resize(n);
    out.reconstructions.resize(n);
    out.report.images.resize(n);

    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::string failure;
    std::mutex failure_mu;

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                const auto& entry = cat.test[i];
                auto image = load_image_normalized(entry.path);
                Rng rng(mix_seed(cfg.seed, 0xEC0 + static_cast<uint64_t>(i)));
                auto recon = reconstruct_image(cfg, bundle, bank, image, rng);
                auto map = anomaly_map(image, recon, psi, layers, sigmas);
                PerImageScore s;
                s.path = entry.path;
                s.defect_type = entry.defect_type;
                s.label = entry.defect_type == "good" ? 0 : 1;
                s.score = image_score(map, cfg.score_smooth_sigma);
                out.reconstructions[i] = std::move(recon);
                out.maps[i] = std::move(map);
                out.report.images[i] = std::move(s);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(failure_mu);
                failure = e.what();
                failed.store(true);
                return;
            }
        }
    };

    const int nworkers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(n)));
    if (nworkers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nworkers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw IoError("evaluate: worker failure: " + failure);

    // class-level metrics over image scores
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : out.report.images) {
        scores.push_back(s.score);
        labels.push_back(s.label);
    }
    out.report.class_auroc = auroc(scores, labels);
    out.report.class_f1_max = f1_max(scores, labels);
    out.report.class_ap = average_precision(scores, labels);

    // pixel-level metrics over every map against every mask, image order
    std::vector<double> pix_scores;
    std::vector<int> pix_labels;
    for (size_t i = 0; i < n; ++i) {
        const auto& entry = cat.test[i];
        auto mask = load_mask(entry.mask_path, cat.height, cat.width);
        const auto& map = out.maps[i].values;
        for (size_t p = 0; p < map.numel(); ++p) {
            pix_scores.push_back(map.data[p]);
            pix_labels.push_back(mask.data[p] > 0.5f ? 1 : 0);
        }
    }
    out.report.pixel_auroc = auroc(pix_scores, pix_labels);
    out.report.pixel_f1_max = f1_max(pix_scores, pix_labels);
    out.report.pixel_ap = average_precision(pix_scores, pix_labels);
    return out;
}

inline std::string report_to_json(const RunConfig& cfg, const ScoreReport& report) {
    nlohmann::ordered_json j;
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["config"] = nlohmann::ordered_json::parse(cfg.to_json());
    nlohmann::ordered_json imgs = nlohmann::ordered_json::array();
    for (const auto& s : report.images) {
        nlohmann::ordered_json e;
        e["path"] = s.path;
        e["defect_type"] = s.defect_type;
        e["label"] = s.label;
        e["score"] = s.score;
        imgs.push_back(e);
    }
    j["per_image"] = imgs;
    nlohmann::ordered_json m;
    m["class_auroc"] = report.class_auroc;
    m["pixel_auroc"] = report.pixel_auroc;
    m["class_f1_max"] = report.class_f1_max;
    m["pixel_f1_max"] = report.pixel_f1_max;
    m["class_ap"] = report.class_ap;
    m["pixel_ap"] = report.pixel_ap;
    j["metrics"] = m;
    return j.dump(2) + "\n";
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << text;
    if (!f) throw IoError("short write: " + path);
}

inline std::string stem_of(const std::string& path) { return std::filesystem::path(path).stem().string(); }

}  // namespace ccad
