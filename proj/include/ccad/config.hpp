#pragma once

#include <json.hpp>

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ccad/backbone.hpp"
#include "ccad/core/errors.hpp"
#include "ccad/feature_bank.hpp"
#include "ccad/synth.hpp"
#include "ccad/training.hpp"

namespace ccad {

// One flat key namespace covering every module, read from a JSON or TOML
// text file (TOML as the flat `key = value` subset: strings, numbers,
// booleans, # comments). CLI flags override file keys; unknown keys are
// rejected.
struct RunConfig {
    uint64_t seed = 42;
    int image_size = 32;
    int workers = 1;

    // synthetic dataset
    int synth_n_train = 16;
    int synth_n_test_good = 8;
    int synth_n_test_defect = 8;
    std::string synth_texture = "checker";      // checker | bands
    std::string synth_defect = "square";        // square | scratch | blob
    double synth_defect_intensity = 0.6;
    std::string synth_category = "synthcat";

    // feature extractor (bank building, batch spaces)
    std::string extractor_kind = "seeded-conv";  // seeded-conv | imported
    uint64_t extractor_seed = 7;
    std::string extractor_layers = "1,2";
    int extractor_dim = 32;
    int extractor_m = 8;
    std::string extractor_import_path;

    // coarse bank
    int bank_xi = 10;
    std::string bank_init = "max-norm";  // max-norm | index

    // fine compression module
    int fcm_d_k = 64;
    int fcm_heads = 4;

    // noise schedule
    int schedule_T = 300;
    double schedule_beta_start = 1e-4;
    double schedule_beta_end = 0.02;
    double schedule_eta = 0.0;

    // denoiser
    std::string model_widths = "16,32,48";
    int model_heads = 4;
    int model_time_dim = 32;
    bool model_zero_init_cross = true;

    // latent codec
    std::string codec_mode = "identity";  // identity | tiny-conv-ae
    int codec_pretrain_steps = 400;

    // training
    std::string train_variant = "v";  // f | c | v
    int train_epochs = 0;
    int train_steps = 2000;
    int train_batch_size = 8;
    double train_lr = 3e-4;
    double train_weight_decay = 0.05;
    std::string train_optimizer = "adam";  // adam | adamw
    double train_guidance_w = 2.0;
    int train_inference_steps = 10;
    double train_clip_norm = 1.0;

    // scoring
    std::string score_layers = "1,2";
    std::string score_sigma_l = "1,1";
    double score_smooth_sigma = 4.0;

    std::string mask_suffix = "_mask";

    // ----- parsing ---------------------------------------------------------

    void set(const std::string& key, const std::string& value);
    static RunConfig from_file(const std::string& path);
    std::string to_json() const;
    void validate() const;

    // ----- derived module configs ------------------------------------------

    static std::vector<int> parse_int_list(const std::string& csv, const char* what) {
        std::vector<int> out;
        std::stringstream ss(csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(std::stoi(tok));
        if (out.empty()) throw ParamError(std::string(what) + ": empty list");
        return out;
    }

    static std::vector<double> parse_double_list(const std::string& csv, const char* what) {
        std::vector<double> out;
        std::stringstream ss(csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(std::stod(tok));
        if (out.empty()) throw ParamError(std::string(what) + ": empty list");
        return out;
    }

    Variant variant() const {
        if (train_variant == "f" || train_variant == "F") return Variant::F;
        if (train_variant == "c" || train_variant == "C") return Variant::C;
        if (train_variant == "v" || train_variant == "V") return Variant::V;
        throw ParamError("config: train_variant must be one of f, c, v");
    }

    SynthSpec synth_spec() const {
        SynthSpec s;
        s.seed = seed;
        s.n_train = synth_n_train;
        s.n_test_good = synth_n_test_good;
        s.n_test_defect = synth_n_test_defect;
        s.size = image_size;
        if (synth_texture == "checker")
            s.texture = SynthTexture::Checker;
        else if (synth_texture == "bands")
            s.texture = SynthTexture::Bands;
        else
            throw ParamError("config: synth_texture must be checker or bands");
        if (synth_defect == "square")
            s.defect = SynthDefect::Square;
        else if (synth_defect == "scratch")
            s.defect = SynthDefect::Scratch;
        else if (synth_defect == "blob")
            s.defect = SynthDefect::Blob;
        else
            throw ParamError("config: synth_defect must be square, scratch or blob");
        s.defect_intensity = synth_defect_intensity;
        s.category = synth_category;
        return s;
    }

    ExtractorConfig extractor_config() const {
        ExtractorConfig e;
        if (extractor_kind == "seeded-conv")
            e.kind = ExtractorKind::SeededConv;
        else if (extractor_kind == "imported")
            e.kind = ExtractorKind::Imported;
        else
            throw ParamError("config: extractor_kind must be seeded-conv or imported");
        e.seed = extractor_seed;
        e.layer_spec = parse_int_list(extractor_layers, "extractor_layers");
        e.d = extractor_dim;
        e.m = extractor_m;
        e.import_path = extractor_import_path;
        return e;
    }

    ExtractorConfig psi_config() const {
        ExtractorConfig e;
        e.kind = ExtractorKind::SeededConv;
        e.seed = extractor_seed;
        e.layer_spec = parse_int_list(score_layers, "score_layers");
        e.d = extractor_dim;
        e.m = extractor_m;
        return e;
    }

    BackboneConfig backbone_config() const {
        BackboneConfig b;
        b.variant = variant();
        b.in_channels = 3;
        b.widths = parse_int_list(model_widths, "model_widths");
        b.bank_dim = extractor_dim;
        b.heads = model_heads;
        b.time_dim = model_time_dim;
        b.seed = seed;
        b.zero_init_cross = model_zero_init_cross;
        return b;
    }

    CodecMode codec() const {
        if (codec_mode == "identity") return CodecMode::Identity;
        if (codec_mode == "tiny-conv-ae") return CodecMode::TinyConvAe;
        throw ParamError("config: codec_mode must be identity or tiny-conv-ae");
    }

    TrainConfig train_config() const {
        TrainConfig t = TrainConfig::defaults(variant());
        if (train_epochs > 0) t.epochs = train_epochs;
        t.batch_size = train_batch_size;
        t.learning_rate = train_lr;
        t.weight_decay = train_weight_decay;
        if (train_optimizer == "adam")
            t.optimizer = OptimizerKind::Adam;
        else if (train_optimizer == "adamw")
            t.optimizer = OptimizerKind::AdamW;
        else
            throw ParamError("config: train_optimizer must be adam or adamw");
        t.seed = seed;
        t.T = schedule_T;
        t.guidance_w = train_guidance_w;
        t.inference_steps = train_inference_steps;
        t.max_steps = train_steps;
        t.clip_norm = train_clip_norm;
        return t;
    }

    NoiseSchedule schedule() const {
        return make_schedule(schedule_T, schedule_beta_start, schedule_beta_end, ScheduleKind::Linear,
                             schedule_eta);
    }
};

namespace detail {

template <typename T>
T parse_scalar(const std::string& v, const char* key);

template <>
inline std::string parse_scalar<std::string>(const std::string& v, const char*) {
    return v;
}
template <>
inline int parse_scalar<int>(const std::string& v, const char* key) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ParamError(std::string("config: key '") + key + "' expects an integer, got '" + v + "'");
    }
}
template <>
inline uint64_t parse_scalar<uint64_t>(const std::string& v, const char* key) {
    try {
        if (v.find('-') != std::string::npos) throw std::invalid_argument(v);  // stoull wraps negatives
        size_t pos = 0;
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ParamError(std::string("config: key '") + key + "' expects an unsigned integer, got '" + v + "'");
    }
}
template <>
inline double parse_scalar<double>(const std::string& v, const char* key) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ParamError(std::string("config: key '") + key + "' expects a number, got '" + v + "'");
    }
}
template <>
inline bool parse_scalar<bool>(const std::string& v, const char* key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ParamError(std::string("config: key '") + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    using detail::parse_scalar;
    auto is = [&](const char* k) { return key == k; };
    if (is("seed")) seed = parse_scalar<uint64_t>(value, "seed");
    else if (is("image_size")) image_size = parse_scalar<int>(value, "image_size");
    else if (is("workers")) workers = parse_scalar<int>(value, "workers");
    else if (is("synth_n_train")) synth_n_train = parse_scalar<int>(value, "synth_n_train");
    else if (is("synth_n_test_good")) synth_n_test_good = parse_scalar<int>(value, "synth_n_test_good");
    else if (is("synth_n_test_defect")) synth_n_test_defect = parse_scalar<int>(value, "synth_n_test_defect");
    else if (is("synth_texture")) synth_texture = value;
    else if (is("synth_defect")) synth_defect = value;
    else if (is("synth_defect_intensity")) synth_defect_intensity = parse_scalar<double>(value, "synth_defect_intensity");
    else if (is("synth_category")) synth_category = value;
    else if (is("extractor_kind")) extractor_kind = value;
    else if (is("extractor_seed")) extractor_seed = parse_scalar<uint64_t>(value, "extractor_seed");
    else if (is("extractor_layers")) extractor_layers = value;
    else if (is("extractor_dim")) extractor_dim = parse_scalar<int>(value, "extractor_dim");
    else if (is("extractor_m")) extractor_m = parse_scalar<int>(value, "extractor_m");
    else if (is("extractor_import_path")) extractor_import_path = value;
    else if (is("bank_xi")) bank_xi = parse_scalar<int>(value, "bank_xi");
    else if (is("bank_init")) bank_init = value;
    else if (is("fcm_d_k")) fcm_d_k = parse_scalar<int>(value, "fcm_d_k");
    else if (is("fcm_heads")) fcm_heads = parse_scalar<int>(value, "fcm_heads");
    else if (is("schedule_T")) schedule_T = parse_scalar<int>(value, "schedule_T");
    else if (is("schedule_beta_start")) schedule_beta_start = parse_scalar<double>(value, "schedule_beta_start");
    else if (is("schedule_beta_end")) schedule_beta_end = parse_scalar<double>(value, "schedule_beta_end");
    else if (is("schedule_eta")) schedule_eta = parse_scalar<double>(value, "schedule_eta");
    else if (is("model_widths")) model_widths = value;
    else if (is("model_heads")) model_heads = parse_scalar<int>(value, "model_heads");
    else if (is("model_time_dim")) model_time_dim = parse_scalar<int>(value, "model_time_dim");
    else if (is("model_zero_init_cross")) model_zero_init_cross = parse_scalar<bool>(value, "model_zero_init_cross");
    else if (is("codec_mode")) codec_mode = value;
    else if (is("codec_pretrain_steps")) codec_pretrain_steps = parse_scalar<int>(value, "codec_pretrain_steps");
    else if (is("train_variant")) train_variant = value;
    else if (is("train_epochs")) train_epochs = parse_scalar<int>(value, "train_epochs");
    else if (is("train_steps")) train_steps = parse_scalar<int>(value, "train_steps");
    else if (is("train_batch_size")) train_batch_size = parse_scalar<int>(value, "train_batch_size");
    else if (is("train_lr")) train_lr = parse_scalar<double>(value, "train_lr");
    else if (is("train_weight_decay")) train_weight_decay = parse_scalar<double>(value, "train_weight_decay");
    else if (is("train_optimizer")) train_optimizer = value;
    else if (is("train_guidance_w")) train_guidance_w = parse_scalar<double>(value, "train_guidance_w");
    else if (is("train_inference_steps")) train_inference_steps = parse_scalar<int>(value, "train_inference_steps");
    else if (is("train_clip_norm")) train_clip_norm = parse_scalar<double>(value, "train_clip_norm");
    else if (is("score_layers")) score_layers = value;
    else if (is("score_sigma_l")) score_sigma_l = value;
    else if (is("score_smooth_sigma")) score_smooth_sigma = parse_scalar<double>(value, "score_smooth_sigma");
    else if (is("mask_suffix")) mask_suffix = value;
    else throw ParamError("config: unknown key '" + key + "'");
}

inline RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    const std::string text = buf.str();

    RunConfig cfg;
    const auto first = text.find_first_not_of(" \t\r\n");
    const bool looks_json = first != std::string::npos && text[first] == '{';
    if (looks_json) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParamError(std::string("config: JSON parse failure: ") + e.what());
        }
        if (!j.is_object()) throw ParamError("config: top-level JSON value must be an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            std::string v;
            if (it.value().is_string())
                v = it.value().get<std::string>();
            else
                v = it.value().dump();
            cfg.set(it.key(), v);
        }
    } else {
        // flat TOML subset: key = value
        std::istringstream lines(text);
        std::string line;
        int lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParamError("config: line " + std::to_string(lineno) + " is not 'key = value'");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
                value = value.substr(1, value.size() - 2);
            cfg.set(key, value);
        }
    }
    cfg.validate();
    return cfg;
}

inline void RunConfig::validate() const {
    if (image_size < 8 || image_size % 8 != 0)
        throw ParamError("config: image_size must be a multiple of 8, >= 8");
    if (workers < 1) throw ParamError("config: workers must be >= 1");
    if (bank_xi < 0) throw ParamError("config: bank_xi must be >= 0");
    if (bank_xi > 1000) throw ParamError("config: bank_xi must stay within 1000");
    if (fcm_d_k < 1 || fcm_heads < 1 || fcm_d_k % fcm_heads != 0)
        throw ParamError("config: fcm_d_k must be a positive multiple of fcm_heads");
    (void)variant();
    (void)synth_spec();
    (void)extractor_config();
    (void)backbone_config().validate();
    (void)codec();
    train_config().validate();
    (void)schedule();
    const auto layers = parse_int_list(score_layers, "score_layers");
    const auto sigmas = parse_double_list(score_sigma_l, "score_sigma_l");
    if (layers.size() != sigmas.size())
        throw ParamError("config: score_layers and score_sigma_l must pair up");
    if (score_smooth_sigma < 0) throw ParamError("config: score_smooth_sigma must be >= 0");
}

inline std::string RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["image_size"] = image_size;
    j["workers"] = workers;
    j["synth_n_train"] = synth_n_train;
    j["synth_n_test_good"] = synth_n_test_good;
    j["synth_n_test_defect"] = synth_n_test_defect;
    j["synth_texture"] = synth_texture;
    j["synth_defect"] = synth_defect;
    j["synth_defect_intensity"] = synth_defect_intensity;
    j["synth_category"] = synth_category;
    j["extractor_kind"] = extractor_kind;
    j["extractor_seed"] = extractor_seed;
    j["extractor_layers"] = extractor_layers;
    j["extractor_dim"] = extractor_dim;
    j["extractor_m"] = extractor_m;
    j["extractor_import_path"] = extractor_import_path;
    j["bank_xi"] = bank_xi;
    j["bank_init"] = bank_init;
    j["fcm_d_k"] = fcm_d_k;
    j["fcm_heads"] = fcm_heads;
    j["schedule_T"] = schedule_T;
    j["schedule_beta_start"] = schedule_beta_start;
    j["schedule_beta_end"] = schedule_beta_end;
    j["schedule_eta"] = schedule_eta;
    j["model_widths"] = model_widths;
    j["model_heads"] = model_heads;
    j["model_time_dim"] = model_time_dim;
    j["model_zero_init_cross"] = model_zero_init_cross;
    j["codec_mode"] = codec_mode;
    j["codec_pretrain_steps"] = codec_pretrain_steps;
    j["train_variant"] = train_variant;
    j["train_epochs"] = train_epochs;
    j["train_steps"] = train_steps;
    j["train_batch_size"] = train_batch_size;
    j["train_lr"] = train_lr;
    j["train_weight_decay"] = train_weight_decay;
    j["train_optimizer"] = train_optimizer;
    j["train_guidance_w"] = train_guidance_w;
    j["train_inference_steps"] = train_inference_steps;
    j["train_clip_norm"] = train_clip_norm;
    j["score_layers"] = score_layers;
    j["score_sigma_l"] = score_sigma_l;
    j["score_smooth_sigma"] = score_smooth_sigma;
    j["mask_suffix"] = mask_suffix;
    return j.dump(2);
}

}  // namespace ccad
