#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ccad/pipeline.hpp"

namespace {

using namespace ccad;

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ParamError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

void require_file(const std::string& path, const std::string& what) {
    if (path.empty() || !std::filesystem::is_regular_file(path))
        throw ConfigError(what + " required (missing file: " + (path.empty() ? "<unset>" : path) + ")");
}

int run(int argc, char** argv) {
    CLI::App app{"CCAD: compressed-global-feature-conditioned diffusion anomaly detection"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "RunConfig file (JSON or flat TOML)");
    app.add_option("--set", overrides, "override a config key (key=value, repeatable)");

    std::string data_dir, out_path, bank_path, ckpt_path, recon_dir, maps_dir, in_path;
    bool ablate_bank = false;

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic MVTec-layout dataset");
    synth->add_option("--out", out_path, "output dataset root")->required();

    auto* build = app.add_subcommand("build-bank", "extract features and compress the coarse bank");
    build->add_option("--data", data_dir, "dataset root")->required();
    build->add_option("--out", out_path, "bank file to write")->required();

    auto* train_cmd = app.add_subcommand("train", "train a CCAD variant on nominal images");
    train_cmd->add_option("--data", data_dir, "dataset root")->required();
    train_cmd->add_option("--bank", bank_path, "coarse bank file");
    train_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    train_cmd->add_flag("--ablate-bank", ablate_bank, "train with an empty bank (conditioning off)");

    auto* recon_cmd = app.add_subcommand("reconstruct", "write reconstructions of the test set");
    recon_cmd->add_option("--data", data_dir, "dataset root")->required();
    recon_cmd->add_option("--bank", bank_path, "coarse bank file");
    recon_cmd->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    recon_cmd->add_option("--out", out_path, "output directory for PNGs")->required();
    recon_cmd->add_flag("--ablate-bank", ablate_bank, "reconstruct with an empty bank");

    auto* score_cmd = app.add_subcommand("score", "anomaly maps from originals and reconstructions");
    score_cmd->add_option("--data", data_dir, "dataset root")->required();
    score_cmd->add_option("--recon", recon_dir, "directory of reconstructed PNGs")->required();
    score_cmd->add_option("--out", maps_dir, "output directory for 16-bit map PNGs")->required();

    auto* eval_cmd = app.add_subcommand("evaluate", "reconstruct, score and report metrics");
    eval_cmd->add_option("--data", data_dir, "dataset root")->required();
    eval_cmd->add_option("--bank", bank_path, "coarse bank file");
    eval_cmd->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    eval_cmd->add_option("--out", out_path, "report JSON to write")->required();
    eval_cmd->add_option("--maps", maps_dir, "optional directory for map PNGs");
    eval_cmd->add_option("--recon", recon_dir, "optional directory for reconstruction PNGs");
    eval_cmd->add_flag("--ablate-bank", ablate_bank, "evaluate with an empty bank");

    auto* report_cmd = app.add_subcommand("report", "print and normalize an existing report");
    report_cmd->add_option("--in", in_path, "report JSON")->required();
    report_cmd->add_option("--out", out_path, "normalized JSON to write");

    CLI11_PARSE(app, argc, argv);

    auto cfg = load_config(config_path, overrides);

    auto load_bank_or_ablate = [&]() -> CoarseFeatureBank {
        if (ablate_bank) return make_empty_bank(cfg.extractor_dim);
        if (bank_path.empty() || !std::filesystem::is_regular_file(bank_path))
            throw ConfigError("bank required (pass --bank <file> or --ablate-bank)");
        auto bank = load_bank(bank_path);
        if (bank.vectors.dim(1) != cfg.extractor_dim)
            throw ConfigError("bank dimension " + std::to_string(bank.vectors.dim(1)) +
                              " does not match extractor_dim " + std::to_string(cfg.extractor_dim));
        return bank;
    };

    if (synth->parsed()) {
        auto man = synth_generate(cfg.synth_spec(), out_path, cfg.mask_suffix);
        std::printf("wrote %s: %d train, %d test images\n", out_path.c_str(),
                    static_cast<int>(man.categories[0].train.size()),
                    static_cast<int>(man.categories[0].test.size()));
        return 0;
    }

    if (build->parsed()) {
        auto man = ingest(data_dir, cfg.mask_suffix);
        std::vector<std::string> warnings;
        auto bank = build_bank_for(cfg, man, &warnings);
        for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
        save_bank(bank, out_path);
        std::printf("wrote %s: xi=%d d=%d from %llu rows\n", out_path.c_str(), bank.xi,
                    bank.vectors.dim(1), static_cast<unsigned long long>(bank.source_space_rows));
        return 0;
    }

    if (train_cmd->parsed()) {
        auto man = ingest(data_dir, cfg.mask_suffix);
        auto bank = load_bank_or_ablate();
        auto bundle = train_pipeline(cfg, man, bank);
        save_bundle(out_path, bundle);
        const auto& h = bundle.state.loss_history;
        std::printf("trained %s variant for %lld steps (first loss %.4f, last %.4f); wrote %s\n",
                    cfg.train_variant.c_str(), static_cast<long long>(bundle.state.steps),
                    h.empty() ? 0.0 : h.front(), h.empty() ? 0.0 : h.back(), out_path.c_str());
        return 0;
    }

    if (recon_cmd->parsed()) {
        auto man = ingest(data_dir, cfg.mask_suffix);
        auto bank = load_bank_or_ablate();
        auto bundle = load_bundle(ckpt_path);
        require_bundle_matches(cfg, bundle);
        const auto& cat = pick_category(cfg, man);
        std::filesystem::create_directories(out_path);
        for (size_t i = 0; i < cat.test.size(); ++i) {
            auto image = load_image_normalized(cat.test[i].path);
            Rng rng(mix_seed(cfg.seed, 0xEC0 + static_cast<uint64_t>(i)));
            auto recon = reconstruct_image(cfg, bundle, bank, image, rng);
            const auto name = cat.test[i].defect_type + "_" + stem_of(cat.test[i].path) + ".png";
            save_image_normalized(recon, (std::filesystem::path(out_path) / name).string());
        }
        std::printf("wrote %zu reconstructions to %s\n", cat.test.size(), out_path.c_str());
        return 0;
    }

    if (score_cmd->parsed()) {
        auto man = ingest(data_dir, cfg.mask_suffix);
        const auto& cat = pick_category(cfg, man);
        const auto psi = cfg.psi_config();
        const auto layers = RunConfig::parse_int_list(cfg.score_layers, "score_layers");
        const auto sigmas = RunConfig::parse_double_list(cfg.score_sigma_l, "score_sigma_l");
        std::filesystem::create_directories(maps_dir);
        nlohmann::ordered_json scores = nlohmann::ordered_json::array();
        for (const auto& entry : cat.test) {
            const auto name = entry.defect_type + "_" + stem_of(entry.path) + ".png";
            const auto recon_path = std::filesystem::path(recon_dir) / name;
            if (!std::filesystem::is_regular_file(recon_path))
                throw ConfigError("score: missing reconstruction " + recon_path.string());
            auto image = load_image_normalized(entry.path);
            auto recon = load_image_normalized(recon_path.string());
            auto map = anomaly_map(image, recon, psi, layers, sigmas);
            save_map_png(map, (std::filesystem::path(maps_dir) / name).string());
            nlohmann::ordered_json e;
            e["path"] = entry.path;
            e["defect_type"] = entry.defect_type;
            e["score"] = image_score(map, cfg.score_smooth_sigma);
            scores.push_back(e);
        }
        write_text_file((std::filesystem::path(maps_dir) / "scores.json").string(),
                        scores.dump(2) + "\n");
        std::printf("wrote %zu maps to %s\n", cat.test.size(), maps_dir.c_str());
        return 0;
    }

    if (eval_cmd->parsed()) {
        auto man = ingest(data_dir, cfg.mask_suffix);
        auto bank = load_bank_or_ablate();
        auto bundle = load_bundle(ckpt_path);
        require_bundle_matches(cfg, bundle);
        auto outputs = evaluate_pipeline(cfg, man, bank, bundle);
        write_text_file(out_path, report_to_json(cfg, outputs.report));
        const auto& cat = pick_category(cfg, man);
        if (!maps_dir.empty()) {
            std::filesystem::create_directories(maps_dir);
            for (size_t i = 0; i < outputs.maps.size(); ++i) {
                const auto name = cat.test[i].defect_type + "_" + stem_of(cat.test[i].path) + ".png";
                save_map_png(outputs.maps[i], (std::filesystem::path(maps_dir) / name).string());
            }
        }
        if (!recon_dir.empty()) {
            std::filesystem::create_directories(recon_dir);
            for (size_t i = 0; i < outputs.reconstructions.size(); ++i) {
                const auto name = cat.test[i].defect_type + "_" + stem_of(cat.test[i].path) + ".png";
                save_image_normalized(outputs.reconstructions[i],
                                      (std::filesystem::path(recon_dir) / name).string());
            }
        }
        std::printf("class auroc %.4f  pixel auroc %.4f  (report: %s)\n", outputs.report.class_auroc,
                    outputs.report.pixel_auroc, out_path.c_str());
        return 0;
    }

    if (report_cmd->parsed()) {
        std::ifstream f(in_path);
        if (!f) throw IoError("report: cannot open " + in_path);
        std::stringstream buf;
        buf << f.rdbuf();
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(buf.str());
        } catch (const nlohmann::json::exception& e) {
            throw DecodeError(DecodeError::Kind::Corrupt, std::string("report: bad JSON: ") + e.what());
        }
        if (!j.contains("metrics")) throw ParamError("report: no metrics object in " + in_path);
        for (auto it = j["metrics"].begin(); it != j["metrics"].end(); ++it)
            std::printf("%-14s %.6f\n", it.key().c_str(), it.value().get<double>());
        if (!out_path.empty()) write_text_file(out_path, j.dump(2) + "\n");
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ccad::ParamError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ccad::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ccad::IngestError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ccad::DecodeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ccad::MetricError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ccad::ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fatal: %s\n", e.what());
        return 2;
    }
}
