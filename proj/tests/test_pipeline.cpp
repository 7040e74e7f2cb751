#include "ccad/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ccad/core/rng.hpp"

using namespace ccad;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// digest of an entire directory tree: relative paths + content bytes
uint64_t tree_digest(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& f : files) {
        const auto rel = fs::relative(f, root).string();
        h = fnv1a64(rel.data(), rel.size(), h);
        auto bytes = slurp(f);
        h = fnv1a64(bytes.data(), bytes.size(), h);
    }
    return h;
}

SynthSpec small_spec(uint64_t seed = 3) {
    SynthSpec s;
    s.seed = seed;
    s.n_train = 4;
    s.n_test_good = 2;
    s.n_test_defect = 2;
    s.size = 16;
    return s;
}

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.seed = 9;
    cfg.image_size = 16;
    cfg.synth_n_train = 4;
    cfg.synth_n_test_good = 2;
    cfg.synth_n_test_defect = 2;
    cfg.extractor_dim = 8;
    cfg.extractor_m = 8;
    cfg.bank_xi = 4;
    cfg.model_widths = "4,8";
    cfg.model_heads = 2;
    cfg.model_time_dim = 8;
    cfg.schedule_T = 20;
    cfg.train_steps = 2;
    cfg.train_batch_size = 2;
    cfg.train_inference_steps = 2;
    cfg.fcm_d_k = 8;
    cfg.fcm_heads = 2;
    cfg.score_smooth_sigma = 1.0;
    cfg.validate();
    return cfg;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CCAD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

}  // namespace

TEST(Synth, SameSpecWritesByteIdenticalTrees) {
    auto d1 = fresh_dir("ccad_synth_a");
    auto d2 = fresh_dir("ccad_synth_b");
    synth_generate(small_spec(), d1.string());
    synth_generate(small_spec(), d2.string());
    EXPECT_EQ(tree_digest(d1), tree_digest(d2));
    synth_generate(small_spec(4), d2.string());  // different seed differs
    EXPECT_NE(tree_digest(d1), tree_digest(d2));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Synth, NullDefectKeepsTextureButMarksMask) {
    auto dir = fresh_dir("ccad_synth_null");
    auto spec = small_spec();
    spec.defect_intensity = 0.0;
    auto man = synth_generate(spec, dir.string());
    const auto& cat = man.categories[0];
    int defect_count = 0;
    for (const auto& e : cat.test) {
        if (e.defect_type == "good") continue;
        ++defect_count;
        auto mask = load_mask(e.mask_path, cat.height, cat.width);
        double mask_sum = 0;
        for (float v : mask.data) mask_sum += v;
        EXPECT_GT(mask_sum, 0);  // region still marked
    }
    EXPECT_EQ(defect_count, 2);
    fs::remove_all(dir);
}

TEST(Synth, DefectPixelsCarryTheInjectedContrast) {
    auto dir = fresh_dir("ccad_synth_contrast");
    auto spec = small_spec(11);
    spec.n_test_defect = 6;
    spec.defect_intensity = 0.6;
    auto man = synth_generate(spec, dir.string());

    // regenerate the nominal texture the defect was stamped onto
    auto clean_spec = spec;
    clean_spec.defect_intensity = 0.0;
    auto clean_dir = fresh_dir("ccad_synth_contrast_clean");
    auto clean_man = synth_generate(clean_spec, clean_dir.string());

    size_t masked = 0, strong = 0;
    const auto& cat = man.categories[0];
    const auto& clean_cat = clean_man.categories[0];
    for (size_t i = 0; i < cat.test.size(); ++i) {
        if (cat.test[i].defect_type == "good") continue;
        auto behind = load_image_normalized(clean_cat.test[i].path);
        auto img = load_image_normalized(cat.test[i].path);
        auto mask = load_mask(cat.test[i].mask_path, cat.height, cat.width);
        for (int y = 0; y < cat.height; ++y)
            for (int x = 0; x < cat.width; ++x) {
                if (mask.at(y, x) < 0.5f) continue;
                ++masked;
                // [-1,1] range: intensity 0.6 becomes a gap of 1.2
                const double diff = std::abs(img.at(0, 0, y, x) - behind.at(0, 0, y, x));
                if (diff >= 2 * spec.defect_intensity - 4.0 / 255.0) ++strong;
            }
    }
    ASSERT_GT(masked, 0u);
    EXPECT_GE(static_cast<double>(strong) / static_cast<double>(masked), 0.95);
    fs::remove_all(dir);
    fs::remove_all(clean_dir);
}

TEST(Ingest, SynthRoundTripCountsMatchSpec) {
    auto dir = fresh_dir("ccad_ingest_rt");
    auto spec = small_spec(13);
    auto man = synth_generate(spec, dir.string());
    const auto& cat = man.categories[0];
    EXPECT_EQ(static_cast<int>(cat.train.size()), spec.n_train);
    EXPECT_EQ(static_cast<int>(cat.test.size()), spec.n_test_good + spec.n_test_defect);
    EXPECT_EQ(cat.height, spec.size);

    auto again = ingest(dir.string());
    EXPECT_EQ(again.categories[0].train.size(), cat.train.size());
    fs::remove_all(dir);
}

TEST(Ingest, EmptyCategoryAndOrphanDefectAreErrors) {
    auto dir = fresh_dir("ccad_ingest_err");
    fs::create_directories(dir / "cat" / "train" / "good");
    EXPECT_THROW(ingest(dir.string()), IngestError);

    // minimal valid train image, then an orphan defect image without mask
    std::vector<uint8_t> px(16 * 16, 100);
    png::write((dir / "cat" / "train" / "good" / "000.png").string(), png::gray8(16, 16, px));
    fs::create_directories(dir / "cat" / "test" / "crack");
    png::write((dir / "cat" / "test" / "crack" / "007.png").string(), png::gray8(16, 16, px));
    try {
        ingest(dir.string());
        FAIL() << "expected IngestError";
    } catch (const IngestError& e) {
        EXPECT_NE(std::string(e.what()).find("007.png"), std::string::npos);
    }

    // a mask with the wrong extent is also an offender
    fs::create_directories(dir / "cat" / "ground_truth" / "crack");
    std::vector<uint8_t> small_px(8 * 8, 255);
    png::write((dir / "cat" / "ground_truth" / "crack" / "007_mask.png").string(),
               png::gray8(8, 8, small_px));
    EXPECT_THROW(ingest(dir.string()), IngestError);
    fs::remove_all(dir);
}

TEST(Config, TomlAndJsonParseToTheSameConfig) {
    auto dir = fresh_dir("ccad_cfg");
    const auto toml = dir / "c.toml";
    {
        std::ofstream f(toml);
        f << "# comment\nseed = 123\nimage_size = 16\ntrain_variant = \"c\"\n"
          << "train_lr = 5e-5\nmodel_zero_init_cross = false\nmodel_widths = \"4,8\"\n"
          << "model_heads = 2\nmodel_time_dim = 8\nextractor_dim = 8\n";
    }
    const auto json = dir / "c.json";
    {
        std::ofstream f(json);
        f << R"({"seed":123,"image_size":16,"train_variant":"c","train_lr":5e-5,)"
          << R"("model_zero_init_cross":false,"model_widths":"4,8","model_heads":2,)"
          << R"("model_time_dim":8,"extractor_dim":8})";
    }
    auto a = RunConfig::from_file(toml.string());
    auto b = RunConfig::from_file(json.string());
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.seed, 123u);
    EXPECT_EQ(a.variant(), Variant::C);
    EXPECT_FALSE(a.model_zero_init_cross);
    fs::remove_all(dir);
}

TEST(Config, UnknownAndMalformedKeysRejected) {
    RunConfig cfg;
    EXPECT_THROW(cfg.set("not_a_key", "1"), ParamError);
    EXPECT_THROW(cfg.set("train_lr", "fast"), ParamError);
    EXPECT_THROW(cfg.set("seed", "-1"), ParamError);
    cfg.set("train_lr", "0.001");
    EXPECT_DOUBLE_EQ(cfg.train_lr, 0.001);

    RunConfig bad;
    bad.image_size = 15;
    EXPECT_THROW(bad.validate(), ParamError);
    RunConfig big_bank;
    big_bank.bank_xi = 1001;  // the bank stays within 1000 samples
    EXPECT_THROW(big_bank.validate(), ParamError);
}

TEST(Pipeline, BankCheckpointEchoMatchesConfig) {
    auto dir = fresh_dir("ccad_pl_echo");
    auto cfg = tiny_run_config();
    auto man = synth_generate(cfg.synth_spec(), (dir / "data").string());
    auto bank = build_bank_for(cfg, man);
    EXPECT_EQ(bank.xi, 4);
    EXPECT_EQ(bank.extractor_fingerprint, cfg.extractor_config().fingerprint());

    auto bundle = train_pipeline(cfg, man, bank);
    const auto ckpt = dir / "model.ckpt";
    save_bundle(ckpt.string(), bundle);
    auto loaded = load_bundle(ckpt.string());
    EXPECT_EQ(loaded.config_json, cfg.to_json());  // audit invariant
    EXPECT_EQ(loaded.variant(), Variant::V);

    // loaded model reproduces the trained model's outputs exactly
    Rng r1(42), r2(42);
    auto img = load_image_normalized(man.categories[0].test[0].path);
    auto a = reconstruct_image(cfg, bundle, bank, img, r1);
    auto b = reconstruct_image(cfg, loaded, bank, img, r2);
    EXPECT_EQ(a.data, b.data);
    fs::remove_all(dir);
}

TEST(Pipeline, EvaluateIsWorkerCountInvariant) {
    auto dir = fresh_dir("ccad_pl_workers");
    auto cfg = tiny_run_config();
    auto man = synth_generate(cfg.synth_spec(), (dir / "data").string());
    auto bank = build_bank_for(cfg, man);
    auto bundle = train_pipeline(cfg, man, bank);

    auto serial_cfg = cfg;
    serial_cfg.workers = 1;
    auto parallel_cfg = cfg;
    parallel_cfg.workers = 4;
    auto a = evaluate_pipeline(serial_cfg, man, bank, bundle);
    auto b = evaluate_pipeline(parallel_cfg, man, bank, bundle);
    EXPECT_EQ(report_to_json(cfg, a.report), report_to_json(cfg, b.report));
    fs::remove_all(dir);
}

TEST(Pipeline, ReportJsonIsOrderedAndComplete) {
    auto dir = fresh_dir("ccad_pl_report");
    auto cfg = tiny_run_config();
    auto man = synth_generate(cfg.synth_spec(), (dir / "data").string());
    auto bank = build_bank_for(cfg, man);
    auto bundle = train_pipeline(cfg, man, bank);
    auto out = evaluate_pipeline(cfg, man, bank, bundle);
    const auto text = report_to_json(cfg, out.report);
    auto j = nlohmann::json::parse(text);
    EXPECT_EQ(j.at("version").get<std::string>(), kVersion);
    EXPECT_EQ(j.at("seed").get<uint64_t>(), cfg.seed);
    EXPECT_EQ(j.at("per_image").size(), man.categories[0].test.size());
    for (const char* k :
         {"class_auroc", "pixel_auroc", "class_f1_max", "pixel_f1_max", "class_ap", "pixel_ap"}) {
        const double v = j.at("metrics").at(k).get<double>();
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    fs::remove_all(dir);
}

TEST(Cli, ExitCodesAndDiagnostics) {
    auto dir = fresh_dir("ccad_cli_t");
    const auto cfg_path = dir / "cfg.toml";
    {
        std::ofstream f(cfg_path);
        f << "seed = 9\nimage_size = 16\nsynth_n_train = 4\nsynth_n_test_good = 2\n"
          << "synth_n_test_defect = 2\nextractor_dim = 8\nbank_xi = 4\nmodel_widths = \"4,8\"\n"
          << "model_heads = 2\nmodel_time_dim = 8\nschedule_T = 20\ntrain_steps = 2\n"
          << "train_batch_size = 2\ntrain_inference_steps = 2\nfcm_d_k = 8\nfcm_heads = 2\n";
    }
    const std::string base = "--config " + cfg_path.string() + " ";
    const auto data = (dir / "data").string();

    EXPECT_EQ(run_cli(base + "synth-data --out " + data), 0);
    EXPECT_EQ(run_cli(base + "build-bank --data " + data + " --out " + (dir / "bank").string()), 0);
    // no bank -> validation failure
    EXPECT_EQ(run_cli(base + "train --data " + data + " --out " + (dir / "m").string()), 1);
    EXPECT_EQ(run_cli(base + "train --data " + data + " --bank " + (dir / "bank").string() + " --out " +
                      (dir / "m").string()),
              0);
    EXPECT_EQ(run_cli(base + "evaluate --data " + data + " --bank " + (dir / "bank").string() +
                      " --ckpt " + (dir / "m").string() + " --out " + (dir / "r.json").string()),
              0);
    EXPECT_EQ(run_cli(base + "report --in " + (dir / "r.json").string()), 0);
    // unknown config key -> validation failure
    EXPECT_EQ(run_cli(base + "--set bogus=1 synth-data --out " + data), 1);
    // missing dataset -> validation failure
    EXPECT_EQ(run_cli(base + "build-bank --data /nonexistent --out " + (dir / "b2").string()), 1);
    fs::remove_all(dir);
}

TEST(Cli, EvaluateIsIdempotentByteForByte) {
    auto dir = fresh_dir("ccad_cli_idem");
    const auto cfg_path = dir / "cfg.toml";
    {
        std::ofstream f(cfg_path);
        f << "seed = 21\nimage_size = 16\nsynth_n_train = 4\nsynth_n_test_good = 2\n"
          << "synth_n_test_defect = 2\nextractor_dim = 8\nbank_xi = 4\nmodel_widths = \"4,8\"\n"
          << "model_heads = 2\nmodel_time_dim = 8\nschedule_T = 20\ntrain_steps = 2\n"
          << "train_batch_size = 2\ntrain_inference_steps = 2\nfcm_d_k = 8\nfcm_heads = 2\n";
    }
    const std::string base = "--config " + cfg_path.string() + " ";
    const auto data = (dir / "data").string();
    ASSERT_EQ(run_cli(base + "synth-data --out " + data), 0);
    ASSERT_EQ(run_cli(base + "build-bank --data " + data + " --out " + (dir / "bank").string()), 0);
    ASSERT_EQ(run_cli(base + "train --data " + data + " --bank " + (dir / "bank").string() + " --out " +
                      (dir / "m").string()),
              0);
    const std::string eval = base + "evaluate --data " + data + " --bank " + (dir / "bank").string() +
                             " --ckpt " + (dir / "m").string() + " --out ";
    ASSERT_EQ(run_cli(eval + (dir / "r1.json").string()), 0);
    ASSERT_EQ(run_cli(eval + (dir / "r2.json").string()), 0);
    EXPECT_EQ(slurp(dir / "r1.json"), slurp(dir / "r2.json"));
    fs::remove_all(dir);
}
