#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"
#include "ccad/core/rng.hpp"
#include "ccad/dataset.hpp"
#include "ccad/io/png.hpp"

namespace ccad {

enum class SynthTexture { Checker, Bands };
enum class SynthDefect { Square, Scratch, Blob };

// Deterministic MVTec-layout fixture generator. Every pixel is a pure
// function of the spec, so identical specs write byte-identical trees.
struct SynthSpec {
    uint64_t seed = 0;
    int n_train = 16;
    int n_test_good = 8;
    int n_test_defect = 8;
    int size = 32;
    SynthTexture texture = SynthTexture::Checker;
    SynthDefect defect = SynthDefect::Square;
    double defect_intensity = 0.6;
    std::string category = "synthcat";

    void validate() const {
        if (n_train < 1 || n_test_good < 0 || n_test_defect < 0)
            throw ParamError("SynthSpec: counts must be positive");
        if (size < 8 || size % 8 != 0) throw ParamError("SynthSpec: size must be a multiple of 8, >= 8");
        if (defect_intensity < 0 || defect_intensity > 1)
            throw ParamError("SynthSpec: defect_intensity must lie in [0,1]");
    }
};

namespace detail {

// nominal texture in [0,1]
inline std::vector<double> synth_texture(const SynthSpec& spec, uint64_t image_key) {
    Rng rng(mix_seed(spec.seed, image_key));
    const int n = spec.size;
    std::vector<double> img(static_cast<size_t>(n) * n);
    if (spec.texture == SynthTexture::Checker) {
        const int period = rng.uniform_int(0, 1) ? 4 : 8;
        const int px = rng.uniform_int(0, period - 1);
        const int py = rng.uniform_int(0, period - 1);
        const double jitter = (rng.uniform() - 0.5) * 0.06;
        const double lo = 0.25 + jitter, hi = 0.75 + jitter;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const bool cell = (((x + px) / period) + ((y + py) / period)) % 2 == 0;
                img[static_cast<size_t>(y) * n + x] = cell ? hi : lo;
            }
    } else {
        const double theta = rng.uniform() * 3.14159265358979;
        const double lambda = 6.0 + rng.uniform() * 6.0;
        const double phase = rng.uniform() * 6.28318530717959;
        const double cx = std::cos(theta), sx = std::sin(theta);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double t = (x * cx + y * sx) * 2 * 3.14159265358979 / lambda + phase;
                img[static_cast<size_t>(y) * n + x] = 0.5 + 0.25 * std::sin(t) + 0.08 * std::sin(2.7 * t);
            }
    }
    return img;
}

// defect region mask (1 inside)
inline std::vector<uint8_t> synth_region(const SynthSpec& spec, uint64_t image_key) {
    Rng rng(mix_seed(spec.seed, mix_seed(0xDEFEC7ULL, image_key)));
    const int n = spec.size;
    std::vector<uint8_t> mask(static_cast<size_t>(n) * n, 0);
    switch (spec.defect) {
        case SynthDefect::Square: {
            const int s = rng.uniform_int(n / 8, n / 4);
            const int x0 = rng.uniform_int(1, n - s - 1);
            const int y0 = rng.uniform_int(1, n - s - 1);
            for (int y = y0; y < y0 + s; ++y)
                for (int x = x0; x < x0 + s; ++x) mask[static_cast<size_t>(y) * n + x] = 1;
            break;
        }
        case SynthDefect::Scratch: {
            const int x0 = rng.uniform_int(2, n - 3), y0 = rng.uniform_int(2, n - 3);
            const int x1 = rng.uniform_int(2, n - 3), y1 = rng.uniform_int(2, n - 3);
            const int steps = 2 * n;
            const int thick = rng.uniform_int(0, 1);
            for (int i = 0; i <= steps; ++i) {
                const double t = static_cast<double>(i) / steps;
                const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
                const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
                for (int dy = -thick; dy <= thick; ++dy)
                    for (int dx = -thick; dx <= thick; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < n && xx >= 0 && xx < n)
                            mask[static_cast<size_t>(yy) * n + xx] = 1;
                    }
            }
            break;
        }
        case SynthDefect::Blob: {
            const double cx = 2 + rng.uniform() * (n - 4);
            const double cy = 2 + rng.uniform() * (n - 4);
            const double rx = n / 10.0 + rng.uniform() * n / 8.0;
            const double ry = n / 10.0 + rng.uniform() * n / 8.0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    const double u = (x - cx) / rx, v = (y - cy) / ry;
                    if (u * u + v * v <= 1.0) mask[static_cast<size_t>(y) * n + x] = 1;
                }
            break;
        }
    }
    return mask;
}

inline void write_gray(const std::string& path, const std::vector<double>& img, int n) {
    std::vector<uint8_t> px(img.size());
    for (size_t i = 0; i < img.size(); ++i)
        px[i] = static_cast<uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
    png::write(path, png::gray8(n, n, px));
}

}  // namespace detail

// Writes the dataset tree and returns its manifest. Defect pixels move
// away from the local background by defect_intensity, toward whichever
// side has headroom, so the injected contrast is exact.
inline DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir,
                                      const std::string& mask_suffix = "_mask") {
    namespace fs = std::filesystem;
    spec.validate();
    const fs::path cat = fs::path(out_dir) / spec.category;
    fs::create_directories(cat / "train" / "good");
    fs::create_directories(cat / "test" / "good");
    fs::create_directories(cat / "test" / "defect");
    fs::create_directories(cat / "ground_truth" / "defect");

    char name[32];
    for (int i = 0; i < spec.n_train; ++i) {
        auto img = detail::synth_texture(spec, static_cast<uint64_t>(i));
        std::snprintf(name, sizeof name, "%03d.png", i);
        detail::write_gray((cat / "train" / "good" / name).string(), img, spec.size);
    }
    for (int i = 0; i < spec.n_test_good; ++i) {
        auto img = detail::synth_texture(spec, 0x600D0000ULL + static_cast<uint64_t>(i));
        std::snprintf(name, sizeof name, "%03d.png", i);
        detail::write_gray((cat / "test" / "good" / name).string(), img, spec.size);
    }
    for (int i = 0; i < spec.n_test_defect; ++i) {
        const uint64_t key = 0xBAD00000ULL + static_cast<uint64_t>(i);
        auto img = detail::synth_texture(spec, key);
        auto region = detail::synth_region(spec, key);
        for (size_t p = 0; p < img.size(); ++p) {
            if (!region[p]) continue;
            img[p] = img[p] > 0.5 ? img[p] - spec.defect_intensity : img[p] + spec.defect_intensity;
        }
        std::snprintf(name, sizeof name, "%03d.png", i);
        detail::write_gray((cat / "test" / "defect" / name).string(), img, spec.size);

        std::vector<uint8_t> mask_px(region.size());
        for (size_t p = 0; p < region.size(); ++p) mask_px[p] = region[p] ? 255 : 0;
        std::snprintf(name, sizeof name, "%03d%s.png", i, mask_suffix.c_str());
        png::write((cat / "ground_truth" / "defect" / name).string(),
                   png::gray8(spec.size, spec.size, mask_px));
    }
    return ingest(out_dir, mask_suffix);
}

}  // namespace ccad
