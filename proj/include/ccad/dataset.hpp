#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"
#include "ccad/core/tensor.hpp"
#include "ccad/io/png.hpp"

namespace ccad {

struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TestImageEntry {
    std::string path;
    std::string defect_type;  // "good" for nominal test images
    std::string mask_path;    // empty for good: implicit all-zero mask
};

struct CategoryManifest {
    std::string name;
    std::vector<std::string> train;  // nominal only
    std::vector<TestImageEntry> test;
    int height = 0;
    int width = 0;
};

struct DatasetManifest {
    std::string root;
    std::vector<CategoryManifest> categories;

    const CategoryManifest& category(const std::string& name) const {
        for (const auto& c : categories)
            if (c.name == name) return c;
        throw ParamError("dataset: no category named '" + name + "'");
    }
};

namespace detail {

inline std::vector<std::string> sorted_images(const std::filesystem::path& dir) {
    std::vector<std::string> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".png" || ext == ".PNG") out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// MVTec-style tree:
//   <category>/train/good/*.png
//   <category>/test/<defect>/*.png
//   <category>/ground_truth/<defect>/<stem><mask_suffix>.png
// Every defective test image must pair with a mask of identical extent;
// nominal ("good") test images carry an implicit all-zero mask.
inline DatasetManifest ingest(const std::string& root, const std::string& mask_suffix = "_mask") {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IngestError("ingest: no such dataset root: " + root);

    DatasetManifest man;
    man.root = root;
    std::vector<std::string> offenders;

    std::vector<fs::path> cat_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) cat_dirs.push_back(e.path());
    std::sort(cat_dirs.begin(), cat_dirs.end());

    for (const auto& cat_dir : cat_dirs) {
        CategoryManifest cat;
        cat.name = cat_dir.filename().string();
        cat.train = detail::sorted_images(cat_dir / "train" / "good");
        if (cat.train.empty())
            throw IngestError("ingest: category '" + cat.name + "' has no train/good images");

        {
            auto probe = png::read(cat.train.front());
            cat.height = probe.height;
            cat.width = probe.width;
        }

        std::vector<fs::path> defect_dirs;
        const auto test_root = cat_dir / "test";
        if (fs::is_directory(test_root))
            for (const auto& e : fs::directory_iterator(test_root))
                if (e.is_directory()) defect_dirs.push_back(e.path());
        std::sort(defect_dirs.begin(), defect_dirs.end());

        for (const auto& ddir : defect_dirs) {
            const std::string dtype = ddir.filename().string();
            for (const auto& img : detail::sorted_images(ddir)) {
                TestImageEntry entry;
                entry.path = img;
                entry.defect_type = dtype;
                if (dtype != "good") {
                    const auto stem = fs::path(img).stem().string();
                    const auto mask = cat_dir / "ground_truth" / dtype / (stem + mask_suffix + ".png");
                    if (!fs::is_regular_file(mask)) {
                        offenders.push_back(img);
                        continue;
                    }
                    auto m = png::read(mask.string());
                    auto probe = png::read(img);
                    if (m.width != probe.width || m.height != probe.height) {
                        offenders.push_back(img + " (mask extent mismatch)");
                        continue;
                    }
                    entry.mask_path = mask.string();
                }
                cat.test.push_back(std::move(entry));
            }
        }
        man.categories.push_back(std::move(cat));
    }
    if (man.categories.empty()) throw IngestError("ingest: no categories under " + root);
    if (!offenders.empty()) {
        std::string msg = "ingest: defective test images without usable masks:";
        for (const auto& o : offenders) msg += "\n  " + o;
        throw IngestError(msg);
    }
    return man;
}

// ---------------------------------------------------------------------------
// pixel loading: grayscale PNGs replicate to 3 channels, values in [-1, 1]

inline Tensor<float> load_image_normalized(const std::string& path) {
    auto img = png::read(path);
    const double denom = img.bit_depth == 16 ? 65535.0 : 255.0;
    Tensor<float> out({1, 3, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float rgb[3];
            if (img.channels >= 3) {
                for (int c = 0; c < 3; ++c)
                    rgb[c] = static_cast<float>(
                        img.samples[(static_cast<size_t>(y) * img.width + x) * img.channels + c] / denom);
            } else {
                const float g = static_cast<float>(
                    img.samples[(static_cast<size_t>(y) * img.width + x) * img.channels] / denom);
                rgb[0] = rgb[1] = rgb[2] = g;
            }
            for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = rgb[c] * 2.0f - 1.0f;
        }
    return out;
}

inline Tensor<float> load_image_batch(const std::vector<std::string>& paths) {
    if (paths.empty()) throw ParamError("load_image_batch: empty path list");
    auto first = load_image_normalized(paths[0]);
    Tensor<float> out({static_cast<int>(paths.size()), 3, first.dim(2), first.dim(3)});
    std::copy(first.data.begin(), first.data.end(), out.data.begin());
    const size_t per = first.numel();
    for (size_t i = 1; i < paths.size(); ++i) {
        auto img = load_image_normalized(paths[i]);
        if (img.shape != first.shape)
            throw ShapeError("load_image_batch: inconsistent image extents at " + paths[i]);
        std::copy(img.data.begin(), img.data.end(), out.data.begin() + static_cast<long>(i * per));
    }
    return out;
}

// Binarized at 0.5 of full scale.
inline Tensor<float> load_mask(const std::string& path, int height, int width) {
    if (path.empty()) return Tensor<float>::zeros({height, width});
    auto img = png::read(path);
    if (img.height != height || img.width != width)
        throw ShapeError("load_mask: extent mismatch for " + path);
    const double thresh = img.bit_depth == 16 ? 32767.5 : 127.5;
    Tensor<float> out({height, width});
    for (size_t i = 0; i < out.numel(); ++i)
        out.data[i] = img.samples[i * static_cast<size_t>(img.channels)] > thresh ? 1.0f : 0.0f;
    return out;
}

inline void save_image_normalized(const Tensor<float>& chw_or_nchw, const std::string& path) {
    Tensor<float> img = chw_or_nchw;
    if (img.ndim() == 4) {
        if (img.dim(0) != 1) throw ShapeError("save_image_normalized: batch must be a single image");
        img = Tensor<float>({img.dim(1), img.dim(2), img.dim(3)}, img.data);
    }
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    std::vector<uint8_t> px(static_cast<size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double v = 0;
            for (int c = 0; c < C; ++c) v += img.data[(static_cast<size_t>(c) * H + y) * W + x];
            v = std::clamp((v / C + 1.0) / 2.0, 0.0, 1.0);
            px[static_cast<size_t>(y) * W + x] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    png::write(path, png::gray8(W, H, px));
}

}  // namespace ccad
