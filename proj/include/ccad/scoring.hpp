#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"
#include "ccad/core/tensor.hpp"
#include "ccad/feature_bank.hpp"
#include "ccad/io/png.hpp"

namespace ccad {

// Per-pixel anomaly scores for one image. Values lie in [0, 2 * sum(sigma_l)].
struct AnomalyMap {
    Tensor<float> values;  // H x W
    int layer_count = 0;
    std::vector<double> sigma_l;

    double max_scale() const {
        double s = 0;
        for (double v : sigma_l) s += v;
        return 2.0 * s;
    }
};

namespace detail {

inline Tensor<float> bilinear_upsample(const Tensor<float>& src, int H, int W) {
    // src is (h, w); half-pixel centers
    const int h = src.dim(0), w = src.dim(1);
    Tensor<float> out({H, W});
    const double sy = static_cast<double>(h) / H;
    const double sx = static_cast<double>(w) / W;
    for (int y = 0; y < H; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < W; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                             wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
            out.at(y, x) = static_cast<float>(v);
        }
    }
    return out;
}

}  // namespace detail

// One layer's dissimilarity field from explicit feature maps (C,h,w each).
// Dead features: if both vectors are near-zero the location contributes 0,
// if exactly one is, it contributes 1.
inline Tensor<float> cosine_dissimilarity(const Tensor<float>& fa, const Tensor<float>& fb,
                                          double eps = 1e-8) {
    if (fa.shape != fb.shape || fa.ndim() != 3)
        throw ShapeError("cosine_dissimilarity: feature maps must share (C,h,w)");
    const int C = fa.dim(0), h = fa.dim(1), w = fa.dim(2);
    Tensor<float> out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double dot = 0, na = 0, nb = 0;
            for (int c = 0; c < C; ++c) {
                const double a = fa.data[(static_cast<size_t>(c) * h + y) * w + x];
                const double b = fb.data[(static_cast<size_t>(c) * h + y) * w + x];
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            double dis;
            if (na < eps && nb < eps)
                dis = 0.0;  // identical dead regions are not anomalous
            else if (na < eps || nb < eps)
                dis = 1.0;
            else
                dis = 1.0 - dot / (na * nb);
            out.at(y, x) = static_cast<float>(dis);
        }
    return out;
}

// Multi-layer map from explicit per-layer feature pairs.
inline AnomalyMap anomaly_map_from_features(const std::vector<Tensor<float>>& feats0,
                                            const std::vector<Tensor<float>>& feats1,
                                            const std::vector<double>& sigma_l, int H, int W) {
    if (feats0.size() != feats1.size() || feats0.size() != sigma_l.size())
        throw ParamError("anomaly_map: layers and sigma_l must pair up");
    AnomalyMap map;
    map.layer_count = static_cast<int>(feats0.size());
    map.sigma_l = sigma_l;
    map.values = Tensor<float>({H, W});
    for (size_t l = 0; l < feats0.size(); ++l) {
        auto dis = cosine_dissimilarity(feats0[l], feats1[l]);
        auto up = dis.dim(0) == H && dis.dim(1) == W ? dis : detail::bilinear_upsample(dis, H, W);
        for (size_t i = 0; i < map.values.numel(); ++i)
            map.values.data[i] += static_cast<float>(sigma_l[l]) * up.data[i];
    }
    return map;
}

// Eq.-16-style map: multi-layer cosine dissimilarity under the frozen
// feature extractor psi, upsampled and sigma-weighted.
inline AnomalyMap anomaly_map(const Tensor<float>& x0, const Tensor<float>& x0_hat,
                              const ExtractorConfig& psi, const std::vector<int>& layers,
                              const std::vector<double>& sigma_l) {
    if (layers.size() != sigma_l.size()) throw ParamError("anomaly_map: len(layers) must equal len(sigma_l)");
    if (x0.shape != x0_hat.shape) throw ShapeError("anomaly_map: images must share a shape");
    Tensor<float> a = x0, b = x0_hat;
    if (a.ndim() == 3) {
        a = Tensor<float>({1, x0.dim(0), x0.dim(1), x0.dim(2)}, x0.data);
        b = Tensor<float>({1, x0.dim(0), x0.dim(1), x0.dim(2)}, x0_hat.data);
    }
    ExtractorConfig cfg = psi;
    cfg.layer_spec = layers;  // the requested stages must exist
    SeededConvEncoder enc(cfg);
    auto m0 = enc.stage_maps(a);
    auto m1 = enc.stage_maps(b);
    std::vector<Tensor<float>> f0, f1;
    for (int l : layers) {
        const auto& s0 = m0[static_cast<size_t>(l)];
        const auto& s1 = m1[static_cast<size_t>(l)];
        f0.push_back(Tensor<float>({s0.dim(1), s0.dim(2), s0.dim(3)}, s0.data));
        f1.push_back(Tensor<float>({s1.dim(1), s1.dim(2), s1.dim(3)}, s1.data));
    }
    return anomaly_map_from_features(f0, f1, sigma_l, a.dim(2), a.dim(3));
}

// ---------------------------------------------------------------------------
// image-level aggregation

// Separable Gaussian blur; the truncated kernel is renormalized per
// position over its in-bounds support, so constant maps stay constant.
inline Tensor<float> gaussian_smooth(const Tensor<float>& map, double sigma) {
    if (sigma <= 0) return map;
    const int r = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * r + 1));
    for (int i = -r; i <= r; ++i) k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));

    const int H = map.dim(0), W = map.dim(1);
    Tensor<float> tmp({H, W}), out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0, mass = 0;
            for (int i = -r; i <= r; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= W) continue;
                acc += k[static_cast<size_t>(i + r)] * map.at(y, xx);
                mass += k[static_cast<size_t>(i + r)];
            }
            tmp.at(y, x) = static_cast<float>(acc / mass);
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0, mass = 0;
            for (int i = -r; i <= r; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= H) continue;
                acc += k[static_cast<size_t>(i + r)] * tmp.at(yy, x);
                mass += k[static_cast<size_t>(i + r)];
            }
            out.at(y, x) = static_cast<float>(acc / mass);
        }
    return out;
}

inline double image_score(const AnomalyMap& map, double smooth_sigma) {
    if (smooth_sigma < 0) throw ParamError("image_score: smooth_sigma must be >= 0");
    const auto& m = smooth_sigma == 0 ? map.values : gaussian_smooth(map.values, smooth_sigma);
    double mx = -1e300;
    for (float v : m.data) mx = std::max(mx, static_cast<double>(v));
    return mx;
}

// ---------------------------------------------------------------------------
// threshold metrics

namespace detail {

inline void require_both_classes(const std::vector<int>& labels, const char* what) {
    bool pos = false, neg = false;
    for (int l : labels) (l ? pos : neg) = true;
    if (!pos || !neg)
        throw MetricError(std::string(what) + ": both classes must be present");
}

}  // namespace detail

// Mann-Whitney AUROC with half credit for ties, via average ranks.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auroc: scores/labels length mismatch");
    detail::require_both_classes(labels, "auroc");
    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0;
    size_t n_pos = 0, n_neg = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    for (int l : labels) (l ? n_pos : n_neg) += 1;
    return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Max F1 over thresholds at observed score values, rule score >= threshold.
inline double f1_max(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("f1_max: scores/labels length mismatch");
    detail::require_both_classes(labels, "f1_max");
    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    size_t total_pos = 0;
    for (int l : labels) total_pos += static_cast<size_t>(l);

    double best = 0;
    size_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        // threshold = scores[idx[i]]: everything seen so far predicted positive
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        if (precision + recall > 0) best = std::max(best, 2 * precision * recall / (precision + recall));
        i = j;
    }
    return best;
}

// Step-interpolated AP: sum (R_i - R_{i-1}) * P_i over descending unique
// thresholds.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("average_precision: scores/labels length mismatch");
    detail::require_both_classes(labels, "average_precision");
    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    size_t total_pos = 0;
    for (int l : labels) total_pos += static_cast<size_t>(l);

    double ap = 0, prev_recall = 0;
    size_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

// ---------------------------------------------------------------------------
// report plumbing

struct PerImageScore {
    std::string path;
    std::string defect_type;  // "good" for nominal
    int label = 0;
    double score = 0;
};

struct ScoreReport {
    std::vector<PerImageScore> images;
    double class_auroc = 0, pixel_auroc = 0;
    double class_f1_max = 0, pixel_f1_max = 0;
    double class_ap = 0, pixel_ap = 0;
};

// 16-bit grayscale export, values mapped linearly from [0, 2*sum(sigma_l)].
inline void save_map_png(const AnomalyMap& map, const std::string& path) {
    const double scale = map.max_scale();
    const int H = map.values.dim(0), W = map.values.dim(1);
    std::vector<uint16_t> px(static_cast<size_t>(H) * W);
    for (size_t i = 0; i < px.size(); ++i) {
        const double v = std::clamp(static_cast<double>(map.values.data[i]) / (scale > 0 ? scale : 1.0), 0.0, 1.0);
        px[i] = static_cast<uint16_t>(std::lround(v * 65535.0));
    }
    png::write(path, png::gray16(W, H, px));
}

}  // namespace ccad
