#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "ccad/core/autograd.hpp"
#include "ccad/core/errors.hpp"
#include "ccad/core/rng.hpp"
#include "ccad/core/serialize.hpp"
#include "ccad/core/tensor.hpp"

namespace ccad {

enum class ExtractorKind { SeededConv, Imported };

// Stand-in for the pretrained visual encoder: a frozen convolutional stack
// whose weights are a pure function of the seed, or an import hook for
// externally computed feature matrices.
struct ExtractorConfig {
    ExtractorKind kind = ExtractorKind::SeededConv;
    uint64_t seed = 0;
    std::vector<int> layer_spec = {1, 2};  // stages to concatenate
    int d = 64;                            // output feature dimension
    int m = 8;                             // patch downsampling ratio
    std::string import_path;               // kind == Imported only

    void validate() const {
        if (d < 1) throw ParamError("ExtractorConfig: d must be >= 1");
        if (m < 1) throw ParamError("ExtractorConfig: m must be >= 1");
        if (layer_spec.empty()) throw ParamError("ExtractorConfig: layer_spec must be non-empty");
        for (int l : layer_spec)
            if (l < 0 || l > 3) throw ParamError("ExtractorConfig: layer indices must lie in [0,3]");
        if (kind == ExtractorKind::Imported && import_path.empty())
            throw ParamError("ExtractorConfig: imported kind requires import_path");
    }

    std::string fingerprint() const {
        std::ostringstream os;
        if (kind == ExtractorKind::SeededConv) {
            os << "seeded-conv/seed=" << seed << "/layers=";
            for (size_t i = 0; i < layer_spec.size(); ++i) os << (i ? "," : "") << layer_spec[i];
            os << "/d=" << d << "/m=" << m << "/v1";
        } else {
            os << "imported/d=" << d << "/m=" << m << "/v1";
        }
        return os.str();
    }
};

struct RowMeta {
    int image_index;
    int row;
    int col;
};

// The patch-level feature matrix of a whole image set: M x d rows with
// M = N * floor(H/m) * floor(W/m). Row order is (image, row-major patch).
struct GlobalFeatureSpace {
    Tensor<float> vectors;  // M x d
    std::vector<RowMeta> meta;
    int d = 0;
    int m = 0;
    int N = 0;
    int H = 0;
    int W = 0;
    std::string fingerprint;

    int grid_h() const { return H / m; }
    int grid_w() const { return W / m; }
    size_t rows() const { return static_cast<size_t>(vectors.dim(0)); }
};

struct CoarseFeatureBank {
    Tensor<float> vectors;  // xi x d
    int xi = 0;
    std::vector<uint64_t> source_ids;
    std::string extractor_fingerprint;
    uint64_t source_space_rows = 0;

    bool operator==(const CoarseFeatureBank& o) const {
        return xi == o.xi && source_ids == o.source_ids && extractor_fingerprint == o.extractor_fingerprint &&
               source_space_rows == o.source_space_rows && vectors.shape == o.vectors.shape &&
               vectors.data == o.vectors.data;
    }
};

// ---------------------------------------------------------------------------
// seeded frozen encoder

class SeededConvEncoder {
public:
    explicit SeededConvEncoder(const ExtractorConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, 0x5EEDC0DEULL));
        max_stage_ = *std::max_element(cfg.layer_spec.begin(), cfg.layer_spec.end());
        int cin = 3;
        for (int s = 0; s <= max_stage_; ++s) {
            const int cout = stage_width(s);
            weights_.push_back(
                Tensor<float>::randn({cout, cin, 3, 3}, rng, 1.0f / std::sqrt(static_cast<float>(cin * 9))));
            biases_.push_back(Tensor<float>::randn({cout}, rng, 0.05f));
            cin = cout;
        }
        int concat = 0;
        for (int l : cfg.layer_spec) concat += stage_width(l);
        proj_ = Tensor<float>::randn({cfg.d, concat, 1, 1}, rng,
                                     1.0f / std::sqrt(static_cast<float>(concat)));
    }

    static int stage_width(int s) {
        static const int widths[4] = {12, 24, 48, 64};
        return widths[s];
    }

    // Feature maps after every stage up to the deepest requested one.
    // Stage s has spatial extent (H / 2^s, W / 2^s).
    std::vector<Tensor<float>> stage_maps(const Tensor<float>& images) const {
        if (images.ndim() != 4 || images.dim(1) != 3)
            throw ShapeError("encoder: expected N x 3 x H x W, got " + images.shape_str());
        ag::NoGradGuard ng;
        auto x = ag::Var<float>::constant(images);
        std::vector<Tensor<float>> maps;
        for (int s = 0; s <= max_stage_; ++s) {
            if (s > 0) {
                if (x.val().dim(2) % 2 != 0 || x.val().dim(3) % 2 != 0)
                    throw ShapeError("encoder: spatial size must halve cleanly at stage " + std::to_string(s));
                x = ag::avg_pool2(x);
            }
            x = ag::silu(ag::conv2d(x, ag::Var<float>::constant(weights_[static_cast<size_t>(s)]),
                                    ag::Var<float>::constant(biases_[static_cast<size_t>(s)]), 1));
            maps.push_back(x.val());
        }
        return maps;
    }

    // Patch-grid features: selected stages adaptively pooled onto the
    // floor(H/m) x floor(W/m) grid, channel-concatenated, then a fixed 1x1
    // projection to d. Output is (N * gh * gw) x d in (image, row-major)
    // order.
    Tensor<float> grid_features(const Tensor<float>& images) const {
        const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
        const int gh = H / cfg_.m, gw = W / cfg_.m;
        if (gh < 1 || gw < 1)
            throw ParamError("encoder: downsampling ratio m=" + std::to_string(cfg_.m) +
                             " leaves no grid cells for " + std::to_string(H) + "x" + std::to_string(W));
        auto maps = stage_maps(images);

        int concat = 0;
        for (int l : cfg_.layer_spec) concat += stage_width(l);
        Tensor<float> grid({N, concat, gh, gw});
        int coff = 0;
        for (int l : cfg_.layer_spec) {
            const auto& mp = maps[static_cast<size_t>(l)];
            adaptive_avg_into(mp, grid, coff);
            coff += stage_width(l);
        }

        ag::NoGradGuard ng;
        auto proj = ag::conv2d(ag::Var<float>::constant(grid), ag::Var<float>::constant(proj_),
                               ag::Var<float>(), 0);
        // (N, d, gh, gw) -> rows (N*gh*gw, d)
        const auto& pv = proj.val();
        Tensor<float> rows({N * gh * gw, cfg_.d});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < gh; ++i)
                for (int j = 0; j < gw; ++j)
                    for (int c = 0; c < cfg_.d; ++c)
                        rows.at(n * gh * gw + i * gw + j, c) = pv.at(n, c, i, j);
        return rows;
    }

    const ExtractorConfig& config() const { return cfg_; }

private:
    static void adaptive_avg_into(const Tensor<float>& src, Tensor<float>& dst, int channel_offset) {
        const int N = src.dim(0), C = src.dim(1), H = src.dim(2), W = src.dim(3);
        const int gh = dst.dim(2), gw = dst.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < gh; ++i) {
                    const int y0 = i * H / gh, y1 = std::max(y0 + 1, (i + 1) * H / gh);
                    for (int j = 0; j < gw; ++j) {
                        const int x0 = j * W / gw, x1 = std::max(x0 + 1, (j + 1) * W / gw);
                        double s = 0;
                        for (int y = y0; y < y1; ++y)
                            for (int x = x0; x < x1; ++x) s += src.at(n, c, y, x);
                        dst.at(n, channel_offset + c, i, j) =
                            static_cast<float>(s / ((y1 - y0) * (x1 - x0)));
                    }
                }
    }

    ExtractorConfig cfg_;
    int max_stage_;
    std::vector<Tensor<float>> weights_;
    std::vector<Tensor<float>> biases_;
    Tensor<float> proj_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline GlobalFeatureSpace load_imported_features(const ExtractorConfig& cfg, int N, int H, int W) {
    auto r = ByteReader::from_file(cfg.import_path);
    char magic[8];
    r.raw(magic, 8);
    if (std::string(magic, 8) != "CCADIMPF")
        throw DecodeError(DecodeError::Kind::BadMagic, "imported features: bad magic");
    const uint32_t version = r.u32();
    if (version != 1) throw DecodeError(DecodeError::Kind::BadVersion, "imported features: version != 1");
    const uint32_t fn = r.u32(), fgh = r.u32(), fgw = r.u32(), fd = r.u32();
    if (static_cast<int>(fn) != N)
        throw ConfigError("imported features: image count mismatch (file " + std::to_string(fn) +
                          ", batch " + std::to_string(N) + ")");
    const int gh = H / cfg.m, gw = W / cfg.m;
    if (static_cast<int>(fgh) != gh || static_cast<int>(fgw) != gw || static_cast<int>(fd) != cfg.d)
        throw ConfigError("imported features: grid/dim mismatch with extractor config");

    GlobalFeatureSpace space;
    space.vectors = Tensor<float>({static_cast<int>(fn) * gh * gw, cfg.d});
    for (auto& v : space.vectors.data) v = r.f32();
    return space;
}

}  // namespace detail

// Build the global feature space from a nominal image batch (N,3,H,W).
inline GlobalFeatureSpace extract_features(const Tensor<float>& images, const ExtractorConfig& cfg) {
    cfg.validate();
    if (images.ndim() != 4) throw ShapeError("extract_features: expected N x C x H x W");
    if (images.dim(0) == 0) throw ParamError("extract_features: empty image batch");
    if (images.dim(1) != 3) throw ShapeError("extract_features: expected 3 channels");
    const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
    const int gh = H / cfg.m, gw = W / cfg.m;
    if (gh < 1 || gw < 1) throw ParamError("extract_features: m too large for image size");

    GlobalFeatureSpace space;
    if (cfg.kind == ExtractorKind::Imported) {
        space = detail::load_imported_features(cfg, N, H, W);
        std::string fp = cfg.fingerprint();
        space.fingerprint = fp;
    } else {
        SeededConvEncoder enc(cfg);
        space.vectors = enc.grid_features(images);
        space.fingerprint = cfg.fingerprint();
    }
    space.d = cfg.d;
    space.m = cfg.m;
    space.N = N;
    space.H = H;
    space.W = W;
    space.meta.resize(static_cast<size_t>(N) * gh * gw);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < gh; ++i)
            for (int j = 0; j < gw; ++j)
                space.meta[static_cast<size_t>(n) * gh * gw + static_cast<size_t>(i) * gw + j] = {n, i, j};
    return space;
}

enum class CoresetInit { MaxNorm, Index };

// Greedy max-min (farthest point) selection under exact Euclidean distance.
// Ties break toward the lowest row index; xi > M clamps with a warning.
inline CoarseFeatureBank coreset_compress(const GlobalFeatureSpace& space, int xi,
                                          CoresetInit init = CoresetInit::MaxNorm, int init_index = 0,
                                          std::vector<std::string>* warnings = nullptr) {
    if (xi < 1) throw ParamError("coreset_compress: xi must be >= 1");
    const int M = space.vectors.dim(0);
    const int d = space.vectors.dim(1);
    if (xi > M) {
        if (warnings)
            warnings->push_back("coreset: requested xi=" + std::to_string(xi) + " exceeds M=" +
                                std::to_string(M) + "; clamped");
        xi = M;
    }

    int first;
    if (init == CoresetInit::MaxNorm) {
        first = 0;
        double best = -1;
        for (int i = 0; i < M; ++i) {
            double n2 = 0;
            for (int j = 0; j < d; ++j) {
                const double v = space.vectors.at(i, j);
                n2 += v * v;
            }
            if (n2 > best) {
                best = n2;
                first = i;
            }
        }
    } else {
        if (init_index < 0 || init_index >= M) throw ParamError("coreset_compress: init index out of range");
        first = init_index;
    }

    std::vector<double> min_d2(static_cast<size_t>(M));
    std::vector<int> selected;
    selected.reserve(static_cast<size_t>(xi));
    selected.push_back(first);
    auto dist2 = [&](int a, int b) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
            const double diff = static_cast<double>(space.vectors.at(a, j)) - space.vectors.at(b, j);
            s += diff * diff;
        }
        return s;
    };
    for (int i = 0; i < M; ++i) min_d2[static_cast<size_t>(i)] = dist2(i, first);

    while (static_cast<int>(selected.size()) < xi) {
        int arg = 0;
        double best = -1;
        for (int i = 0; i < M; ++i) {
            const double v = min_d2[static_cast<size_t>(i)];
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        selected.push_back(arg);
        for (int i = 0; i < M; ++i)
            min_d2[static_cast<size_t>(i)] = std::min(min_d2[static_cast<size_t>(i)], dist2(i, arg));
    }

    CoarseFeatureBank bank;
    bank.xi = xi;
    bank.vectors = Tensor<float>({xi, d});
    bank.source_ids.resize(static_cast<size_t>(xi));
    for (int k = 0; k < xi; ++k) {
        bank.source_ids[static_cast<size_t>(k)] = static_cast<uint64_t>(selected[static_cast<size_t>(k)]);
        for (int j = 0; j < d; ++j) bank.vectors.at(k, j) = space.vectors.at(selected[static_cast<size_t>(k)], j);
    }
    bank.extractor_fingerprint = space.fingerprint;
    bank.source_space_rows = static_cast<uint64_t>(M);
    return bank;
}

// Zero-row bank for conditioning ablations; the cross-attention term
// vanishes entirely when it is passed.
inline CoarseFeatureBank make_empty_bank(int d, const std::string& fingerprint = "") {
    CoarseFeatureBank bank;
    bank.xi = 0;
    bank.vectors = Tensor<float>({0, d});
    bank.extractor_fingerprint = fingerprint;
    bank.source_space_rows = 0;
    return bank;
}

// ---------------------------------------------------------------------------
// bank file format: magic "CCADBNK1", LE u32 version=1, u32 xi, u32 d,
// u64 source M, u16-length-prefixed UTF-8 fingerprint, xi*d LE f32
// row-major, xi LE u64 source ids.

inline void save_bank(const CoarseFeatureBank& bank, const std::string& path) {
    ByteWriter w;
    w.bytes("CCADBNK1", 8);
    w.u32(1);
    w.u32(static_cast<uint32_t>(bank.xi));
    w.u32(static_cast<uint32_t>(bank.vectors.dim(1)));
    w.u64(bank.source_space_rows);
    w.str_u16(bank.extractor_fingerprint);
    for (float v : bank.vectors.data) w.f32(v);
    for (uint64_t id : bank.source_ids) w.u64(id);
    w.save(path);
}

inline CoarseFeatureBank load_bank(const std::string& path) {
    auto r = ByteReader::from_file(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::string(magic, 8) != "CCADBNK1")
        throw DecodeError(DecodeError::Kind::BadMagic, "bank: bad magic in " + path);
    const uint32_t version = r.u32();
    if (version != 1)
        throw DecodeError(DecodeError::Kind::BadVersion,
                          "bank: unsupported version " + std::to_string(version));
    CoarseFeatureBank bank;
    bank.xi = static_cast<int>(r.u32());
    const int d = static_cast<int>(r.u32());
    bank.source_space_rows = r.u64();
    bank.extractor_fingerprint = r.str_u16();
    bank.vectors = Tensor<float>({bank.xi, d});
    for (auto& v : bank.vectors.data) v = r.f32();
    bank.source_ids.resize(static_cast<size_t>(bank.xi));
    for (auto& id : bank.source_ids) id = r.u64();
    if (!r.eof())
        throw DecodeError(DecodeError::Kind::Corrupt, "bank: trailing bytes in " + path);
    return bank;
}

// Writes the imported-features container (import hook for real backbone
// features; also used by tests).
inline void save_imported_features(const std::string& path, int N, int gh, int gw,
                                   const Tensor<float>& rows) {
    ByteWriter w;
    w.bytes("CCADIMPF", 8);
    w.u32(1);
    w.u32(static_cast<uint32_t>(N));
    w.u32(static_cast<uint32_t>(gh));
    w.u32(static_cast<uint32_t>(gw));
    w.u32(static_cast<uint32_t>(rows.dim(1)));
    for (float v : rows.data) w.f32(v);
    w.save(path);
}

}  // namespace ccad
