#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"
#include "ccad/core/serialize.hpp"

// Minimal PNG reader/writer: enough for 8/16-bit grayscale and 8-bit
// RGB(A), non-interlaced. Our own files always use filter 0; the reader
// handles all five filters so externally produced datasets load too.
namespace ccad::png {

struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;   // 1, 2, 3 or 4
    int bit_depth = 8;  // 8 or 16
    std::vector<uint16_t> samples;  // row-major, channel-interleaved

    size_t sample_count() const {
        return static_cast<size_t>(width) * height * channels;
    }
};

namespace detail {

inline void be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    be32(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    be32(out, crc);
}

inline std::vector<uint8_t> deflate_all(const std::vector<uint8_t>& raw) {
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> out(bound);
    if (::compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<uint8_t> inflate_all(const std::vector<uint8_t>& comp, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf n = static_cast<uLongf>(expected);
    int rc = ::uncompress(out.data(), &n, comp.data(), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || n != expected)
        throw DecodeError(DecodeError::Kind::Corrupt, "png: inflate failed or wrong length");
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline void write(const std::string& path, const Image& img) {
    if (img.channels < 1 || img.channels > 4 || (img.bit_depth != 8 && img.bit_depth != 16))
        throw ParamError("png::write: unsupported format");
    const int bytes_per_sample = img.bit_depth / 8;
    const size_t stride = static_cast<size_t>(img.width) * img.channels * bytes_per_sample;

    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter none
        for (int x = 0; x < img.width * img.channels; ++x) {
            const uint16_t s = img.samples[static_cast<size_t>(y) * img.width * img.channels + x];
            if (img.bit_depth == 16) {
                raw.push_back(static_cast<uint8_t>(s >> 8));  // PNG samples are big-endian
                raw.push_back(static_cast<uint8_t>(s));
            } else {
                raw.push_back(static_cast<uint8_t>(s));
            }
        }
    }

    static const uint8_t color_type_for[5] = {0, 0, 4, 2, 6};
    std::vector<uint8_t> ihdr;
    detail::be32(ihdr, static_cast<uint32_t>(img.width));
    detail::be32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(static_cast<uint8_t>(img.bit_depth));
    ihdr.push_back(color_type_for[img.channels]);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    detail::chunk(out, "IHDR", ihdr);
    detail::chunk(out, "IDAT", detail::deflate_all(raw));
    detail::chunk(out, "IEND", {});

    ByteWriter w;
    w.bytes(out.data(), out.size());
    w.save(path);
}

inline Image read(const std::string& path) {
    auto r = ByteReader::from_file(path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    uint8_t got[8];
    r.raw(got, 8);
    if (std::memcmp(got, sig, 8) != 0)
        throw DecodeError(DecodeError::Kind::BadMagic, "png: bad signature in " + path);

    Image img;
    std::vector<uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    while (!r.eof()) {
        uint32_t len = 0;
        for (int i = 0; i < 4; ++i) len = (len << 8) | r.u8();
        char type[5] = {0};
        r.raw(type, 4);
        std::vector<uint8_t> data(len);
        if (len) r.raw(data.data(), len);
        r.u32();  // crc (not verified; zlib checks the stream itself)
        if (std::strcmp(type, "IHDR") == 0) {
            if (len != 13) throw DecodeError(DecodeError::Kind::Corrupt, "png: bad IHDR");
            img.width = (data[0] << 24) | (data[1] << 16) | (data[2] << 8) | data[3];
            img.height = (data[4] << 24) | (data[5] << 16) | (data[6] << 8) | data[7];
            img.bit_depth = data[8];
            const int ct = data[9];
            const int interlace = data[12];
            if (interlace != 0)
                throw DecodeError(DecodeError::Kind::Corrupt, "png: interlaced images unsupported");
            switch (ct) {
                case 0: img.channels = 1; break;
                case 2: img.channels = 3; break;
                case 4: img.channels = 2; break;
                case 6: img.channels = 4; break;
                default:
                    throw DecodeError(DecodeError::Kind::Corrupt, "png: palette/unknown color type");
            }
            if (img.bit_depth != 8 && img.bit_depth != 16)
                throw DecodeError(DecodeError::Kind::Corrupt, "png: only 8/16-bit supported");
            saw_ihdr = true;
        } else if (std::strcmp(type, "IDAT") == 0) {
            idat.insert(idat.end(), data.begin(), data.end());
        } else if (std::strcmp(type, "IEND") == 0) {
            saw_iend = true;
            break;
        }
        // ancillary chunks skipped
    }
    if (!saw_ihdr || !saw_iend || img.width <= 0 || img.height <= 0)
        throw DecodeError(DecodeError::Kind::Truncated, "png: missing chunks in " + path);

    const int bps = img.bit_depth / 8;
    const int bpp = bps * img.channels;  // filter unit
    const size_t stride = static_cast<size_t>(img.width) * bpp;
    auto raw = detail::inflate_all(idat, (stride + 1) * static_cast<size_t>(img.height));

    std::vector<uint8_t> cur(stride, 0), prev(stride, 0);
    img.samples.resize(static_cast<size_t>(img.width) * img.height * img.channels);
    for (int y = 0; y < img.height; ++y) {
        const uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        const uint8_t filter = row[0];
        const uint8_t* src = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= static_cast<size_t>(bpp) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw DecodeError(DecodeError::Kind::Corrupt, "png: unknown filter");
            }
            cur[i] = static_cast<uint8_t>(v);
        }
        for (int x = 0; x < img.width * img.channels; ++x) {
            uint16_t s;
            if (bps == 2)
                s = static_cast<uint16_t>((cur[static_cast<size_t>(x) * 2] << 8) | cur[static_cast<size_t>(x) * 2 + 1]);
            else
                s = cur[static_cast<size_t>(x)];
            img.samples[(static_cast<size_t>(y) * img.width * img.channels) + x] = s;
        }
        std::swap(cur, prev);
    }
    return img;
}

inline Image gray8(int w, int h, const std::vector<uint8_t>& pixels) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.bit_depth = 8;
    img.samples.assign(pixels.begin(), pixels.end());
    return img;
}

inline Image gray16(int w, int h, const std::vector<uint16_t>& pixels) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.bit_depth = 16;
    img.samples = pixels;
    return img;
}

}  // namespace ccad::png
