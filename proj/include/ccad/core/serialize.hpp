#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"

namespace ccad {

// Little-endian binary writer/reader. Byte order is composed explicitly so
// files are identical regardless of host endianness.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        buf_.push_back(static_cast<uint8_t>(v));
        buf_.push_back(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void bytes(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str_u16(const std::string& s) {
        if (s.size() > 0xFFFF) throw ParamError("string too long for u16 length prefix");
        u16(static_cast<uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void str_u32(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    const std::vector<uint8_t>& buffer() const { return buf_; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + path);
        f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!f) throw IoError("short write: " + path);
    }

private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<uint8_t> buf) : buf_(std::move(buf)) {}

    static ByteReader from_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary | std::ios::ate);
        if (!f) throw IoError("cannot open for reading: " + path);
        const std::streamsize n = f.tellg();
        f.seekg(0);
        std::vector<uint8_t> buf(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(buf.data()), n);
        if (!f) throw IoError("short read: " + path);
        return ByteReader(std::move(buf));
    }

    uint8_t u8() { return take(1)[0]; }
    uint16_t u16() {
        const uint8_t* p = take(2);
        return static_cast<uint16_t>(p[0] | (p[1] << 8));
    }
    uint32_t u32() {
        const uint8_t* p = take(4);
        return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
               (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    }
    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str_u16() {
        const uint16_t n = u16();
        const uint8_t* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    std::string str_u32() {
        const uint32_t n = u32();
        const uint8_t* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    void raw(void* out, size_t n) { std::memcpy(out, take(n), n); }

    size_t remaining() const { return buf_.size() - pos_; }
    bool eof() const { return pos_ == buf_.size(); }

private:
    const uint8_t* take(size_t n) {
        if (pos_ + n > buf_.size())
            throw DecodeError(DecodeError::Kind::Truncated, "truncated payload: wanted " + std::to_string(n) +
                                                                " bytes, " + std::to_string(remaining()) + " left");
        const uint8_t* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::vector<uint8_t> buf_;
    size_t pos_ = 0;
};

}  // namespace ccad
