#include "ccad/io/png.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "ccad/core/rng.hpp"
#include "ccad/core/serialize.hpp"

using namespace ccad;

namespace {
std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST(Serialize, RoundTripAllWidths) {
    ByteWriter w;
    w.u8(0xAB);
    w.u16(0xBEEF);
    w.u32(0xDEADBEEFu);
    w.u64(0x0123456789ABCDEFull);
    w.f32(-1.5f);
    w.str_u16("hello");
    w.str_u32("world");
    ByteReader r(w.buffer());
    EXPECT_EQ(r.u8(), 0xAB);
    EXPECT_EQ(r.u16(), 0xBEEF);
    EXPECT_EQ(r.u32(), 0xDEADBEEFu);
    EXPECT_EQ(r.u64(), 0x0123456789ABCDEFull);
    EXPECT_EQ(r.f32(), -1.5f);
    EXPECT_EQ(r.str_u16(), "hello");
    EXPECT_EQ(r.str_u32(), "world");
    EXPECT_TRUE(r.eof());
}

TEST(Serialize, LittleEndianLayoutPinned) {
    ByteWriter w;
    w.u32(0x01020304u);
    const auto& b = w.buffer();
    EXPECT_EQ(b[0], 0x04);
    EXPECT_EQ(b[1], 0x03);
    EXPECT_EQ(b[2], 0x02);
    EXPECT_EQ(b[3], 0x01);
}

TEST(Serialize, TruncatedReadThrows) {
    ByteWriter w;
    w.u16(7);
    ByteReader r(w.buffer());
    EXPECT_THROW(r.u32(), DecodeError);
}

TEST(Png, Gray8RoundTrip) {
    Rng rng(1);
    const int W = 33, H = 17;  // odd sizes exercise row handling
    std::vector<uint8_t> px(static_cast<size_t>(W) * H);
    for (auto& p : px) p = static_cast<uint8_t>(rng.next_u64() & 0xFF);
    const auto path = tmp_path("ccad_g8.png");
    png::write(path, png::gray8(W, H, px));
    auto img = png::read(path);
    EXPECT_EQ(img.width, W);
    EXPECT_EQ(img.height, H);
    EXPECT_EQ(img.channels, 1);
    EXPECT_EQ(img.bit_depth, 8);
    for (size_t i = 0; i < px.size(); ++i) EXPECT_EQ(img.samples[i], px[i]);
    std::remove(path.c_str());
}

TEST(Png, Gray16RoundTrip) {
    Rng rng(2);
    const int W = 8, H = 8;
    std::vector<uint16_t> px(static_cast<size_t>(W) * H);
    for (auto& p : px) p = static_cast<uint16_t>(rng.next_u64() & 0xFFFF);
    const auto path = tmp_path("ccad_g16.png");
    png::write(path, png::gray16(W, H, px));
    auto img = png::read(path);
    EXPECT_EQ(img.bit_depth, 16);
    EXPECT_EQ(img.samples, px);
    std::remove(path.c_str());
}

TEST(Png, Rgb8RoundTrip) {
    Rng rng(3);
    png::Image src;
    src.width = 5;
    src.height = 4;
    src.channels = 3;
    src.bit_depth = 8;
    src.samples.resize(src.sample_count());
    for (auto& s : src.samples) s = static_cast<uint16_t>(rng.next_u64() & 0xFF);
    const auto path = tmp_path("ccad_rgb.png");
    png::write(path, src);
    auto img = png::read(path);
    EXPECT_EQ(img.channels, 3);
    EXPECT_EQ(img.samples, src.samples);
    std::remove(path.c_str());
}

TEST(Png, DeterministicBytes) {
    std::vector<uint8_t> px(64, 128);
    const auto p1 = tmp_path("ccad_det1.png");
    const auto p2 = tmp_path("ccad_det2.png");
    png::write(p1, png::gray8(8, 8, px));
    png::write(p2, png::gray8(8, 8, px));
    auto r1 = ByteReader::from_file(p1);
    auto r2 = ByteReader::from_file(p2);
    ASSERT_EQ(r1.remaining(), r2.remaining());
    std::vector<uint8_t> a(r1.remaining()), b(r2.remaining());
    r1.raw(a.data(), a.size());
    r2.raw(b.data(), b.size());
    EXPECT_EQ(a, b);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Png, RejectsGarbage) {
    const auto path = tmp_path("ccad_garbage.png");
    ByteWriter w;
    w.bytes("this is not a png at all", 24);
    w.save(path);
    EXPECT_THROW(png::read(path), DecodeError);
    std::remove(path.c_str());
}
