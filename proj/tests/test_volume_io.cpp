#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "ctseg/volume_io.hpp"
#include "support/tempdir.hpp"

using namespace ctseg;
using ctseg::testing::TempDir;

namespace {

Volume random_volume(std::mt19937_64& rng, Dims3 d) {
    std::uniform_int_distribution<int> hu(-32768, 32767);
    std::uniform_real_distribution<double> sp(0.1, 5.0);
    Volume v(d, {sp(rng), sp(rng), sp(rng)});
    for (auto& x : v.voxels) x = static_cast<std::int16_t>(hu(rng));
    return v;
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected ctseg::Error";
    return ErrorCode::InvalidArgument;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()),
                                              static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(VolumeIo, SingleVoxelFile) {
    TempDir dir;
    Volume v({1, 1, 1}, {1.0, 1.0, 1.0}, -1000);
    save_volume(v, dir / "one.ctv");
    const Volume back = load_volume(dir / "one.ctv");
    EXPECT_EQ(back.dims, (Dims3{1, 1, 1}));
    ASSERT_EQ(back.voxels.size(), 1u);
    EXPECT_EQ(back.voxels[0], -1000);
}

TEST(VolumeIo, ByteLayoutMatchesFormat) {
    Volume v({2, 2, 1}, {0.5, 0.75, 2.5});
    v.voxels = {-1, 0, 300, -32768};
    const auto bytes = encode_volume(v);
    ASSERT_EQ(bytes.size(), 40u + 8u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CTV1");
    EXPECT_EQ(bytes[4], 2);
    EXPECT_EQ(bytes[8], 2);
    EXPECT_EQ(bytes[12], 1);
    double sx;
    std::memcpy(&sx, bytes.data() + 16, 8);
    EXPECT_EQ(sx, 0.5);
    // -1 as little-endian int16, then 300 = 0x012C
    EXPECT_EQ(bytes[40], 0xFF);
    EXPECT_EQ(bytes[41], 0xFF);
    EXPECT_EQ(bytes[44], 0x2C);
    EXPECT_EQ(bytes[45], 0x01);
    EXPECT_EQ(bytes[46], 0x00);
    EXPECT_EQ(bytes[47], 0x80);
}

TEST(VolumeIo, RandomRoundTripIsBitExact) {
    TempDir dir;
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        std::uniform_int_distribution<std::uint32_t> dim(1, 9);
        const Volume v = random_volume(rng, {dim(rng), dim(rng), dim(rng)});
        save_volume(v, dir / "v.ctv");
        EXPECT_EQ(load_volume(dir / "v.ctv"), v);
    }
}

TEST(VolumeIo, MaskRoundTrip) {
    TempDir dir;
    MaskVolume m({3, 4, 5}, {1, 1, 3});
    std::mt19937_64 rng(1);
    for (auto& b : m.voxels) b = rng() & 1;
    save_mask_volume(m, dir / "m.ctm");
    EXPECT_EQ(load_mask_volume(dir / "m.ctm"), m);
}

TEST(VolumeIo, TruncatedPayloadRejected) {
    Volume v({4, 4, 4}, {1, 1, 1});
    auto bytes = encode_volume(v);
    bytes.resize(40 + 32);
    EXPECT_EQ(code_of([&] { decode_volume(bytes); }), ErrorCode::TruncatedPayload);
}

TEST(VolumeIo, BadMagicRejected) {
    auto bytes = encode_volume(Volume({1, 1, 1}, {1, 1, 1}));
    bytes[3] = '2';
    EXPECT_EQ(code_of([&] { decode_volume(bytes); }), ErrorCode::BadMagic);
    EXPECT_EQ(code_of([&] { decode_mask_volume(encode_volume(Volume({1, 1, 1}, {1, 1, 1}))); }),
              ErrorCode::BadMagic);
}

TEST(VolumeIo, NonPositiveSpacingRejected) {
    auto bytes = encode_volume(Volume({1, 1, 1}, {1, 1, 1}));
    const double neg = -1.0;
    std::memcpy(bytes.data() + 24, &neg, 8);
    EXPECT_EQ(code_of([&] { decode_volume(bytes); }), ErrorCode::InvalidSpacing);
}

TEST(VolumeIo, EmptyDimsRejectedOnSave) {
    TempDir dir;
    Volume v;
    v.dims = {0, 2, 2};
    EXPECT_EQ(code_of([&] { save_volume(v, dir / "x.ctv"); }), ErrorCode::InvalidDims);
}

TEST(VolumeIo, MissingFileIsIoFailure) {
    EXPECT_EQ(code_of([] { load_volume("/nonexistent/definitely/not.ctv"); }), ErrorCode::IoFailure);
}

TEST(Window, EndpointsAndMidpoint) {
    const WindowSpec w{-1000, 0};
    EXPECT_EQ(window_pixel(-1000, w), 0);
    EXPECT_EQ(window_pixel(0, w), 255);
    EXPECT_EQ(window_pixel(-500, w), 128);
    EXPECT_EQ(window_pixel(-3000, w), 0);
    EXPECT_EQ(window_pixel(3000, w), 255);
}

TEST(Window, MonotoneInHu) {
    const WindowSpec w{};
    int prev = -1;
    for (int hu = -2000; hu <= 1000; ++hu) {
        const int p = window_pixel(hu, w);
        ASSERT_GE(p, prev);
        prev = p;
    }
}

TEST(Window, OrderingIndependentOfWindow) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> hu(-1500, 500);
    for (int i = 0; i < 1000; ++i) {
        const int a = hu(rng), b = hu(rng);
        const WindowSpec w{-1200.0 + i % 7, 200.0 + i % 13};
        if (a <= b) EXPECT_LE(window_pixel(a, w), window_pixel(b, w));
    }
}

TEST(Window, SliceSelectsPlaneAndChecksRange) {
    Volume v({2, 1, 2}, {1, 1, 1});
    v.voxels = {-1350, 150, 150, -1350};
    const auto s = window_normalize(v, {}, 1);
    EXPECT_EQ(s.width, 2);
    EXPECT_EQ(s.height, 1);
    EXPECT_EQ(s.pixels, (std::vector<std::uint8_t>{255, 0}));
    EXPECT_EQ(code_of([&] { window_normalize(v, {}, 2); }), ErrorCode::IndexOutOfRange);
    EXPECT_EQ(code_of([&] { window_normalize(v, {10, 10}, 0); }), ErrorCode::InvalidArgument);
}

TEST(Resize, IdentityAtSameSize) {
    NormalizedSlice s(3, 3);
    for (std::size_t i = 0; i < 9; ++i) s.pixels[i] = static_cast<std::uint8_t>(i * 20);
    EXPECT_EQ(resize_slice(s, 3, ResizeMode::bilinear), s);
}

TEST(Resize, BilinearAveragesToHalfAwayFromZero) {
    NormalizedSlice s(2, 2);
    s.pixels = {0, 255, 255, 0};
    const auto out = resize_slice(s, 1, ResizeMode::bilinear);
    ASSERT_EQ(out.pixels.size(), 1u);
    EXPECT_EQ(out.pixels[0], 128);
}

TEST(Resize, MaskStaysBinaryAndRejectsBilinear) {
    std::mt19937_64 rng(9);
    for (int size : {1, 3, 7, 16, 33}) {
        BinaryMask m(10, 10);
        for (auto& b : m.pixels) b = rng() & 1;
        const auto out = resize_slice(m, size, ResizeMode::nearest);
        EXPECT_EQ(out.width, size);
        for (auto b : out.pixels) EXPECT_LE(b, 1);
    }
    EXPECT_EQ(code_of([] { resize_slice(BinaryMask(2, 2), 1, ResizeMode::bilinear); }), ErrorCode::BilinearOnMask);
}

TEST(Resize, UpsampleConstantStaysConstant) {
    NormalizedSlice s(4, 4, 77);
    const auto out = resize_slice(s, 9, ResizeMode::bilinear);
    for (auto p : out.pixels) EXPECT_EQ(p, 77);
}

TEST(Pgm, SliceRoundTrip) {
    TempDir dir;
    NormalizedSlice s(5, 3);
    for (std::size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = static_cast<std::uint8_t>(i * 17);
    write_pgm(s, dir / "s.pgm");
    EXPECT_EQ(read_pgm(dir / "s.pgm"), s);
}

TEST(Pgm, MaskConvention) {
    TempDir dir;
    BinaryMask m(2, 2);
    m.pixels = {0, 1, 1, 0};
    write_pgm(m, dir / "m.pgm");
    EXPECT_EQ(read_pgm(dir / "m.pgm").pixels, (std::vector<std::uint8_t>{0, 255, 255, 0}));
    EXPECT_EQ(read_pgm_mask(dir / "m.pgm"), m);
}

TEST(Pgm, HeaderCommentsAccepted) {
    TempDir dir;
    const std::string text = "P5\n# comment\n2 1\n# another\n255\n";
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    bytes.push_back(127);
    bytes.push_back(128);
    write_bytes(dir / "c.pgm", bytes);
    EXPECT_EQ(read_pgm_mask(dir / "c.pgm").pixels, (std::vector<std::uint8_t>{0, 1}));
}

TEST(Pgm, RejectsAsciiAndOtherMaxval) {
    TempDir dir;
    const std::string p2 = "P2\n1 1\n255\n0\n";
    write_bytes(dir / "a.pgm", {p2.begin(), p2.end()});
    EXPECT_EQ(code_of([&] { read_pgm(dir / "a.pgm"); }), ErrorCode::MalformedHeader);
    std::string p5 = "P5\n1 1\n65535\n";
    std::vector<std::uint8_t> b(p5.begin(), p5.end());
    b.insert(b.end(), {0, 0});
    write_bytes(dir / "b.pgm", b);
    EXPECT_EQ(code_of([&] { read_pgm(dir / "b.pgm"); }), ErrorCode::UnsupportedMaxval);
}
