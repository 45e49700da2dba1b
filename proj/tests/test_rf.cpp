#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <set>

#include "refgen/rf.hpp"

using namespace refgen;
using namespace refgen::rf;

namespace {

// Hand-written 2-bit and 3-bit Gray tables: position in the list is the level
// index, the entry is the bit pattern that lands there.
constexpr unsigned kGray2[4] = {0b00, 0b01, 0b11, 0b10};
constexpr unsigned kGray3[8] = {0b000, 0b001, 0b011, 0b010, 0b110, 0b111, 0b101, 0b100};

std::vector<std::uint8_t> bits_of(std::initializer_list<unsigned> groups, unsigned width) {
    std::vector<std::uint8_t> out;
    for (unsigned g : groups)
        for (int b = static_cast<int>(width) - 1; b >= 0; --b) out.push_back((g >> b) & 1u);
    return out;
}

int popcount(unsigned v) { return __builtin_popcount(v); }

}  // namespace

TEST(BitSource, SameSeedSameStream) {
    BitSource a(42), b(42), c(43);
    const auto x = a.take(1000), y = b.take(1000), z = c.take(1000);
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
    for (auto v : x) EXPECT_LE(v, 1);
}

TEST(SymbolMaps, Ask4GrayLevelsAtSymbolCentres) {
    ModConfig cfg;
    auto bits = bits_of({0b00, 0b01, 0b11, 0b10}, 2);
    bits.resize(bits_needed(ModScheme::ASK4, 32, cfg), 0);
    const auto u = modulate_bits(ModScheme::ASK4, bits, 32, cfg);
    const float expect[4] = {-3, -1, 1, 3};
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_FLOAT_EQ(u[k * cfg.samples_per_symbol].real(), expect[k]) << "symbol " << k;
        EXPECT_FLOAT_EQ(u[k * cfg.samples_per_symbol].imag(), 0.0f);
    }
}

TEST(SymbolMaps, Ask4TableMatchesHandWrittenGray) {
    for (unsigned level = 0; level < 4; ++level)
        EXPECT_FLOAT_EQ(pam_level(kGray2[level], 4), 2.0f * level - 3.0f);
}

TEST(SymbolMaps, Pam8TableMatchesHandWrittenGray) {
    for (unsigned level = 0; level < 8; ++level)
        EXPECT_FLOAT_EQ(pam_level(kGray3[level], 8), 2.0f * level - 7.0f);
    // adjacent levels differ in exactly one bit
    for (unsigned level = 0; level + 1 < 8; ++level) EXPECT_EQ(popcount(kGray3[level] ^ kGray3[level + 1]), 1);
}

TEST(SymbolMaps, Pam8LevelsAtSymbolCentres) {
    ModConfig cfg;
    std::vector<unsigned> groups(kGray3, kGray3 + 8);
    std::vector<std::uint8_t> bits;
    for (unsigned g : groups)
        for (int b = 2; b >= 0; --b) bits.push_back((g >> b) & 1u);
    bits.resize(bits_needed(ModScheme::PAM8, 64, cfg), 0);
    const auto u = modulate_bits(ModScheme::PAM8, bits, 64, cfg);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_FLOAT_EQ(u[k * cfg.samples_per_symbol].real(), 2.0f * k - 7.0f);
}

TEST(SymbolMaps, Psk16UnitMagnitudeAndGrayNeighbours) {
    for (unsigned g = 0; g < 16; ++g) EXPECT_NEAR(std::abs(psk16_point(g)), 1.0f, 1e-6f);
    // phase index k is reached by the Gray word of k, so neighbouring phases differ in one bit
    for (unsigned k = 0; k < 16; ++k) {
        const unsigned g = k ^ (k >> 1);
        const double ang = std::arg(std::complex<double>(psk16_point(g)));
        double expect = 2.0 * std::numbers::pi * k / 16.0;
        if (expect > std::numbers::pi) expect -= 2.0 * std::numbers::pi;
        EXPECT_NEAR(ang, expect, 1e-5);
        EXPECT_EQ(popcount(g ^ (((k + 1) % 16) ^ (((k + 1) % 16) >> 1))), 1);
    }
}

TEST(SymbolMaps, Qam32CrossGeometry) {
    std::set<std::pair<int, int>> pts;
    for (unsigned g = 0; g < 32; ++g) {
        const auto p = qam32_point(g);
        pts.insert({static_cast<int>(p.real()), static_cast<int>(p.imag())});
    }
    ASSERT_EQ(pts.size(), 32u);
    for (auto [x, y] : pts) {
        EXPECT_TRUE(std::abs(x) <= 5 && std::abs(y) <= 5 && x % 2 != 0 && y % 2 != 0);
        EXPECT_FALSE(std::abs(x) == 5 && std::abs(y) == 5) << "corner present";
    }
}

TEST(Modulate, Psk16UnitMagnitudeAtSymbolCentres) {
    ModConfig cfg;
    BitSource src(7);
    const auto u = modulate(ModScheme::PSK16, src, 2048, cfg);
    for (std::size_t t = 0; t < u.size(); t += cfg.samples_per_symbol) EXPECT_NEAR(std::abs(u[t]), 1.0f, 1e-6f);
}

TEST(Modulate, RaisedCosineHitsSymbolValuesAtPeaks) {
    ModConfig cfg;
    cfg.pulse = Pulse::RaisedCosine;
    BitSource src(3);
    const std::size_t n = 512;
    const auto bits = src.take(bits_needed(ModScheme::ASK4, n, cfg));
    const auto u = modulate_bits(ModScheme::ASK4, bits, n, cfg);
    const auto syms = map_symbols(ModScheme::ASK4, bits);
    // Nyquist pulse: zero inter-symbol interference at the peaks once the tails are filled in
    for (std::size_t k = cfg.span_symbols; k * cfg.samples_per_symbol < n; ++k)
        EXPECT_NEAR(u[k * cfg.samples_per_symbol].real(), syms[k].real(), 1e-4f);
}

TEST(Modulate, OfdmDftRoundTrip) {
    ModConfig cfg;
    const std::size_t per = cfg.ofdm_subcarriers + cfg.ofdm_cp;
    BitSource src(11), replay(11);
    const auto u = modulate(ModScheme::OFDM256, src, 2 * per, cfg);
    for (std::size_t s = 0; s < 2; ++s) {
        // naive O(N^2) forward DFT, unitary scaling
        const std::size_t n = cfg.ofdm_subcarriers;
        const auto bits = replay.take(2 * n);
        for (std::size_t k = 0; k < n; ++k) {
            std::complex<double> acc = 0;
            for (std::size_t t = 0; t < n; ++t) {
                const double ang = -2.0 * std::numbers::pi * double(k * t) / double(n);
                acc += std::complex<double>(u[s * per + cfg.ofdm_cp + t]) * std::polar(1.0, ang);
            }
            acc /= std::sqrt(double(n));
            const double a = 1.0 / std::sqrt(2.0);
            const std::complex<double> expect(bits[2 * k] ? -a : a, bits[2 * k + 1] ? -a : a);
            EXPECT_NEAR(acc.real(), expect.real(), 1e-4);
            EXPECT_NEAR(acc.imag(), expect.imag(), 1e-4);
        }
    }
}

TEST(Modulate, OfdmCyclicPrefixRepeatsTail) {
    ModConfig cfg;
    BitSource src(5);
    const auto u = modulate(ModScheme::OFDM256, src, 320, cfg);
    for (std::size_t t = 0; t < cfg.ofdm_cp; ++t) EXPECT_EQ(u[t], u[t + cfg.ofdm_subcarriers]);
}

TEST(Modulate, Fsk2PhaseContinuity) {
    ModConfig cfg;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        BitSource src(seed);
        const auto u = modulate(ModScheme::FSK2, src, 4096, cfg);
        double max_jump = 0.0;
        for (std::size_t t = 1; t < u.size(); ++t) {
            const double d = std::arg(std::complex<double>(u[t]) * std::conj(std::complex<double>(u[t - 1])));
            max_jump = std::max(max_jump, std::abs(d));
            EXPECT_NEAR(std::abs(u[t]), 1.0f, 1e-5f);
        }
        EXPECT_LT(max_jump, std::numbers::pi);
        EXPECT_NEAR(max_jump, std::numbers::pi / (2.0 * cfg.samples_per_symbol), 1e-5);
    }
}

TEST(Modulate, FskToneSpacingIsHalfSymbolRate) {
    // bit 1 advances the phase by +pi/2 over one symbol, bit 0 by -pi/2: the two
    // tones are 1/(2T) apart
    ModConfig cfg;
    std::vector<std::uint8_t> bits{1, 0, 1, 1, 0, 0};
    const auto u = modulate_bits(ModScheme::FSK2, bits, 40, cfg);
    const auto sps = cfg.samples_per_symbol;
    auto turn = [&](std::size_t k) {
        return std::arg(std::complex<double>(u[(k + 1) * sps]) * std::conj(std::complex<double>(u[k * sps])));
    };
    EXPECT_NEAR(turn(0), std::numbers::pi / 2, 1e-5);
    EXPECT_NEAR(turn(1), -std::numbers::pi / 2, 1e-5);
}

TEST(Modulate, RejectsShortBitStreams) {
    std::vector<std::uint8_t> bits(4);
    EXPECT_THROW(modulate_bits(ModScheme::PSK16, bits, 1024, ModConfig{}), ValidationError);
}

TEST(Fft, MatchesNaiveDft) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    std::vector<cdouble> x(64);
    for (auto& v : x) v = {n(rng), n(rng)};
    auto y = x;
    fft(y, false);
    for (std::size_t k = 0; k < x.size(); ++k) {
        cdouble acc = 0;
        for (std::size_t t = 0; t < x.size(); ++t)
            acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * double(k * t) / double(x.size()));
        EXPECT_NEAR(std::abs(acc - y[k]), 0.0, 1e-9);
    }
}

TEST(Frame, WholeSequenceAtOffsetZero) {
    std::vector<cfloat> u(kFrameLen);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = {float(k), -float(k)};
    const auto f = frame(u, 0);
    for (std::size_t k = 0; k < kFrameLen; ++k) EXPECT_EQ(f.at(k), u[k]);
}

TEST(Frame, OverlappingWindowsShareSamples) {
    std::vector<cfloat> u(2048);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = {std::sin(float(k)), std::cos(float(k) * 0.3f)};
    const auto a = frame(u, 0), b = frame(u, 512);
    for (std::size_t k = 0; k < 512; ++k) EXPECT_EQ(a.at(512 + k), b.at(k));
    for (std::size_t k = 0; k < kFrameLen; ++k) EXPECT_EQ(b.at(k), u[512 + k]);
}

TEST(Frame, OutOfRangeWindowThrows) {
    std::vector<cfloat> u(1500);
    EXPECT_THROW(frame(u, 500), ValidationError);
}

TEST(Normalize, UnitPowerIdempotentAndScaleInvariant) {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> n;
    IQFrame f;
    for (std::size_t k = 0; k < kFrameLen; ++k) f.i[k] = n(rng), f.q[k] = n(rng);
    const auto g = normalize(f);
    EXPECT_NEAR(g.mean_power(), 1.0, 1e-6);
    const auto h = normalize(g);
    for (std::size_t k = 0; k < kFrameLen; ++k) EXPECT_NEAR(h.i[k], g.i[k], 1e-6f);
    IQFrame s = f;
    for (std::size_t k = 0; k < kFrameLen; ++k) s.i[k] *= 7, s.q[k] *= 7;
    const auto gs = normalize(s);
    for (std::size_t k = 0; k < kFrameLen; ++k) {
        EXPECT_NEAR(gs.i[k], g.i[k], 1e-6f);
        EXPECT_NEAR(gs.q[k], g.q[k], 1e-6f);
    }
}

TEST(Normalize, ZeroFrameThrows) { EXPECT_THROW(normalize(IQFrame{}), ValidationError); }

TEST(Dataset, PerClassCountsAndLabels) {
    DatasetConfig cfg;
    cfg.per_class = 1;
    const auto ds = build_dataset(cfg);
    ASSERT_EQ(ds.size(), 6u);
    for (int c = 0; c < 6; ++c) EXPECT_EQ(ds[static_cast<std::size_t>(c)].label, c);
}

TEST(Dataset, FiveHundredPerClass) {
    DatasetConfig cfg;
    cfg.per_class = 500;
    const auto ds = build_dataset(cfg);
    ASSERT_EQ(ds.size(), 3000u);
    std::array<int, 6> counts{};
    for (const auto& f : ds) {
        ++counts[static_cast<std::size_t>(f.label)];
        EXPECT_NEAR(f.mean_power(), 1.0, 1e-3);
    }
    for (int c : counts) EXPECT_EQ(c, 500);
}

TEST(Dataset, SameSeedByteIdenticalFile) {
    DatasetConfig cfg;
    cfg.per_class = 20;
    cfg.seed = 9;
    const auto a = encode_dataset(build_dataset(cfg)), b = encode_dataset(build_dataset(cfg));
    EXPECT_EQ(a, b);
    cfg.seed = 10;
    EXPECT_NE(a, encode_dataset(build_dataset(cfg)));
}

TEST(Dataset, FileLayoutAndRoundTrip) {
    DatasetConfig cfg;
    cfg.per_class = 2;
    const auto ds = build_dataset(cfg);
    const auto bytes = encode_dataset(ds);
    ASSERT_EQ(bytes.size(), 4 + 2 + 4 + ds.size() * (1 + 2048 * 4));
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RFDS");
    EXPECT_EQ(bytes[4] | (bytes[5] << 8), 1);
    EXPECT_EQ(bytes[6], ds.size());
    // first record: label then I[0] as little-endian f32
    EXPECT_EQ(bytes[10], 0);
    float i0;
    std::memcpy(&i0, bytes.data() + 11, 4);
    EXPECT_EQ(i0, ds[0].i[0]);
    const auto back = decode_dataset(bytes);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t n = 0; n < ds.size(); ++n) {
        EXPECT_EQ(back[n].label, ds[n].label);
        EXPECT_EQ(back[n].i, ds[n].i);
        EXPECT_EQ(back[n].q, ds[n].q);
    }
}

TEST(Dataset, CorruptFilesRejected) {
    DatasetConfig cfg;
    cfg.per_class = 1;
    auto bytes = encode_dataset(build_dataset(cfg));
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_dataset(truncated), IntegrityError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_dataset(bad_magic), IntegrityError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(decode_dataset(bad_version), IntegrityError);
    auto bad_label = bytes;
    bad_label[10] = 17;
    EXPECT_THROW(decode_dataset(bad_label), IntegrityError);
}

TEST(Dataset, Psk16FramesNearUnitCircle) {
    DatasetConfig cfg;
    cfg.per_class = 20;
    for (const auto& f : build_dataset(cfg)) {
        if (f.label != scheme_label(ModScheme::PSK16)) continue;
        std::size_t inside = 0;
        for (std::size_t k = 0; k < kFrameLen; ++k)
            if (std::abs(std::abs(f.at(k)) - 1.0f) <= 0.15f) ++inside;
        EXPECT_GE(inside, kFrameLen * 9 / 10);
    }
}

TEST(Dataset, AwgnChangesFramesAndKeepsUnitPower) {
    DatasetConfig clean;
    clean.per_class = 2;
    DatasetConfig noisy = clean;
    noisy.snr_db = 10.0;
    const auto a = build_dataset(clean), b = build_dataset(noisy);
    for (std::size_t n = 0; n < a.size(); ++n) {
        EXPECT_NE(a[n].i, b[n].i);
        EXPECT_NEAR(b[n].mean_power(), 1.0, 1e-3);
    }
}

TEST(Dataset, FramesDifferWithinAClass) {
    DatasetConfig cfg;
    cfg.per_class = 3;
    const auto ds = build_dataset(cfg);
    EXPECT_NE(ds[0].i, ds[1].i);
    EXPECT_NE(ds[1].i, ds[2].i);
}
