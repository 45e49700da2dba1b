#pragma once

// Baseband modulators, framing into 2x1024 I/Q datapoints, and the dataset file.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refgen/error.hpp"
#include "refgen/io.hpp"
#include "refgen/tensor.hpp"

namespace refgen::rf {

using cfloat = std::complex<float>;
using cdouble = std::complex<double>;

inline constexpr std::size_t kFrameLen = 1024;
inline constexpr std::size_t kNumClasses = 6;

enum class ModScheme : std::uint8_t { ASK4, PAM8, PSK16, QAM32_CROSS, FSK2, OFDM256 };

inline constexpr std::array<ModScheme, kNumClasses> kAllSchemes{
    ModScheme::ASK4, ModScheme::PAM8, ModScheme::PSK16, ModScheme::QAM32_CROSS, ModScheme::FSK2, ModScheme::OFDM256};

inline std::string_view scheme_name(ModScheme s) {
    static constexpr std::array<std::string_view, kNumClasses> names{"4ask",         "8pam", "16psk",
                                                                     "32qam-cross", "2fsk", "ofdm256"};
    return names.at(static_cast<std::size_t>(s));
}

inline ModScheme scheme_from_label(int label) {
    if (label < 0 || label >= static_cast<int>(kNumClasses))
        throw ValidationError("unknown modulation class " + std::to_string(label));
    return kAllSchemes[static_cast<std::size_t>(label)];
}

inline int scheme_label(ModScheme s) { return static_cast<int>(s); }

inline std::size_t bits_per_symbol(ModScheme s) {
    switch (s) {
        case ModScheme::ASK4: return 2;
        case ModScheme::PAM8: return 3;
        case ModScheme::PSK16: return 4;
        case ModScheme::QAM32_CROSS: return 5;
        case ModScheme::FSK2: return 1;
        case ModScheme::OFDM256: return 2;  // per subcarrier (QPSK)
    }
    throw ValidationError("unknown modulation scheme");
}

enum class Pulse : std::uint8_t { Rect, RaisedCosine, RootRaisedCosine };

inline std::string_view pulse_name(Pulse p) {
    switch (p) {
        case Pulse::Rect: return "rect";
        case Pulse::RaisedCosine: return "rc";
        case Pulse::RootRaisedCosine: return "rrc";
    }
    return "?";
}

inline Pulse pulse_from_name(std::string_view n) {
    if (n == "rect") return Pulse::Rect;
    if (n == "rc") return Pulse::RaisedCosine;
    if (n == "rrc") return Pulse::RootRaisedCosine;
    throw ValidationError("unknown pulse shape '" + std::string(n) + "' (rect|rc|rrc)");
}

struct ModConfig {
    std::size_t samples_per_symbol = 8;
    Pulse pulse = Pulse::Rect;
    double rolloff = 0.35;
    std::size_t span_symbols = 8;
    std::size_t ofdm_subcarriers = 256;
    std::size_t ofdm_cp = 64;

    void validate() const {
        require(samples_per_symbol >= 2 && samples_per_symbol % 2 == 0, "samples_per_symbol must be even and >= 2");
        require(rolloff > 0.0 && rolloff <= 1.0, "rolloff must be in (0,1]");
        require(span_symbols >= 2 && span_symbols % 2 == 0, "span_symbols must be even and >= 2");
        require(ofdm_subcarriers >= 2 && (ofdm_subcarriers & (ofdm_subcarriers - 1)) == 0,
                "ofdm_subcarriers must be a power of two");
        require(ofdm_cp < ofdm_subcarriers, "ofdm_cp must be shorter than the symbol");
    }
};

// ---------------------------------------------------------------------------
// Bits

// Deterministic bit stream: identical seed gives an identical sequence.
class BitSource {
   public:
    explicit BitSource(std::uint64_t seed) : rng_(seed) {}

    std::uint8_t next() {
        if (left_ == 0) {
            word_ = rng_();
            left_ = 64;
        }
        const auto b = static_cast<std::uint8_t>(word_ & 1u);
        word_ >>= 1;
        --left_;
        return b;
    }

    std::vector<std::uint8_t> take(std::size_t n) {
        std::vector<std::uint8_t> out(n);
        for (auto& b : out) b = next();
        return out;
    }

   private:
    std::mt19937_64 rng_;
    std::uint64_t word_ = 0;
    int left_ = 0;
};

inline unsigned gray_to_binary(unsigned g) {
    unsigned b = 0;
    for (; g; g >>= 1) b ^= g;
    return b;
}

inline unsigned binary_to_gray(unsigned b) { return b ^ (b >> 1); }

// MSB-first integer from n bits.
inline unsigned pack_bits(std::span<const std::uint8_t> bits) {
    unsigned v = 0;
    for (auto b : bits) v = (v << 1) | (b & 1u);
    return v;
}

// ---------------------------------------------------------------------------
// Symbol maps (pre-normalization)

// Gray-coded amplitude level: bit pattern g sits at level index gray_to_binary(g).
inline float pam_level(unsigned gray_bits, unsigned levels) {
    return 2.0f * static_cast<float>(gray_to_binary(gray_bits)) - static_cast<float>(levels - 1);
}

inline cfloat psk16_point(unsigned gray_bits) {
    const double phase = 2.0 * std::numbers::pi * gray_to_binary(gray_bits) / 16.0;
    return {static_cast<float>(std::cos(phase)), static_cast<float>(std::sin(phase))};
}

// 6x6 grid minus corners, listed along a boustrophedon path so consecutive
// indices are grid neighbours; Gray-decoding the bits along that path makes
// most neighbouring points differ in one bit.
inline const std::array<cfloat, 32>& qam32_path() {
    static const std::array<cfloat, 32> pts = [] {
        std::array<cfloat, 32> p{};
        std::size_t n = 0;
        for (int row = 0; row < 6; ++row)
            for (int c = 0; c < 6; ++c) {
                const int col = row % 2 == 0 ? c : 5 - c;
                const bool corner = (row == 0 || row == 5) && (col == 0 || col == 5);
                if (!corner) p[n++] = {static_cast<float>(2 * col - 5), static_cast<float>(5 - 2 * row)};
            }
        return p;
    }();
    return pts;
}

inline cfloat qam32_point(unsigned gray_bits) { return qam32_path()[gray_to_binary(gray_bits) & 31u]; }

inline cfloat qpsk_point(unsigned bits2) {
    constexpr float a = 0.70710678118654752f;
    return {(bits2 & 2u) ? -a : a, (bits2 & 1u) ? -a : a};
}

// Maps consecutive groups of bits_per_symbol bits (MSB first) to symbols.
inline std::vector<cfloat> map_symbols(ModScheme s, std::span<const std::uint8_t> bits) {
    const std::size_t bps = bits_per_symbol(s);
    require(bits.size() % bps == 0, "bit count is not a multiple of bits_per_symbol");
    std::vector<cfloat> out(bits.size() / bps);
    for (std::size_t k = 0; k < out.size(); ++k) {
        const unsigned g = pack_bits(bits.subspan(k * bps, bps));
        switch (s) {
            case ModScheme::ASK4: out[k] = pam_level(g, 4); break;
            case ModScheme::PAM8: out[k] = pam_level(g, 8); break;
            case ModScheme::PSK16: out[k] = psk16_point(g); break;
            case ModScheme::QAM32_CROSS: out[k] = qam32_point(g); break;
            case ModScheme::OFDM256: out[k] = qpsk_point(g); break;
            case ModScheme::FSK2: out[k] = g ? 1.0f : -1.0f; break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pulse shaping

inline double raised_cosine(double t, double beta) {
    const double edge = 1.0 / (2.0 * beta);
    if (std::abs(std::abs(t) - edge) < 1e-9) return std::numbers::pi / 4.0 * std::sin(std::numbers::pi * edge) /
                                                      (std::numbers::pi * edge);
    const double sinc = t == 0.0 ? 1.0 : std::sin(std::numbers::pi * t) / (std::numbers::pi * t);
    return sinc * std::cos(std::numbers::pi * beta * t) / (1.0 - 4.0 * beta * beta * t * t);
}

inline double root_raised_cosine(double t, double beta) {
    const double pi = std::numbers::pi;
    if (t == 0.0) return 1.0 - beta + 4.0 * beta / pi;
    if (std::abs(std::abs(t) - 1.0 / (4.0 * beta)) < 1e-9)
        return beta / std::sqrt(2.0) *
               ((1.0 + 2.0 / pi) * std::sin(pi / (4.0 * beta)) + (1.0 - 2.0 / pi) * std::cos(pi / (4.0 * beta)));
    const double num = std::sin(pi * t * (1.0 - beta)) + 4.0 * beta * t * std::cos(pi * t * (1.0 + beta));
    const double den = pi * t * (1.0 - 16.0 * beta * beta * t * t);
    return num / den;
}

// Taps of the pulse at offsets m = -half .. taps.size()-half-1 samples from a symbol peak.
struct PulseTaps {
    std::vector<float> taps;
    std::size_t half = 0;
};

inline PulseTaps pulse_taps(const ModConfig& cfg) {
    const std::size_t sps = cfg.samples_per_symbol;
    PulseTaps p;
    if (cfg.pulse == Pulse::Rect) {
        p.half = sps / 2;
        p.taps.assign(sps, 1.0f);
        return p;
    }
    p.half = cfg.span_symbols * sps / 2;
    p.taps.resize(2 * p.half + 1);
    double peak = 0.0;
    for (std::size_t i = 0; i < p.taps.size(); ++i) {
        const double t = (static_cast<double>(i) - static_cast<double>(p.half)) / static_cast<double>(sps);
        const double v =
            cfg.pulse == Pulse::RaisedCosine ? raised_cosine(t, cfg.rolloff) : root_raised_cosine(t, cfg.rolloff);
        p.taps[i] = static_cast<float>(v);
        if (i == p.half) peak = v;
    }
    for (auto& v : p.taps) v = static_cast<float>(v / peak);  // unit gain at the symbol peak
    return p;
}

// Sum of symbol k's pulse centred at sample k*sps, evaluated on samples [0, n).
inline std::vector<cfloat> shape_pulses(std::span<const cfloat> symbols, std::size_t n, const ModConfig& cfg) {
    const PulseTaps p = pulse_taps(cfg);
    const long sps = static_cast<long>(cfg.samples_per_symbol);
    std::vector<cfloat> out(n);
    for (std::size_t k = 0; k < symbols.size(); ++k) {
        const long start = static_cast<long>(k) * sps - static_cast<long>(p.half);
        for (std::size_t i = 0; i < p.taps.size(); ++i) {
            const long t = start + static_cast<long>(i);
            if (t >= 0 && t < static_cast<long>(n)) out[static_cast<std::size_t>(t)] += p.taps[i] * symbols[k];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// FFT (radix-2, in place). inverse=false: X_k = sum x_n e^{-2 pi i kn/N}.

inline void fft(std::span<cdouble> a, bool inverse) {
    const std::size_t n = a.size();
    require(n > 0 && (n & (n - 1)) == 0, "fft length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const cdouble wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cdouble w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const cdouble u = a[i + j], v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// Unitary DFT pair.
inline std::vector<cdouble> dft_unitary(std::span<const cdouble> x, bool inverse) {
    std::vector<cdouble> a(x.begin(), x.end());
    fft(a, inverse);
    const double s = 1.0 / std::sqrt(static_cast<double>(a.size()));
    for (auto& v : a) v *= s;
    return a;
}

// One OFDM symbol: unitary IDFT of the bins with the last cp samples prepended.
inline std::vector<cfloat> ofdm_symbol(std::span<const cfloat> bins, std::size_t cp) {
    std::vector<cdouble> b(bins.begin(), bins.end());
    const auto t = dft_unitary(b, true);
    std::vector<cfloat> out;
    out.reserve(cp + t.size());
    for (std::size_t i = t.size() - cp; i < t.size(); ++i) out.emplace_back(t[i]);
    for (const auto& v : t) out.emplace_back(v);
    return out;
}

// ---------------------------------------------------------------------------
// Modulation

// Bits modulate() consumes to produce n samples.
inline std::size_t bits_needed(ModScheme s, std::size_t n, const ModConfig& cfg) {
    if (s == ModScheme::OFDM256) {
        const std::size_t per = cfg.ofdm_subcarriers + cfg.ofdm_cp;
        return (n + per - 1) / per * cfg.ofdm_subcarriers * 2;
    }
    const std::size_t sps = cfg.samples_per_symbol;
    // one extra symbol so every sample of [0, n) has its full set of contributions
    const std::size_t tail = cfg.pulse == Pulse::Rect ? 1 : cfg.span_symbols / 2 + 1;
    return ((n + sps - 1) / sps + tail) * bits_per_symbol(s);
}

// Complex baseband from an explicit bit sequence. Single-carrier symbol k peaks
// at sample k*sps; FSK keeps its phase continuous across symbols; OFDM symbols
// start at sample 0 with their cyclic prefix.
inline std::vector<cfloat> modulate_bits(ModScheme s, std::span<const std::uint8_t> bits, std::size_t n,
                                         const ModConfig& cfg) {
    cfg.validate();
    require(n >= 1, "modulate: n_samples must be positive");
    require(bits.size() >= bits_needed(s, n, cfg), "modulate: not enough bits");
    const std::size_t sps = cfg.samples_per_symbol;
    switch (s) {
        case ModScheme::FSK2: {
            // tones at +-1/(4T): spacing 1/(2T), phase step +-pi/(2 sps) per sample
            const double step = std::numbers::pi / (2.0 * static_cast<double>(sps));
            std::vector<cfloat> out(n);
            double phase = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                out[t] = {static_cast<float>(std::cos(phase)), static_cast<float>(std::sin(phase))};
                phase += bits[t / sps] ? step : -step;
                phase = std::remainder(phase, 2.0 * std::numbers::pi);
            }
            return out;
        }
        case ModScheme::OFDM256: {
            const std::size_t nsc = cfg.ofdm_subcarriers;
            std::vector<cfloat> out;
            out.reserve(n + nsc + cfg.ofdm_cp);
            for (std::size_t used = 0; out.size() < n; used += 2 * nsc) {
                const auto bins = map_symbols(s, bits.subspan(used, 2 * nsc));
                const auto sym = ofdm_symbol(bins, cfg.ofdm_cp);
                out.insert(out.end(), sym.begin(), sym.end());
            }
            out.resize(n);
            return out;
        }
        default: {
            const std::size_t nbits = bits_needed(s, n, cfg);
            const auto syms = map_symbols(s, bits.first(nbits));
            return shape_pulses(syms, n, cfg);
        }
    }
}

inline std::vector<cfloat> modulate(ModScheme s, BitSource& src, std::size_t n, const ModConfig& cfg) {
    const auto bits = src.take(bits_needed(s, n, cfg));
    return modulate_bits(s, bits, n, cfg);
}

// ---------------------------------------------------------------------------
// Frames

struct IQFrame {
    std::vector<float> i = std::vector<float>(kFrameLen);
    std::vector<float> q = std::vector<float>(kFrameLen);
    int label = 0;

    cfloat at(std::size_t k) const { return {i[k], q[k]}; }
    double mean_power() const {
        double p = 0.0;
        for (std::size_t k = 0; k < kFrameLen; ++k) p += double(i[k]) * i[k] + double(q[k]) * q[k];
        return p / kFrameLen;
    }
};

inline IQFrame frame(std::span<const cfloat> u, std::size_t offset, int label = 0) {
    if (offset + kFrameLen > u.size())
        throw ValidationError("frame window [" + std::to_string(offset) + ", " + std::to_string(offset + kFrameLen) +
                              ") exceeds signal length " + std::to_string(u.size()));
    IQFrame f;
    f.label = label;
    for (std::size_t k = 0; k < kFrameLen; ++k) {
        f.i[k] = u[offset + k].real();
        f.q[k] = u[offset + k].imag();
    }
    return f;
}

inline IQFrame normalize(IQFrame f) {
    const double p = f.mean_power();
    if (!(p > 0.0) || !std::isfinite(p)) throw ValidationError("cannot normalize a zero-energy frame");
    const double s = 1.0 / std::sqrt(p);
    for (std::size_t k = 0; k < kFrameLen; ++k) {
        f.i[k] = static_cast<float>(f.i[k] * s);
        f.q[k] = static_cast<float>(f.q[k] * s);
    }
    return f;
}

// Frames -> Tensor[B, 2, 1024] with I in channel 0 and Q in channel 1.
inline Tensor to_tensor(std::span<const IQFrame> frames) {
    require(!frames.empty(), "to_tensor: no frames");
    Tensor t({frames.size(), 2, kFrameLen});
    for (std::size_t b = 0; b < frames.size(); ++b) {
        std::copy(frames[b].i.begin(), frames[b].i.end(), t.data() + b * 2 * kFrameLen);
        std::copy(frames[b].q.begin(), frames[b].q.end(), t.data() + b * 2 * kFrameLen + kFrameLen);
    }
    return t;
}

inline std::vector<IQFrame> from_tensor(const Tensor& t, std::span<const int> labels) {
    require(t.rank() == 3 && t.dim(1) == 2 && t.dim(2) == kFrameLen, "from_tensor expects [B,2,1024]");
    require(labels.size() == t.dim(0), "from_tensor: label count mismatch");
    std::vector<IQFrame> out(t.dim(0));
    for (std::size_t b = 0; b < out.size(); ++b) {
        const float* p = t.data() + b * 2 * kFrameLen;
        std::copy(p, p + kFrameLen, out[b].i.begin());
        std::copy(p + kFrameLen, p + 2 * kFrameLen, out[b].q.begin());
        out[b].label = labels[b];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset synthesis

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

struct DatasetConfig {
    std::size_t per_class = 500;
    std::uint64_t seed = 0;
    std::optional<double> snr_db;  // AWGN off when empty
    ModConfig mod;
};

// Lead-in long enough for every pulse tail; slack of one OFDM symbol gives an arbitrary start phase.
inline std::size_t window_lead(const ModConfig& cfg) { return cfg.span_symbols * cfg.samples_per_symbol; }
inline std::size_t window_slack(const ModConfig& cfg) { return cfg.ofdm_subcarriers + cfg.ofdm_cp; }

// Frame `index` of class `label`; pure in (config, label, index).
inline IQFrame synth_frame(const DatasetConfig& cfg, int label, std::size_t index) {
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(label) + 1, index));
    const ModScheme s = scheme_from_label(label);
    const std::size_t lead = window_lead(cfg.mod), slack = window_slack(cfg.mod);
    BitSource bits(rng());
    const auto u = modulate(s, bits, lead + slack + kFrameLen, cfg.mod);
    const std::size_t offset = lead + std::uniform_int_distribution<std::size_t>(0, slack - 1)(rng);
    IQFrame f = normalize(frame(u, offset, label));
    if (cfg.snr_db) {
        const double sigma = std::sqrt(std::pow(10.0, -*cfg.snr_db / 10.0) / 2.0);
        std::normal_distribution<double> n(0.0, sigma);
        for (std::size_t k = 0; k < kFrameLen; ++k) {
            f.i[k] = static_cast<float>(f.i[k] + n(rng));
            f.q[k] = static_cast<float>(f.q[k] + n(rng));
        }
        f = normalize(std::move(f));
    }
    return f;
}

// Class-major: per_class frames of class 0, then class 1, ...
inline std::vector<IQFrame> build_dataset(const DatasetConfig& cfg) {
    require(cfg.per_class >= 1, "per_class must be >= 1");
    cfg.mod.validate();
    std::vector<IQFrame> out;
    out.reserve(cfg.per_class * kNumClasses);
    for (std::size_t c = 0; c < kNumClasses; ++c)
        for (std::size_t i = 0; i < cfg.per_class; ++i) out.push_back(synth_frame(cfg, static_cast<int>(c), i));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file: "RFDS" | u16 version | u32 count | per frame {u8 label, 1024 f32 I, 1024 f32 Q}

inline constexpr std::uint16_t kDatasetVersion = 1;

inline Bytes encode_dataset(std::span<const IQFrame> frames) {
    ByteWriter w;
    w.text("RFDS");
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(frames.size()));
    for (const auto& f : frames) {
        require(f.label >= 0 && f.label < static_cast<int>(kNumClasses), "frame label out of range");
        w.u8(static_cast<std::uint8_t>(f.label));
        w.f32s(f.i);
        w.f32s(f.q);
    }
    return w.take();
}

inline std::vector<IQFrame> decode_dataset(std::span<const std::uint8_t> data) {
    ByteReader r(data, "dataset");
    r.expect_magic("RFDS");
    const auto version = r.u16();
    if (version != kDatasetVersion)
        throw IntegrityError("dataset: version " + std::to_string(version) + ", expected " +
                             std::to_string(kDatasetVersion));
    const std::uint32_t count = r.u32();
    if (r.remaining() != std::size_t{count} * (1 + 2 * kFrameLen * sizeof(float)))
        throw IntegrityError("dataset: size does not match frame count " + std::to_string(count));
    std::vector<IQFrame> out(count);
    for (auto& f : out) {
        f.label = r.u8();
        if (f.label >= static_cast<int>(kNumClasses))
            throw IntegrityError("dataset: label " + std::to_string(f.label) + " out of range");
        r.f32s(f.i);
        r.f32s(f.q);
    }
    r.expect_end();
    return out;
}

inline void save_dataset(const std::filesystem::path& p, std::span<const IQFrame> frames) {
    write_file(p, encode_dataset(frames));
}

inline std::vector<IQFrame> load_dataset(const std::filesystem::path& p) { return decode_dataset(read_file(p)); }

}  // namespace refgen::rf
