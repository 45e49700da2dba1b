#pragma once

// Discrete training corpus: one codeword-token sequence per frame, the shifted
// (input, target) pairs the transformer trains on, token files and histograms.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "refgen/error.hpp"
#include "refgen/io.hpp"
#include "refgen/rf.hpp"
#include "refgen/vqvae.hpp"

namespace refgen::tok {

inline constexpr std::size_t kSeqLen = 512;
inline constexpr int kCodebook = 128;
inline constexpr int kVocab = kCodebook + static_cast<int>(rf::kNumClasses);

inline int class_token(int label) {
    require(label >= 0 && label < static_cast<int>(rf::kNumClasses), "class label out of range");
    return kCodebook + label;
}

struct TokenSeq {
    std::vector<int> tokens;
    int label = 0;

    void validate() const {
        if (tokens.size() != kSeqLen)
            throw ValidationError("token sequence length " + std::to_string(tokens.size()) + ", expected 512");
        for (int t : tokens)
            if (t < 0 || t >= kCodebook) throw ValidationError("token " + std::to_string(t) + " outside [0,128)");
        if (label < 0 || label >= static_cast<int>(rf::kNumClasses))
            throw ValidationError("sequence label " + std::to_string(label) + " out of range");
    }
};

struct TrainPair {
    std::vector<int> x;  // class token, z_1 .. z_511
    std::vector<int> y;  // z_2 .. z_512
};

inline TrainPair make_pair(const TokenSeq& s) {
    s.validate();
    TrainPair p;
    p.x.reserve(kSeqLen);
    p.x.push_back(class_token(s.label));
    p.x.insert(p.x.end(), s.tokens.begin(), s.tokens.end() - 1);
    p.y.assign(s.tokens.begin() + 1, s.tokens.end());
    return p;
}

inline std::vector<TrainPair> make_pairs(std::span<const TokenSeq> seqs) {
    std::vector<TrainPair> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(make_pair(s));
    return out;
}

// Quantization of every frame; in stochastic mode frame i draws with vq::frame_seed(seed, i).
inline std::vector<TokenSeq> encode_corpus(const vq::Vqvae& m, std::span<const rf::IQFrame> frames,
                                           std::uint64_t seed, vq::QuantMode mode = vq::QuantMode::Stochastic,
                                           std::size_t batch = 16) {
    if (m.config().slices != kSeqLen || m.config().codebook_size != static_cast<std::size_t>(kCodebook))
        throw ValidationError("tokenize: VQ-VAE must have 512 slices and 128 codewords");
    const auto rec = vq::reconstruct(m, frames, seed, mode, batch);
    std::vector<TokenSeq> out(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) out[i] = {rec.tokens[i], frames[i].label};
    return out;
}

inline std::vector<rf::IQFrame> detokenize(const vq::Vqvae& m, std::span<const TokenSeq> seqs,
                                           std::size_t batch = 16) {
    std::vector<std::vector<int>> tokens;
    std::vector<int> labels;
    tokens.reserve(seqs.size());
    for (const auto& s : seqs) {
        s.validate();
        tokens.push_back(s.tokens);
        labels.push_back(s.label);
    }
    return vq::detokenize(m, tokens, labels, batch);
}

// ---------------------------------------------------------------------------
// Token file: "RFTK" | u32 count | per record {u8 label, 512 x u8 token}

inline Bytes encode_tokens(std::span<const TokenSeq> seqs) {
    ByteWriter w;
    w.text("RFTK");
    w.u32(static_cast<std::uint32_t>(seqs.size()));
    for (const auto& s : seqs) {
        s.validate();
        w.u8(static_cast<std::uint8_t>(s.label));
        for (int t : s.tokens) w.u8(static_cast<std::uint8_t>(t));
    }
    return w.take();
}

inline std::vector<TokenSeq> decode_tokens(std::span<const std::uint8_t> data) {
    ByteReader r(data, "token file");
    r.expect_magic("RFTK");
    const std::uint32_t count = r.u32();
    if (r.remaining() != static_cast<std::size_t>(count) * (1 + kSeqLen))
        throw IntegrityError("token file: size does not match record count " + std::to_string(count));
    std::vector<TokenSeq> out(count);
    for (auto& s : out) {
        s.label = r.u8();
        auto raw = r.bytes(kSeqLen);
        s.tokens.assign(raw.begin(), raw.end());
        try {
            s.validate();
        } catch (const ValidationError& e) {
            throw IntegrityError(std::string("token file: ") + e.what());
        }
    }
    return out;
}

inline void save_tokens(const std::filesystem::path& path, std::span<const TokenSeq> seqs) {
    write_file(path, encode_tokens(seqs));
}

inline std::vector<TokenSeq> load_tokens(const std::filesystem::path& path) { return decode_tokens(read_file(path)); }

// ---------------------------------------------------------------------------
// Usage statistics

using Histogram = std::array<std::array<std::uint64_t, kCodebook>, rf::kNumClasses>;

// counts[c][k]: occurrences of token k in sequences labelled c. With by_class false
// everything is pooled into row 0.
inline Histogram codebook_histogram(std::span<const TokenSeq> seqs, bool by_class = true) {
    Histogram h{};
    for (const auto& s : seqs) {
        s.validate();
        auto& row = h[by_class ? static_cast<std::size_t>(s.label) : 0];
        for (int t : s.tokens) ++row[static_cast<std::size_t>(t)];
    }
    return h;
}

inline std::uint64_t total(std::span<const std::uint64_t, kCodebook> row) {
    std::uint64_t n = 0;
    for (auto v : row) n += v;
    return n;
}

inline std::size_t active_codes(std::span<const std::uint64_t, kCodebook> row) {
    std::size_t n = 0;
    for (auto v : row) n += v > 0;
    return n;
}

// Shannon entropy in nats of the normalized counts (0 for an empty row).
inline double entropy(std::span<const std::uint64_t, kCodebook> row) {
    const double n = static_cast<double>(total(row));
    if (n == 0) return 0.0;
    double h = 0.0;
    for (auto v : row)
        if (v > 0) {
            const double p = static_cast<double>(v) / n;
            h -= p * std::log(p);
        }
    return h;
}

// Total-variation distance between two count rows; 1 if either is empty.
inline double tv_distance(std::span<const std::uint64_t, kCodebook> a, std::span<const std::uint64_t, kCodebook> b) {
    const double na = static_cast<double>(total(a)), nb = static_cast<double>(total(b));
    if (na == 0 || nb == 0) return 1.0;
    double d = 0.0;
    for (std::size_t k = 0; k < kCodebook; ++k) d += std::abs(static_cast<double>(a[k]) / na - static_cast<double>(b[k]) / nb);
    return 0.5 * d;
}

inline std::array<std::uint64_t, kCodebook> pooled(const Histogram& h) {
    std::array<std::uint64_t, kCodebook> out{};
    for (const auto& row : h)
        for (std::size_t k = 0; k < kCodebook; ++k) out[k] += row[k];
    return out;
}

}  // namespace refgen::tok
