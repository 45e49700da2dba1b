#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "refgen/tokens.hpp"

using namespace refgen;

namespace {

tok::TokenSeq random_seq(std::mt19937_64& rng, int label) {
    std::uniform_int_distribution<int> u(0, 127);
    tok::TokenSeq s;
    s.label = label;
    s.tokens.resize(512);
    for (auto& t : s.tokens) t = u(rng);
    return s;
}

vq::VqvaeConfig small_config() {
    vq::VqvaeConfig c;
    c.code_dim = 8;
    c.latent_radius = 2.0f;
    c.encoder = {{2, 8, 3, 1, 1, false, true}, {8, 8, 4, 2, 1, false, false}};
    c.decoder = {{8, 8, 4, 2, 1, true, true}, {8, 2, 3, 1, 1, false, false}};
    return c;
}

}  // namespace

TEST(Pairs, DefinitionWithClassOffset) {
    tok::TokenSeq s;
    s.label = 3;
    s.tokens.resize(512);
    std::iota(s.tokens.begin(), s.tokens.end(), 0);
    for (auto& t : s.tokens) t %= 128;
    const auto p = tok::make_pair(s);
    ASSERT_EQ(p.x.size(), 512u);
    ASSERT_EQ(p.y.size(), 511u);
    EXPECT_EQ(p.x[0], 131);
    for (std::size_t n = 1; n < 512; ++n) EXPECT_EQ(p.x[n], s.tokens[n - 1]);
    for (std::size_t n = 0; n < 511; ++n) EXPECT_EQ(p.y[n], s.tokens[n + 1]);
}

TEST(Pairs, ShiftAndVocabularyProperties) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = random_seq(rng, trial % 6);
        const auto p = tok::make_pair(s);
        EXPECT_EQ(p.x.size(), 512u);
        EXPECT_EQ(p.y.size(), 511u);
        EXPECT_EQ(p.x[0], 128 + s.label);
        for (std::size_t k = 1; k <= 510; ++k) EXPECT_EQ(p.x[k + 1], p.y[k - 1]);
        for (std::size_t k = 1; k < 512; ++k) EXPECT_LT(p.x[k], 128);
        for (int t : p.y) EXPECT_LT(t, 128);
        // y[n-1] is the successor of x[n] in the original sequence
        for (std::size_t n = 1; n < 512; ++n) EXPECT_EQ(p.y[n - 1], s.tokens[n]);
    }
}

TEST(Pairs, RejectsInvalidSequences) {
    std::mt19937_64 rng(2);
    auto s = random_seq(rng, 0);
    s.tokens.pop_back();
    EXPECT_THROW(tok::make_pair(s), ValidationError);
    s = random_seq(rng, 0);
    s.tokens[4] = 128;
    EXPECT_THROW(tok::make_pair(s), ValidationError);
    s = random_seq(rng, 6);
    EXPECT_THROW(tok::make_pair(s), ValidationError);
    EXPECT_THROW(tok::class_token(-1), ValidationError);
}

TEST(TokenFile, RoundTripAndLayout) {
    std::mt19937_64 rng(3);
    std::vector<tok::TokenSeq> seqs;
    for (int i = 0; i < 7; ++i) seqs.push_back(random_seq(rng, i % 6));
    const Bytes b = tok::encode_tokens(seqs);
    ASSERT_EQ(b.size(), 4u + 4u + 7u * 513u);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "RFTK");
    EXPECT_EQ(b[4], 7);
    EXPECT_EQ(b[8], seqs[0].label);
    EXPECT_EQ(b[9], seqs[0].tokens[0]);
    const auto back = tok::decode_tokens(b);
    ASSERT_EQ(back.size(), seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        EXPECT_EQ(back[i].label, seqs[i].label);
        EXPECT_EQ(back[i].tokens, seqs[i].tokens);
    }
}

TEST(TokenFile, RejectsCorruption) {
    std::mt19937_64 rng(4);
    std::vector<tok::TokenSeq> seqs{random_seq(rng, 1), random_seq(rng, 2)};
    const Bytes b = tok::encode_tokens(seqs);
    Bytes bad = b;
    bad[0] = 'X';
    EXPECT_THROW(tok::decode_tokens(bad), IntegrityError);
    bad = b;
    bad.pop_back();
    EXPECT_THROW(tok::decode_tokens(bad), IntegrityError);
    bad = b;
    bad[20] = 200;  // token outside the codebook
    EXPECT_THROW(tok::decode_tokens(bad), IntegrityError);
    bad = b;
    bad[8] = 9;  // label out of range
    EXPECT_THROW(tok::decode_tokens(bad), IntegrityError);
}

TEST(Histogram, ConstantSequenceAndConservation) {
    tok::TokenSeq s;
    s.label = 4;
    s.tokens.assign(512, 5);
    const std::vector<tok::TokenSeq> one{s};
    auto h = tok::codebook_histogram(one);
    EXPECT_EQ(h[4][5], 512u);
    EXPECT_EQ(tok::total(h[4]), 512u);
    EXPECT_EQ(tok::active_codes(h[4]), 1u);
    EXPECT_DOUBLE_EQ(tok::entropy(h[4]), 0.0);

    std::mt19937_64 rng(5);
    std::vector<tok::TokenSeq> seqs;
    for (int i = 0; i < 20; ++i) seqs.push_back(random_seq(rng, i % 6));
    h = tok::codebook_histogram(seqs);
    std::uint64_t all = 0;
    for (const auto& row : h) all += tok::total(row);
    EXPECT_EQ(all, 512u * 20u);
    const auto pooled = tok::codebook_histogram(seqs, false);
    EXPECT_EQ(tok::total(pooled[0]), 512u * 20u);
    EXPECT_EQ(tok::pooled(h), pooled[0]);
}

TEST(Histogram, EntropyAndTotalVariation) {
    std::array<std::uint64_t, 128> uniform{}, half{}, other{};
    uniform.fill(3);
    for (std::size_t k = 0; k < 64; ++k) half[k] = 1;
    for (std::size_t k = 64; k < 128; ++k) other[k] = 5;
    EXPECT_NEAR(tok::entropy(uniform), std::log(128.0), 1e-12);
    EXPECT_NEAR(tok::entropy(half), std::log(64.0), 1e-12);
    EXPECT_DOUBLE_EQ(tok::tv_distance(uniform, uniform), 0.0);
    EXPECT_NEAR(tok::tv_distance(half, other), 1.0, 1e-12);
    EXPECT_NEAR(tok::tv_distance(uniform, half), 0.5, 1e-12);
}

TEST(Corpus, DeterministicAndEquivalentToReconstruction) {
    rf::DatasetConfig dc;
    dc.per_class = 2;
    dc.seed = 6;
    const auto frames = rf::build_dataset(dc);
    const vq::Vqvae m(small_config(), 6);
    const auto a = tok::encode_corpus(m, frames, 9);
    const auto b = tok::encode_corpus(m, frames, 9);
    ASSERT_EQ(a.size(), frames.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
        EXPECT_EQ(a[i].label, frames[i].label);
        EXPECT_EQ(a[i].tokens.size(), 512u);
    }
    const auto rec = vq::reconstruct(m, frames, 9);
    const auto back = tok::detokenize(m, a);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(back[i].i, rec.frames[i].i);
        EXPECT_EQ(back[i].q, rec.frames[i].q);
    }
}

TEST(Corpus, ArgmaxModeIsSeedFreeAndMatchesReconstruction) {
    rf::DatasetConfig dc;
    dc.per_class = 1;
    dc.seed = 8;
    const auto frames = rf::build_dataset(dc);
    const vq::Vqvae m(small_config(), 6);
    const auto a = tok::encode_corpus(m, frames, 1, vq::QuantMode::Argmax);
    const auto b = tok::encode_corpus(m, frames, 2, vq::QuantMode::Argmax);
    const auto rec = vq::reconstruct(m, frames, 3, vq::QuantMode::Argmax);
    const auto back = tok::detokenize(m, a);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
        EXPECT_EQ(a[i].tokens, rec.tokens[i]);
        EXPECT_EQ(back[i].i, rec.frames[i].i);
        EXPECT_EQ(back[i].q, rec.frames[i].q);
    }
}

TEST(Corpus, RejectsIncompatibleModel) {
    vq::VqvaeConfig c = small_config();
    c.codebook_size = 64;
    const vq::Vqvae m(c, 1);
    rf::DatasetConfig dc;
    dc.per_class = 1;
    const auto frames = rf::build_dataset(dc);
    EXPECT_THROW(tok::encode_corpus(m, frames, 1), ValidationError);
}
