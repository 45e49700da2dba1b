#pragma once

// Convolutional encoder, stochastic codebook quantizer and transposed-conv
// decoder, with the composite training loss and a training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refgen/autograd.hpp"
#include "refgen/io.hpp"
#include "refgen/optim.hpp"
#include "refgen/rf.hpp"

namespace refgen::vq {

struct ConvSpec {
    std::size_t cin, cout, kernel, stride, pad;
    bool transposed = false;
    bool gelu = true;
};

inline void to_json(nlohmann::json& j, const ConvSpec& s) {
    j = {{"cin", s.cin},       {"cout", s.cout},         {"kernel", s.kernel}, {"stride", s.stride},
         {"pad", s.pad},       {"transposed", s.transposed}, {"gelu", s.gelu}};
}

inline void from_json(const nlohmann::json& j, ConvSpec& s) {
    j.at("cin").get_to(s.cin);
    j.at("cout").get_to(s.cout);
    j.at("kernel").get_to(s.kernel);
    j.at("stride").get_to(s.stride);
    j.at("pad").get_to(s.pad);
    j.at("transposed").get_to(s.transposed);
    j.at("gelu").get_to(s.gelu);
}

struct VqvaeConfig {
    std::size_t codebook_size = 128;
    std::size_t code_dim = 64;
    std::size_t slices = 512;
    float beta = 0.25f;
    // Slices and codewords are projected onto a sphere of this radius before
    // quantization (0 disables). Fixes the latent scale that sets how sharp the
    // posterior exp(-|z - e|^2) is.
    float latent_radius = 16.0f;
    // Codebook and commitment losses target the nearest codeword instead of the
    // sampled one. Against the sampled codeword their minimizer is the posterior
    // mean of the codebook, which keeps the posterior broad.
    bool anchor_nearest = true;
    std::vector<ConvSpec> encoder{
        {2, 32, 7, 1, 3, false, true},
        {32, 64, 4, 2, 1, false, true},
        {64, 64, 7, 1, 3, false, true},
        {64, 64, 3, 1, 1, false, false},
    };
    std::vector<ConvSpec> decoder{
        {64, 64, 7, 1, 3, false, true},
        {64, 64, 7, 1, 3, false, true},
        {64, 64, 4, 2, 1, true, true},
        {64, 32, 7, 1, 3, false, true},
        {32, 2, 7, 1, 3, false, false},
    };

    void validate() const {
        require(beta >= 0.0f && beta < 1.0f, "vqvae beta must lie in [0,1)");
        require(latent_radius >= 0.0f, "latent_radius must be non-negative");
        require(codebook_size >= 2 && codebook_size <= 256, "codebook_size must be in [2,256]");
        require(!encoder.empty() && !decoder.empty(), "vqvae needs encoder and decoder layers");
        require(encoder.front().cin == 2 && encoder.back().cout == code_dim, "encoder must map 2 -> code_dim channels");
        require(decoder.front().cin == code_dim && decoder.back().cout == 2, "decoder must map code_dim -> 2 channels");
        std::size_t len = rf::kFrameLen;
        for (const auto& s : encoder) len = conv1d_out_len(len, s.kernel, s.stride, s.pad);
        require(len == slices, "encoder output length " + std::to_string(len) + " != slices " + std::to_string(slices));
        for (const auto& s : decoder)
            len = s.transposed ? conv1d_transpose_out_len(len, s.kernel, s.stride, s.pad)
                               : conv1d_out_len(len, s.kernel, s.stride, s.pad);
        require(len == rf::kFrameLen, "decoder output length " + std::to_string(len) + " != 1024");
    }
};

inline nlohmann::json config_json(const VqvaeConfig& c) {
    return {{"codebook_size", c.codebook_size}, {"code_dim", c.code_dim}, {"slices", c.slices},
            {"beta", c.beta},                   {"latent_radius", c.latent_radius},
            {"anchor_nearest", c.anchor_nearest},
            {"encoder", c.encoder},             {"decoder", c.decoder}};
}

inline VqvaeConfig vqvae_config_from_json(const nlohmann::json& j) {
    VqvaeConfig c;
    j.at("codebook_size").get_to(c.codebook_size);
    j.at("code_dim").get_to(c.code_dim);
    j.at("slices").get_to(c.slices);
    j.at("beta").get_to(c.beta);
    j.at("latent_radius").get_to(c.latent_radius);
    j.at("anchor_nearest").get_to(c.anchor_nearest);
    j.at("encoder").get_to(c.encoder);
    j.at("decoder").get_to(c.decoder);
    c.validate();
    return c;
}

enum class QuantMode { Stochastic, Argmax };

struct ConvLayer {
    ConvSpec spec;
    Var w, b;

    Var operator()(const Var& x) const {
        Var y = spec.transposed ? conv1d_transpose(x, w, b, spec.stride, spec.pad)
                                : conv1d(x, w, b, spec.stride, spec.pad);
        return spec.gelu ? gelu(y) : y;
    }
};

class Vqvae {
   public:
    explicit Vqvae(VqvaeConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        auto uniform = [&](Shape shape, float bound) {
            std::uniform_real_distribution<float> u(-bound, bound);
            Tensor t(std::move(shape));
            for (auto& v : t.storage()) v = u(rng);
            return parameter(std::move(t));
        };
        auto build = [&](const std::vector<ConvSpec>& specs, std::vector<ConvLayer>& out) {
            for (const auto& s : specs) {
                const std::size_t fan_in = (s.transposed ? s.cout : s.cin) * s.kernel;
                const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
                Shape ws = s.transposed ? Shape{s.cin, s.cout, s.kernel} : Shape{s.cout, s.cin, s.kernel};
                Var w = uniform(std::move(ws), bound);
                Var b = uniform({s.cout}, bound);
                out.push_back({s, w, b});
            }
        };
        build(cfg_.encoder, encoder_);
        build(cfg_.decoder, decoder_);
        codebook_ = uniform({cfg_.codebook_size, cfg_.code_dim}, 1.0f / std::sqrt(static_cast<float>(cfg_.code_dim)));
    }

    const VqvaeConfig& config() const { return cfg_; }
    // Raw codebook parameter.
    const Var& codebook() const { return codebook_; }

    // Codewords e_k as used by the quantizer (on the latent sphere when enabled).
    Var codewords() const { return cfg_.latent_radius > 0 ? l2_normalize_rows(codebook_, cfg_.latent_radius) : codebook_; }

    // Encoder output as [B*S, l] slice rows z_i, on the latent sphere when enabled.
    Var latent_slices(const Var& x) const;

    // [B,2,1024] -> [B,code_dim,slices]
    Var encode(const Var& x) const {
        Var h = x;
        for (const auto& l : encoder_) h = l(h);
        return h;
    }

    // [B,code_dim,slices] -> [B,2,1024]
    Var decode(const Var& zq) const {
        Var h = zq;
        for (const auto& l : decoder_) h = l(h);
        return h;
    }

    std::vector<std::pair<std::string, Var>> named_parameters() const {
        std::vector<std::pair<std::string, Var>> out;
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            out.emplace_back("enc." + std::to_string(i) + ".w", encoder_[i].w);
            out.emplace_back("enc." + std::to_string(i) + ".b", encoder_[i].b);
        }
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            out.emplace_back("dec." + std::to_string(i) + ".w", decoder_[i].w);
            out.emplace_back("dec." + std::to_string(i) + ".b", decoder_[i].b);
        }
        out.emplace_back("codebook", codebook_);
        return out;
    }

    std::vector<Var> parameters() const {
        std::vector<Var> out;
        for (auto& [n, v] : named_parameters()) out.push_back(v);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    // Independent copy of the parameter values.
    Vqvae clone() const {
        Vqvae c(cfg_, 0);
        auto dst = c.named_parameters();
        auto src = named_parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
        return c;
    }

    Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) const {
        Checkpoint ck;
        ck.magic = "RFVQ";
        ck.version = 1;
        ck.hyper = {{"model", config_json(cfg_)}, {"train", std::move(extra)}};
        for (const auto& [n, v] : named_parameters()) ck.tensors.emplace_back(n, v.value());
        return ck;
    }

    static Vqvae from_checkpoint(const Checkpoint& ck) {
        require(ck.magic == "RFVQ", "not a VQ-VAE checkpoint");
        VqvaeConfig cfg;
        try {
            cfg = vqvae_config_from_json(ck.hyper.at("model"));
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("RFVQ checkpoint: bad model block: ") + e.what());
        }
        Vqvae m(cfg, 0);
        for (auto& [n, v] : m.named_parameters()) v.mutable_value() = ck.tensor(n, v.shape());
        return m;
    }

   private:
    VqvaeConfig cfg_;
    std::vector<ConvLayer> encoder_, decoder_;
    Var codebook_;
};

// ---------------------------------------------------------------------------
// Quantizer

// [B,l,S] latent grid -> [B*S, l] slice rows.
inline Var to_slices(const Var& z) {
    const auto& s = z.shape();
    return reshape(transpose_last2(z), {s[0] * s[2], s[1]});
}

// [B*S, l] rows -> [B,l,S] grid.
inline Var grid_of(const Var& rows, std::size_t batch) {
    const std::size_t l = rows.shape()[1], s = rows.shape()[0] / batch;
    return transpose_last2(reshape(rows, {batch, s, l}));
}

inline Var Vqvae::latent_slices(const Var& x) const {
    Var rows = to_slices(encode(x));
    return cfg_.latent_radius > 0 ? l2_normalize_rows(rows, cfg_.latent_radius) : rows;
}

// P(k | z_i) = exp(-d_ik) / sum_j exp(-d_ij), shifted by min_j d_ij.
inline void posterior_row(const float* d, float* p, std::size_t n) {
    const float mn = *std::min_element(d, d + n);
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        p[k] = std::exp(mn - d[k]);
        s += p[k];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (std::size_t k = 0; k < n; ++k) p[k] *= inv;
}

inline std::vector<float> posterior(std::span<const float> z, const Tensor& codebook) {
    const std::size_t n = codebook.dim(0), l = codebook.dim(1);
    require(z.size() == l, "posterior: slice length mismatch");
    std::vector<float> d(n), p(n);
    for (std::size_t k = 0; k < n; ++k) {
        float s = 0.0f;
        for (std::size_t c = 0; c < l; ++c) {
            const float diff = z[c] - codebook[k * l + c];
            s += diff * diff;
        }
        d[k] = s;
    }
    posterior_row(d.data(), p.data(), n);
    return p;
}

inline int sample_index(std::span<const float> p, std::mt19937_64& rng) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double c = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        c += p[k];
        if (u < c) return static_cast<int>(k);
    }
    // rounding left u above the total: fall back to the last nonzero entry
    for (std::size_t k = p.size(); k-- > 0;)
        if (p[k] > 0.0f) return static_cast<int>(k);
    return 0;
}

inline int argmax_index(std::span<const float> p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline double gumbel(std::mt19937_64& rng) {
    const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;  // open interval (0,1)
    return -std::log(-std::log(u));
}

struct Selection {
    std::vector<int> tokens;
    std::vector<int> nearest;
    Tensor noise;  // Gumbel noise per (slice, codeword); empty in argmax mode
};

// Tokens for sq-distance rows [B*S, N]. Stochastic mode draws k = argmax_k(-d_k + G_k)
// with G_k standard Gumbel, an exact sample from the posterior softmax(-d). Frame b
// draws from its own generator seeded by frame_seeds[b], so results do not depend
// on how frames are batched.
inline Selection select_tokens(const Tensor& sqd, std::size_t batch, QuantMode mode,
                               std::span<const std::uint64_t> frame_seeds) {
    const std::size_t rows = sqd.dim(0), n = sqd.dim(1), s = rows / batch;
    Selection sel;
    sel.nearest.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* d = sqd.data() + r * n;
        sel.nearest[r] = static_cast<int>(std::min_element(d, d + n) - d);
    }
    if (mode == QuantMode::Argmax) {
        sel.tokens = sel.nearest;
        return sel;
    }
    sel.tokens.resize(rows);
    sel.noise = Tensor({rows, n});
    for (std::size_t b = 0; b < batch; ++b) {
        std::mt19937_64 rng(frame_seeds[b]);
        for (std::size_t i = 0; i < s; ++i) {
            const std::size_t r = b * s + i;
            const float* d = sqd.data() + r * n;
            float* g = sel.noise.data() + r * n;
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < n; ++k) {
                g[k] = static_cast<float>(gumbel(rng));
                const double v = static_cast<double>(g[k]) - static_cast<double>(d[k]);
                if (v > best) {
                    best = v;
                    sel.tokens[r] = static_cast<int>(k);
                }
            }
        }
    }
    return sel;
}

struct Forward {
    Var z_rows;   // [B*S, l] encoder output slices
    Var zq_rows;  // [B*S, l] selected codewords (differentiable w.r.t. the codebook)
    Var zn_rows;  // [B*S, l] nearest codewords
    Var sqd;      // [B*S, N] squared distances
    Var x_hat;    // [B,2,1024]
    std::vector<int> tokens;
    std::vector<int> nearest;
};

// relax_tau > 0 (stochastic mode only) adds the Gumbel-softmax relaxation
// w = softmax((G - d) / tau) as a zero-valued gradient path,
//   decoder input = straight_through(z, z_q) + (w E - sg(w E)),
// so the forward value is exactly z_q while the sampling distribution still
// receives a gradient from the reconstruction.
inline Forward forward(const Vqvae& m, const Var& x, QuantMode mode, std::span<const std::uint64_t> frame_seeds,
                       float relax_tau = 0.0f) {
    const std::size_t batch = x.shape()[0];
    require(frame_seeds.size() == batch, "vqvae forward: one seed per frame");
    Forward f;
    f.z_rows = m.latent_slices(x);
    const Var codes = m.codewords();
    f.sqd = sq_distances(f.z_rows, codes);
    Selection sel = select_tokens(f.sqd.value(), batch, mode, frame_seeds);
    f.tokens = std::move(sel.tokens);
    f.nearest = std::move(sel.nearest);
    f.zq_rows = embedding(codes, f.tokens);
    f.zn_rows = mode == QuantMode::Argmax ? f.zq_rows : embedding(codes, f.nearest);
    Var dec_in = straight_through(f.z_rows, f.zq_rows);
    if (relax_tau > 0.0f && mode == QuantMode::Stochastic) {
        const Var w = softmax_rows(scale(sub(constant(std::move(sel.noise)), f.sqd), 1.0f / relax_tau));
        const Var soft = matmul(w, codes);
        dec_in = add(dec_in, sub(soft, stop_gradient(soft)));
    }
    f.x_hat = m.decode(grid_of(dec_in, batch));
    return f;
}

struct Losses {
    Var total, rec, quant, commit, kl;
};

// rec: squared error summed over both channels / 1024, averaged over frames.
// quant, commit: squared L2 per slice averaged over slices and frames, against
// the nearest or the sampled codeword (config anchor_nearest).
// kl: KL(frame-level codeword usage || uniform), where usage is the posterior
// averaged over the frame's slices; mean over frames.
inline Losses loss_total(const Var& x, const Forward& f, float beta, bool anchor_nearest = true) {
    require(beta >= 0.0f && beta < 1.0f, "beta must lie in [0,1)");
    const Var& target = anchor_nearest ? f.zn_rows : f.zq_rows;
    const std::size_t batch = x.shape()[0];
    const float rows = static_cast<float>(f.z_rows.shape()[0]);
    Losses l;
    l.rec = scale(sum_sq(sub(f.x_hat, x)), 1.0f / static_cast<float>(batch * rf::kFrameLen));
    l.quant = scale(sum_sq(sub(stop_gradient(f.z_rows), target)), 1.0f / rows);
    l.commit = scale(sum_sq(sub(f.z_rows, stop_gradient(target))), 1.0f / rows);
    l.kl = kl_marginal_to_uniform(scale(f.sqd, -1.0f), batch);
    l.total = add(add(l.rec, l.quant), scale(add(l.commit, l.kl), beta));
    return l;
}

// ---------------------------------------------------------------------------
// Corpus-level helpers

inline std::uint64_t frame_seed(std::uint64_t seed, std::size_t frame_index) {
    return rf::mix_seed(seed, 0x7ab5u, frame_index);
}

struct Reconstruction {
    std::vector<std::vector<int>> tokens;  // per frame, length S
    std::vector<rf::IQFrame> frames;
};

// Full forward pass over frames; frame j of the input uses frame_seed(seed, first_index + j).
inline Reconstruction reconstruct(const Vqvae& m, std::span<const rf::IQFrame> frames, std::uint64_t seed,
                                  QuantMode mode = QuantMode::Stochastic, std::size_t batch = 16,
                                  std::size_t first_index = 0) {
    Reconstruction out;
    const std::size_t s = m.config().slices;
    for (std::size_t start = 0; start < frames.size(); start += batch) {
        const std::size_t n = std::min(batch, frames.size() - start);
        auto chunk = frames.subspan(start, n);
        std::vector<std::uint64_t> seeds(n);
        std::vector<int> labels(n);
        for (std::size_t j = 0; j < n; ++j) {
            seeds[j] = frame_seed(seed, first_index + start + j);
            labels[j] = chunk[j].label;
        }
        const Forward f = forward(m, constant(rf::to_tensor(chunk)), mode, seeds);
        for (std::size_t j = 0; j < n; ++j)
            out.tokens.emplace_back(f.tokens.begin() + static_cast<long>(j * s),
                                    f.tokens.begin() + static_cast<long>((j + 1) * s));
        auto decoded = rf::from_tensor(f.x_hat.value(), labels);
        for (auto& fr : decoded) out.frames.push_back(std::move(fr));
    }
    return out;
}

// Codebook lookup per slice, then decode.
inline std::vector<rf::IQFrame> detokenize(const Vqvae& m, std::span<const std::vector<int>> tokens,
                                           std::span<const int> labels, std::size_t batch = 16) {
    require(tokens.size() == labels.size(), "detokenize: label count mismatch");
    const std::size_t s = m.config().slices, n_codes = m.config().codebook_size;
    std::vector<rf::IQFrame> out;
    for (std::size_t start = 0; start < tokens.size(); start += batch) {
        const std::size_t n = std::min(batch, tokens.size() - start);
        std::vector<int> ids;
        ids.reserve(n * s);
        for (std::size_t j = 0; j < n; ++j) {
            const auto& t = tokens[start + j];
            if (t.size() != s) throw ValidationError("detokenize: sequence length " + std::to_string(t.size()));
            for (int v : t) {
                if (v < 0 || static_cast<std::size_t>(v) >= n_codes)
                    throw ValidationError("detokenize: token " + std::to_string(v) + " outside the codebook");
                ids.push_back(v);
            }
        }
        const Var zq = grid_of(embedding(constant(m.codewords().value()), ids), n);
        auto decoded = rf::from_tensor(m.decode(zq).value(), labels.subspan(start, n));
        for (auto& fr : decoded) out.push_back(std::move(fr));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 16;
    float lr = 2e-3f;
    float warmup_frac = 0.05f;
    std::uint64_t seed = 0;
    // Every restart_interval steps, codewords drawn by no slice in that window are
    // re-seeded from random encoder slices of the current batch (0 disables).
    std::size_t restart_interval = 10;
    // Fraction of the epochs that quantize by argmax before switching to sampling.
    float argmax_warmup_frac = 0.0f;
    // Temperature of the Gumbel-softmax gradient path (0 disables).
    float relax_tau = 1.0f;
};

inline nlohmann::json config_json(const TrainConfig& c) {
    return {{"epochs", c.epochs}, {"batch", c.batch},        {"lr", c.lr},
            {"warmup_frac", c.warmup_frac}, {"seed", c.seed}, {"restart_interval", c.restart_interval},
            {"argmax_warmup_frac", c.argmax_warmup_frac}, {"relax_tau", c.relax_tau}};
}

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0, train_total = 0, train_rec = 0, train_quant = 0, train_commit = 0, train_kl = 0;
    double val_total = 0, val_rec = 0;
    double usage_entropy = 0;  // entropy of the pooled token histogram over the epoch
    std::size_t codes_used = 0;
    std::size_t restarts = 0;  // codewords re-seeded during the epoch
};

struct EvalLoss {
    double total = 0, rec = 0, quant = 0, commit = 0, kl = 0;
};

// Loss over a frame set with fixed per-frame seeds, without gradients.
inline EvalLoss evaluate(const Vqvae& m, std::span<const rf::IQFrame> frames, std::uint64_t seed,
                         std::size_t batch = 16) {
    EvalLoss e;
    if (frames.empty()) return e;
    for (std::size_t start = 0; start < frames.size(); start += batch) {
        const std::size_t n = std::min(batch, frames.size() - start);
        std::vector<std::uint64_t> seeds(n);
        for (std::size_t j = 0; j < n; ++j) seeds[j] = frame_seed(seed, start + j);
        const Var x = constant(rf::to_tensor(frames.subspan(start, n)));
        const Forward f = forward(m, x, QuantMode::Stochastic, seeds);
        const Losses l = loss_total(x, f, m.config().beta, m.config().anchor_nearest);
        const double w = static_cast<double>(n);
        e.total += w * l.total.value().item();
        e.rec += w * l.rec.value().item();
        e.quant += w * l.quant.value().item();
        e.commit += w * l.commit.value().item();
        e.kl += w * l.kl.value().item();
    }
    const double inv = 1.0 / static_cast<double>(frames.size());
    e.total *= inv, e.rec *= inv, e.quant *= inv, e.commit *= inv, e.kl *= inv;
    return e;
}

inline double entropy_of_counts(std::span<const std::size_t> counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    if (total <= 0) return 0.0;
    double h = 0.0;
    for (auto c : counts)
        if (c) {
            const double p = static_cast<double>(c) / total;
            h -= p * std::log(p);
        }
    return h;
}

struct TrainResult {
    Vqvae best;
    std::size_t best_epoch = 0;
    EvalLoss initial_val;
    std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Adam over the composite loss with warmup + cosine decay; keeps the parameters
// of the epoch with the lowest validation total (training total when val is empty).
inline TrainResult train(Vqvae model, std::span<const rf::IQFrame> train_set, std::span<const rf::IQFrame> val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    require(!train_set.empty(), "train_vqvae: empty training set");
    require(cfg.batch >= 1 && cfg.epochs >= 1, "train_vqvae: epochs and batch must be positive");
    const std::size_t steps_per_epoch = (train_set.size() + cfg.batch - 1) / cfg.batch;
    Adam opt(model.parameters(), AdamConfig{cfg.lr});
    const WarmupCosine sched{cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_frac};
    const std::uint64_t val_seed = rf::mix_seed(cfg.seed, 0x5a1u);

    TrainResult res{model.clone(), 0, evaluate(model, val_set, val_seed), {}};
    double best = std::numeric_limits<double>::infinity();
    std::mt19937_64 shuffle_rng(rf::mix_seed(cfg.seed, 0x5u));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const float beta = model.config().beta;
    const std::size_t n_codes = model.config().codebook_size, dim = model.config().code_dim;
    const std::size_t codebook_index = model.parameters().size() - 1;
    std::vector<std::size_t> window_counts(n_codes, 0);
    std::mt19937_64 restart_rng(rf::mix_seed(cfg.seed, 0x4e5u));
    std::size_t step = 0;
    const auto warm_epochs = static_cast<std::size_t>(std::lround(cfg.argmax_warmup_frac * static_cast<float>(cfg.epochs)));

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochLog log;
        log.epoch = epoch;
        log.lr = sched.at(step);
        std::vector<std::size_t> counts(model.config().codebook_size, 0);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            std::vector<rf::IQFrame> batch;
            std::vector<std::uint64_t> seeds;
            for (std::size_t j = 0; j < n; ++j) {
                batch.push_back(train_set[order[start + j]]);
                seeds.push_back(rf::mix_seed(cfg.seed, step, j));
            }
            const Var x = constant(rf::to_tensor(batch));
            if (step == 0) {
                // Every code starts dead: seed the whole codebook from distinct slices of the first batch.
                const Tensor z = model.latent_slices(x).value();
                std::vector<std::size_t> rows(z.dim(0));
                std::iota(rows.begin(), rows.end(), 0);
                std::shuffle(rows.begin(), rows.end(), restart_rng);
                float* cb = model.codebook().node()->value.data();
                for (std::size_t k = 0; k < n_codes; ++k)
                    std::copy_n(z.data() + rows[k % rows.size()] * dim, dim, cb + k * dim);
            }
            const Forward f = forward(model, x, epoch <= warm_epochs ? QuantMode::Argmax : QuantMode::Stochastic, seeds,
                                      cfg.relax_tau);
            const Losses l = loss_total(x, f, beta, model.config().anchor_nearest);
            const float total = l.total.value().item();
            if (!std::isfinite(total))
                throw DivergenceError("VQ-VAE loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            opt.zero_grad();
            backward(l.total);
            opt.step(sched.at(step));
            ++step;
            const double w = static_cast<double>(n);
            log.train_total += w * total;
            log.train_rec += w * l.rec.value().item();
            log.train_quant += w * l.quant.value().item();
            log.train_commit += w * l.commit.value().item();
            log.train_kl += w * l.kl.value().item();
            for (int t : f.tokens) ++counts[static_cast<std::size_t>(t)];
            for (int t : model.config().anchor_nearest ? f.nearest : f.tokens) ++window_counts[static_cast<std::size_t>(t)];
            if (cfg.restart_interval && step % cfg.restart_interval == 0) {
                const Tensor& z = f.z_rows.value();
                std::uniform_int_distribution<std::size_t> pick(0, z.dim(0) - 1);
                float* cb = model.codebook().node()->value.data();
                for (std::size_t k = 0; k < n_codes; ++k) {
                    if (window_counts[k]) continue;
                    std::copy_n(z.data() + pick(restart_rng) * dim, dim, cb + k * dim);
                    opt.reset_moments(codebook_index, k * dim, dim);
                    ++log.restarts;
                }
                std::fill(window_counts.begin(), window_counts.end(), 0);
            }
        }
        const double inv = 1.0 / static_cast<double>(train_set.size());
        log.train_total *= inv, log.train_rec *= inv, log.train_quant *= inv, log.train_commit *= inv,
            log.train_kl *= inv;
        log.usage_entropy = entropy_of_counts(counts);
        log.codes_used = static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c; }));
        if (!val_set.empty()) {
            const EvalLoss v = evaluate(model, val_set, val_seed);
            log.val_total = v.total;
            log.val_rec = v.rec;
        } else {
            log.val_total = log.train_total;
            log.val_rec = log.train_rec;
        }
        if (log.val_total < best) {
            best = log.val_total;
            res.best = model.clone();
            res.best_epoch = epoch;
        }
        res.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return res;
}

}  // namespace refgen::vq
