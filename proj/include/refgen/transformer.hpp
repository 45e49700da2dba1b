#pragma once

// Class-conditioned decoder-only transformer over codeword tokens: causal
// self-attention blocks, next-token training and autoregressive sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refgen/autograd.hpp"
#include "refgen/io.hpp"
#include "refgen/optim.hpp"
#include "refgen/rf.hpp"
#include "refgen/tokens.hpp"

namespace refgen::dot {

struct DotConfig {
    std::string name = "nano";
    std::size_t n_layers = 2, n_heads = 2, d_model = 32, d_ff = 64;
    std::size_t vocab = tok::kVocab;
    std::size_t max_seq = tok::kSeqLen;
    float dropout = 0.0f;

    void validate() const {
        require(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && d_ff >= 1, "transformer sizes must be positive");
        require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        require(vocab == static_cast<std::size_t>(tok::kVocab), "vocab must be 134");
        require(max_seq >= tok::kSeqLen, "max_seq must be at least 512");
        require(dropout >= 0.0f && dropout < 1.0f, "dropout must lie in [0,1)");
    }
};

inline DotConfig nano_config() { return {}; }

inline DotConfig large_config() {
    DotConfig c;
    c.name = "large";
    c.n_layers = 4, c.n_heads = 4, c.d_model = 96, c.d_ff = 288;
    return c;
}

inline DotConfig config_by_name(const std::string& name) {
    if (name == "nano") return nano_config();
    if (name == "large") return large_config();
    throw ValidationError("unknown transformer config '" + name + "' (nano|large)");
}

// Parameter budget each named config is sized against.
inline std::size_t target_params(const std::string& name) {
    if (name == "nano") return 36200;
    if (name == "large") return 443000;
    throw ValidationError("no parameter budget for config '" + name + "'");
}

inline nlohmann::json config_json(const DotConfig& c) {
    return {{"name", c.name},       {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
            {"d_ff", c.d_ff},       {"vocab", c.vocab},       {"max_seq", c.max_seq}, {"dropout", c.dropout}};
}

inline DotConfig dot_config_from_json(const nlohmann::json& j) {
    DotConfig c;
    j.at("name").get_to(c.name);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_model").get_to(c.d_model);
    j.at("d_ff").get_to(c.d_ff);
    j.at("vocab").get_to(c.vocab);
    j.at("max_seq").get_to(c.max_seq);
    j.at("dropout").get_to(c.dropout);
    c.validate();
    return c;
}

struct Block {
    Var ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
};

class Dot {
   public:
    explicit Dot(DotConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg_.d_model, f = cfg_.d_ff;
        auto normal = [&](Shape shape, float sd) {
            std::normal_distribution<float> n(0.0f, sd);
            Tensor t(std::move(shape));
            for (auto& v : t.storage()) v = n(rng);
            return parameter(std::move(t));
        };
        auto filled = [](Shape shape, float v) { return parameter(Tensor(std::move(shape), v)); };
        const float sd = 0.02f, sd_res = sd / std::sqrt(2.0f * static_cast<float>(cfg_.n_layers));
        tok_emb_ = normal({cfg_.vocab, d}, sd);
        pos_emb_ = normal({cfg_.max_seq, d}, sd);
        for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
            Block b;
            b.ln1_g = filled({d}, 1.0f);
            b.ln1_b = filled({d}, 0.0f);
            b.w_qkv = normal({d, 3 * d}, sd);
            b.b_qkv = filled({3 * d}, 0.0f);
            b.w_o = normal({d, d}, sd_res);
            b.b_o = filled({d}, 0.0f);
            b.ln2_g = filled({d}, 1.0f);
            b.ln2_b = filled({d}, 0.0f);
            b.w_ff1 = normal({d, f}, sd);
            b.b_ff1 = filled({f}, 0.0f);
            b.w_ff2 = normal({f, d}, sd_res);
            b.b_ff2 = filled({d}, 0.0f);
            blocks_.push_back(std::move(b));
        }
        lnf_g_ = filled({d}, 1.0f);
        lnf_b_ = filled({d}, 0.0f);
    }

    const DotConfig& config() const { return cfg_; }

    // tokens: batch rows of seq ids, row-major. Returns logits [batch*seq, 128] over
    // codeword tokens; the head shares weights with the codeword embedding rows.
    Var forward(std::span<const int> tokens, std::size_t batch, std::size_t seq,
                std::mt19937_64* dropout_rng = nullptr) const {
        require(batch >= 1 && seq >= 1 && tokens.size() == batch * seq, "transformer forward: token count mismatch");
        if (seq > cfg_.max_seq)
            throw ValidationError("sequence length " + std::to_string(seq) + " exceeds " + std::to_string(cfg_.max_seq));
        std::vector<int> ids(tokens.begin(), tokens.end()), pos(batch * seq);
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % seq);
        const float p = dropout_rng ? cfg_.dropout : 0.0f;
        auto drop = [&](const Var& v) { return p > 0.0f ? dropout(v, p, *dropout_rng) : v; };

        Var x = drop(add(embedding(tok_emb_, ids), embedding(pos_emb_, pos)));
        for (const auto& b : blocks_) {
            const Var qkv = affine(layer_norm(x, b.ln1_g, b.ln1_b), b.w_qkv, b.b_qkv);
            x = add(x, drop(affine(causal_attention(qkv, batch, seq, cfg_.n_heads), b.w_o, b.b_o)));
            const Var h = gelu(affine(layer_norm(x, b.ln2_g, b.ln2_b), b.w_ff1, b.b_ff1));
            x = add(x, drop(affine(h, b.w_ff2, b.b_ff2)));
        }
        return matmul_bt(layer_norm(x, lnf_g_, lnf_b_), slice_rows(tok_emb_, 0, tok::kCodebook));
    }

    std::vector<std::pair<std::string, Var>> named_parameters() const {
        std::vector<std::pair<std::string, Var>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const std::string p = "h." + std::to_string(i) + ".";
            for (auto& [n, v] : std::vector<std::pair<const char*, Var>>{
                     {"ln1.g", b.ln1_g}, {"ln1.b", b.ln1_b}, {"qkv.w", b.w_qkv}, {"qkv.b", b.b_qkv},
                     {"proj.w", b.w_o},  {"proj.b", b.b_o},  {"ln2.g", b.ln2_g}, {"ln2.b", b.ln2_b},
                     {"ff1.w", b.w_ff1}, {"ff1.b", b.b_ff1}, {"ff2.w", b.w_ff2}, {"ff2.b", b.b_ff2}})
                out.emplace_back(p + n, v);
        }
        out.emplace_back("lnf.g", lnf_g_);
        out.emplace_back("lnf.b", lnf_b_);
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

    Dot clone() const {
        Dot c(cfg_, 0);
        auto dst = c.named_parameters();
        auto src = named_parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
        return c;
    }

    Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) const {
        Checkpoint ck;
        ck.magic = "RFDT";
        ck.version = 1;
        ck.hyper = {{"model", config_json(cfg_)}, {"train", std::move(extra)}};
        for (const auto& [n, v] : named_parameters()) ck.tensors.emplace_back(n, v.value());
        return ck;
    }

    static Dot from_checkpoint(const Checkpoint& ck) {
        require(ck.magic == "RFDT", "not a transformer checkpoint");
        DotConfig cfg;
        try {
            cfg = dot_config_from_json(ck.hyper.at("model"));
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("RFDT checkpoint: bad model block: ") + e.what());
        }
        Dot m(cfg, 0);
        for (auto& [n, v] : m.named_parameters()) v.mutable_value() = ck.tensor(n, v.shape());
        return m;
    }

    const Var& token_embedding() const { return tok_emb_; }
    const Var& position_embedding() const { return pos_emb_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    const Var& final_gain() const { return lnf_g_; }
    const Var& final_bias() const { return lnf_b_; }

   private:
    DotConfig cfg_;
    Var tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    Var lnf_g_, lnf_b_;
};

// ---------------------------------------------------------------------------
// Loss

// Targets aligned with the input positions: position 0 (the class token) is
// ignored, position n predicts y[n-1].
inline std::vector<int> targets_of(const tok::TrainPair& p) {
    std::vector<int> t;
    t.reserve(p.x.size());
    t.push_back(-1);
    t.insert(t.end(), p.y.begin(), p.y.end());
    return t;
}

// Mean next-token cross-entropy over positions 1..511 of every pair.
inline Var ce_loss(const Dot& m, std::span<const tok::TrainPair> pairs, std::mt19937_64* dropout_rng = nullptr) {
    require(!pairs.empty(), "ce_loss: no pairs");
    const std::size_t seq = pairs.front().x.size();
    std::vector<int> ids, targets;
    ids.reserve(pairs.size() * seq);
    targets.reserve(pairs.size() * seq);
    for (const auto& p : pairs) {
        require(p.x.size() == seq && p.y.size() + 1 == seq, "ce_loss: ragged pairs");
        ids.insert(ids.end(), p.x.begin(), p.x.end());
        const auto t = targets_of(p);
        targets.insert(targets.end(), t.begin(), t.end());
    }
    return softmax_cross_entropy(m.forward(ids, pairs.size(), seq, dropout_rng), targets);
}

inline double mean_ce(const Dot& m, std::span<const tok::TrainPair> pairs, std::size_t batch = 32) {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t start = 0; start < pairs.size(); start += batch) {
        const std::size_t n = std::min(batch, pairs.size() - start);
        s += static_cast<double>(n) * ce_loss(m, pairs.subspan(start, n)).value().item();
    }
    return s / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch = 32;
    float lr = 1e-3f;
    float warmup_frac = 0.05f;
    std::uint64_t seed = 0;
    // Consecutive epochs of rising validation CE with falling training CE that
    // trigger the overfitting warning.
    std::size_t overfit_patience = 10;
};

inline nlohmann::json config_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},           {"batch", c.batch}, {"lr", c.lr},
            {"warmup_frac", c.warmup_frac}, {"seed", c.seed},   {"overfit_patience", c.overfit_patience}};
}

// Counts consecutive epochs in which validation CE rose while training CE fell.
struct OverfitMonitor {
    explicit OverfitMonitor(std::size_t patience_ = 10) : patience(patience_) {}

    std::size_t patience;
    std::size_t streak = 0;
    std::optional<std::pair<double, double>> prev;

    // Returns true once the streak reaches the patience (0 disables).
    bool update(double train_ce, double val_ce) {
        if (prev) streak = (val_ce > prev->second && train_ce < prev->first) ? streak + 1 : 0;
        prev = {train_ce, val_ce};
        return patience && streak >= patience;
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0, train_ce = 0, val_ce = 0;
    bool overfit_warning = false;
};

struct TrainResult {
    Dot best;
    std::size_t best_epoch = 0;
    double initial_train_ce = 0, initial_val_ce = 0;
    std::vector<EpochLog> log;
    bool overfit_warned = false;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Adam with warmup + cosine decay; keeps the epoch with the lowest validation CE
// (training CE when the validation set is empty).
inline TrainResult train(Dot model, std::span<const tok::TrainPair> train_set, std::span<const tok::TrainPair> val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    require(!train_set.empty(), "train_dot: empty training set");
    require(cfg.batch >= 1 && cfg.epochs >= 1, "train_dot: epochs and batch must be positive");
    const std::size_t steps_per_epoch = (train_set.size() + cfg.batch - 1) / cfg.batch;
    Adam opt(model.parameters(), AdamConfig{cfg.lr});
    const WarmupCosine sched{cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_frac};

    TrainResult res{model.clone(), 0, mean_ce(model, train_set, cfg.batch), mean_ce(model, val_set, cfg.batch), {}};
    double best = std::numeric_limits<double>::infinity();
    std::mt19937_64 shuffle_rng(rf::mix_seed(cfg.seed, 0xd07u));
    std::mt19937_64 dropout_rng(rf::mix_seed(cfg.seed, 0xd0du));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    OverfitMonitor monitor{cfg.overfit_patience};
    std::vector<tok::TrainPair> batch;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochLog log;
        log.epoch = epoch;
        log.lr = sched.at(step);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            batch.clear();
            for (std::size_t j = 0; j < n; ++j) batch.push_back(train_set[order[start + j]]);
            const Var loss = ce_loss(model, batch, &dropout_rng);
            const float v = loss.value().item();
            if (!std::isfinite(v))
                throw DivergenceError("transformer loss became non-finite at epoch " + std::to_string(epoch) +
                                      ", step " + std::to_string(step));
            opt.zero_grad();
            backward(loss);
            opt.step(sched.at(step));
            ++step;
            log.train_ce += static_cast<double>(n) * v;
        }
        log.train_ce /= static_cast<double>(train_set.size());
        log.val_ce = val_set.empty() ? log.train_ce : mean_ce(model, val_set, cfg.batch);
        if (monitor.update(log.train_ce, log.val_ce)) {
            log.overfit_warning = true;
            res.overfit_warned = true;
        }
        if (log.val_ce < best) {
            best = log.val_ce;
            res.best = model.clone();
            res.best_epoch = epoch;
        }
        res.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Incremental decoding with cached keys and values

class Decoder {
   public:
    explicit Decoder(const Dot& m) : m_(m), d_(m.config().d_model) {
        for (std::size_t i = 0; i < m.config().n_layers; ++i) {
            keys_.emplace_back();
            values_.emplace_back();
        }
    }

    std::size_t length() const { return len_; }

    // Appends one token and returns the 128 codeword logits at its position.
    std::vector<float> step(int token) {
        const auto& cfg = m_.config();
        if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab)
            throw ValidationError("token " + std::to_string(token) + " out of range");
        if (len_ >= cfg.max_seq) throw ValidationError("decoder: sequence full");
        const std::size_t d = d_, heads = cfg.n_heads, hd = d / heads;
        std::vector<float> x(d), a(d), qkv(3 * d), att(d), o(d), ff(cfg.d_ff);
        const float* te = m_.token_embedding().value().data() + static_cast<std::size_t>(token) * d;
        const float* pe = m_.position_embedding().value().data() + len_ * d;
        for (std::size_t c = 0; c < d; ++c) x[c] = te[c] + pe[c];
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

        for (std::size_t l = 0; l < m_.blocks().size(); ++l) {
            const Block& b = m_.blocks()[l];
            norm(x, b.ln1_g, b.ln1_b, a);
            linear(a, b.w_qkv, b.b_qkv, qkv);
            auto& K = keys_[l];
            auto& V = values_[l];
            K.insert(K.end(), qkv.begin() + static_cast<long>(d), qkv.begin() + static_cast<long>(2 * d));
            V.insert(V.end(), qkv.begin() + static_cast<long>(2 * d), qkv.end());
            const std::size_t n = len_ + 1;
            std::vector<float> s(n), p(n);
            for (std::size_t h = 0; h < heads; ++h) {
                const float* q = qkv.data() + h * hd;
                for (std::size_t j = 0; j < n; ++j) {
                    float acc = 0.0f;
                    for (std::size_t c = 0; c < hd; ++c) acc += q[c] * scale * K[j * d + h * hd + c];
                    s[j] = acc;
                }
                softmax_row(s.data(), p.data(), n);
                for (std::size_t c = 0; c < hd; ++c) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j < n; ++j) acc += p[j] * V[j * d + h * hd + c];
                    att[h * hd + c] = acc;
                }
            }
            linear(att, b.w_o, b.b_o, o);
            for (std::size_t c = 0; c < d; ++c) x[c] += o[c];
            norm(x, b.ln2_g, b.ln2_b, a);
            linear(a, b.w_ff1, b.b_ff1, ff);
            for (auto& v : ff) v = detail::gelu_value(v);
            linear(ff, b.w_ff2, b.b_ff2, o);
            for (std::size_t c = 0; c < d; ++c) x[c] += o[c];
        }
        norm(x, m_.final_gain(), m_.final_bias(), a);
        std::vector<float> logits(tok::kCodebook);
        const float* e = m_.token_embedding().value().data();
        for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = kernels::dot(d, a.data(), e + k * d);
        ++len_;
        return logits;
    }

   private:
    static void norm(const std::vector<float>& x, const Var& g, const Var& b, std::vector<float>& out) {
        const std::size_t d = x.size();
        double mean = 0.0, var = 0.0;
        for (float v : x) mean += v;
        mean /= static_cast<double>(d);
        for (float v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t c = 0; c < d; ++c)
            out[c] = static_cast<float>((x[c] - mean) * rstd) * g.value()[c] + b.value()[c];
    }

    // out = x * w + b with w [in, out]
    static void linear(const std::vector<float>& x, const Var& w, const Var& b, std::vector<float>& out) {
        const std::size_t n = out.size();
        std::copy_n(b.value().data(), n, out.data());
        for (std::size_t i = 0; i < x.size(); ++i) kernels::axpy(n, x[i], w.value().data() + i * n, out.data());
    }

    const Dot& m_;
    std::size_t d_;
    std::size_t len_ = 0;
    std::vector<std::vector<float>> keys_, values_;
};

// ---------------------------------------------------------------------------
// Sampling

// Draws from softmax(logits / temperature); temperature <= 0 means argmax.
inline int sample_logits(std::span<const float> logits, float temperature, std::mt19937_64& rng) {
    require(!logits.empty(), "sample_logits: empty logits");
    if (temperature <= 0.0f) return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const float mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) s += p[k] = std::exp(static_cast<double>(logits[k] - mx) / temperature);
    const double u = std::uniform_real_distribution<double>(0.0, s)(rng);
    double c = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        c += p[k];
        if (u < c) return static_cast<int>(k);
    }
    return static_cast<int>(p.size() - 1);
}

// Prompt [class token, z_1] with z_1 uniform over the codebook, then 511
// sampled tokens, giving a 512-token sequence.
inline tok::TokenSeq generate(const Dot& m, int label, std::uint64_t seed, float temperature = 1.0f,
                              std::optional<int> first = std::nullopt) {
    std::mt19937_64 rng(seed);
    tok::TokenSeq out;
    out.label = label;
    out.tokens.reserve(tok::kSeqLen);
    const int z1 = first ? *first : std::uniform_int_distribution<int>(0, tok::kCodebook - 1)(rng);
    require(z1 >= 0 && z1 < tok::kCodebook, "generate: first token outside the codebook");
    Decoder dec(m);
    dec.step(tok::class_token(label));
    out.tokens.push_back(z1);
    while (out.tokens.size() < tok::kSeqLen) {
        const auto logits = dec.step(out.tokens.back());
        out.tokens.push_back(sample_logits(logits, temperature, rng));
    }
    return out;
}

inline std::uint64_t fake_seed(std::uint64_t seed, int label, std::size_t index) {
    return rf::mix_seed(seed, 0xfa4e0u + static_cast<std::uint64_t>(label), index);
}

// count sequences per listed class, class-major.
inline std::vector<tok::TokenSeq> generate_many(const Dot& m, std::span<const int> labels, std::size_t count,
                                                std::uint64_t seed, float temperature = 1.0f) {
    std::vector<tok::TokenSeq> out;
    out.reserve(labels.size() * count);
    for (int c : labels)
        for (std::size_t i = 0; i < count; ++i) out.push_back(generate(m, c, fake_seed(seed, c, i), temperature));
    return out;
}

}  // namespace refgen::dot
