#pragma once

// Six-way modulation classifier: fixed magnitude channels, strided
// convolutions, global average pooling and a linear head. The pooled vector
// doubles as the feature embedding for support estimation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refgen/autograd.hpp"
#include "refgen/io.hpp"
#include "refgen/optim.hpp"
#include "refgen/rf.hpp"

namespace refgen::cls {

// I, Q, |I|, |Q|, |x|. Amplitude levels (4ASK vs 8PAM) and envelope variation
// (16PSK vs 32QAM) are thresholds on these, which one GELU layer expresses
// directly; from raw I/Q the pairs stay stuck at chance for many epochs.
inline constexpr std::size_t kInputChannels = 5;

inline Tensor input_channels(const Tensor& iq) {
    require(iq.rank() == 3 && iq.dim(1) == 2, "classifier input must be [B,2,L]");
    const std::size_t b = iq.dim(0), l = iq.dim(2);
    Tensor out({b, kInputChannels, l});
    for (std::size_t n = 0; n < b; ++n) {
        const float* i = iq.data() + n * 2 * l;
        const float* q = i + l;
        float* o = out.data() + n * kInputChannels * l;
        for (std::size_t k = 0; k < l; ++k) {
            o[k] = i[k];
            o[l + k] = q[k];
            o[2 * l + k] = std::abs(i[k]);
            o[3 * l + k] = std::abs(q[k]);
            o[4 * l + k] = std::sqrt(i[k] * i[k] + q[k] * q[k]);
        }
    }
    return out;
}

struct ConvStage {
    std::size_t cin, cout, kernel, stride, pad;
};

struct ClassifierConfig {
    std::vector<ConvStage> stages{{kInputChannels, 16, 7, 2, 3}, {16, 32, 5, 2, 2}, {32, 64, 5, 2, 2}, {64, 64, 3, 2, 1}};

    std::size_t feature_dim() const { return stages.back().cout; }

    void validate() const {
        require(!stages.empty() && stages.front().cin == kInputChannels, "classifier must start from 5 input channels");
        for (std::size_t i = 1; i < stages.size(); ++i)
            require(stages[i].cin == stages[i - 1].cout, "classifier stage channels do not chain");
        std::size_t len = rf::kFrameLen;
        for (const auto& s : stages) len = conv1d_out_len(len, s.kernel, s.stride, s.pad);
    }
};

inline nlohmann::json config_json(const ClassifierConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.stages) stages.push_back({s.cin, s.cout, s.kernel, s.stride, s.pad});
    return {{"stages", stages}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.stages.clear();
    for (const auto& s : j.at("stages"))
        c.stages.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>(),
                            s.at(3).get<std::size_t>(), s.at(4).get<std::size_t>()});
    c.validate();
    return c;
}

class Classifier {
   public:
    explicit Classifier(ClassifierConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        auto uniform = [&](Shape shape, float bound) {
            std::uniform_real_distribution<float> u(-bound, bound);
            Tensor t(std::move(shape));
            for (auto& v : t.storage()) v = u(rng);
            return parameter(std::move(t));
        };
        for (const auto& s : cfg_.stages) {
            const float bound = 1.0f / std::sqrt(static_cast<float>(s.cin * s.kernel));
            convs_.push_back({uniform({s.cout, s.cin, s.kernel}, bound), uniform({s.cout}, bound)});
        }
        const float bound = 1.0f / std::sqrt(static_cast<float>(cfg_.feature_dim()));
        head_w_ = uniform({cfg_.feature_dim(), rf::kNumClasses}, bound);
        head_b_ = uniform({rf::kNumClasses}, bound);
    }

    const ClassifierConfig& config() const { return cfg_; }

    // [B,2,1024] -> [B, feature_dim]
    Var features(const Var& x) const {
        Var h = constant(input_channels(x.value()));
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            const auto& s = cfg_.stages[i];
            h = gelu(conv1d(h, convs_[i].first, convs_[i].second, s.stride, s.pad));
        }
        return mean_last(h);
    }

    // [B,2,1024] -> [B,6]
    Var logits(const Var& x) const { return affine(features(x), head_w_, head_b_); }

    std::vector<std::pair<std::string, Var>> named_parameters() const {
        std::vector<std::pair<std::string, Var>> out;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            out.emplace_back("conv." + std::to_string(i) + ".w", convs_[i].first);
            out.emplace_back("conv." + std::to_string(i) + ".b", convs_[i].second);
        }
        out.emplace_back("head.w", head_w_);
        out.emplace_back("head.b", head_b_);
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

    Classifier clone() const {
        Classifier c(cfg_, 0);
        auto dst = c.named_parameters();
        auto src = named_parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
        return c;
    }

    Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) const {
        Checkpoint ck;
        ck.magic = "RFCL";
        ck.version = 1;
        ck.hyper = {{"model", config_json(cfg_)}, {"train", std::move(extra)}};
        for (const auto& [n, v] : named_parameters()) ck.tensors.emplace_back(n, v.value());
        return ck;
    }

    static Classifier from_checkpoint(const Checkpoint& ck) {
        require(ck.magic == "RFCL", "not a classifier checkpoint");
        ClassifierConfig cfg;
        try {
            cfg = classifier_config_from_json(ck.hyper.at("model"));
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("RFCL checkpoint: bad model block: ") + e.what());
        }
        Classifier m(cfg, 0);
        for (auto& [n, v] : m.named_parameters()) v.mutable_value() = ck.tensor(n, v.shape());
        return m;
    }

   private:
    ClassifierConfig cfg_;
    std::vector<std::pair<Var, Var>> convs_;
    Var head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// Inference

inline std::vector<int> predict(const Classifier& m, std::span<const rf::IQFrame> frames, std::size_t batch = 64) {
    std::vector<int> out;
    out.reserve(frames.size());
    for (std::size_t start = 0; start < frames.size(); start += batch) {
        const std::size_t n = std::min(batch, frames.size() - start);
        const Tensor l = m.logits(constant(rf::to_tensor(frames.subspan(start, n)))).value();
        for (std::size_t j = 0; j < n; ++j) {
            const float* row = l.data() + j * rf::kNumClasses;
            out.push_back(static_cast<int>(std::max_element(row, row + rf::kNumClasses) - row));
        }
    }
    return out;
}

// Row-major [frames, feature_dim] penultimate activations.
inline std::vector<std::vector<float>> embed(const Classifier& m, std::span<const rf::IQFrame> frames,
                                             std::size_t batch = 64) {
    std::vector<std::vector<float>> out;
    out.reserve(frames.size());
    const std::size_t d = m.config().feature_dim();
    for (std::size_t start = 0; start < frames.size(); start += batch) {
        const std::size_t n = std::min(batch, frames.size() - start);
        const Tensor f = m.features(constant(rf::to_tensor(frames.subspan(start, n)))).value();
        for (std::size_t j = 0; j < n; ++j) out.emplace_back(f.data() + j * d, f.data() + (j + 1) * d);
    }
    return out;
}

inline double accuracy(const Classifier& m, std::span<const rf::IQFrame> frames) {
    if (frames.empty()) return 0.0;
    const auto pred = predict(m, frames);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) hit += pred[i] == frames[i].label;
    return static_cast<double>(hit) / static_cast<double>(frames.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 32;
    float lr = 1e-2f;
    float warmup_frac = 0.05f;
    std::uint64_t seed = 0;
    // Validation accuracy below this aborts training as a data or model fault (0 disables).
    double min_accuracy = 0.95;
};

inline nlohmann::json config_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},           {"batch", c.batch}, {"lr", c.lr},
            {"warmup_frac", c.warmup_frac}, {"seed", c.seed},   {"min_accuracy", c.min_accuracy}};
}

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0, train_loss = 0, val_accuracy = 0;
};

struct TrainResult {
    Classifier best;
    std::size_t best_epoch = 0;
    double best_accuracy = 0;
    std::vector<EpochLog> log;
};

// Cross-entropy with Adam and warmup + cosine decay; keeps the epoch with the best
// validation accuracy. Throws ValidationError when that accuracy stays below
// min_accuracy, since clean classes are separable.
inline TrainResult train(Classifier model, std::span<const rf::IQFrame> train_set, std::span<const rf::IQFrame> val_set,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
    require(!train_set.empty() && !val_set.empty(), "train_classifier: training and validation sets required");
    require(cfg.batch >= 1 && cfg.epochs >= 1, "train_classifier: epochs and batch must be positive");
    const std::size_t steps_per_epoch = (train_set.size() + cfg.batch - 1) / cfg.batch;
    Adam opt(model.parameters(), AdamConfig{cfg.lr});
    const WarmupCosine sched{cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_frac};
    std::mt19937_64 shuffle_rng(rf::mix_seed(cfg.seed, 0xc1u));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    TrainResult res{model.clone(), 0, -1.0, {}};
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochLog log;
        log.epoch = epoch;
        log.lr = sched.at(step);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            std::vector<rf::IQFrame> batch;
            std::vector<int> labels;
            for (std::size_t j = 0; j < n; ++j) {
                batch.push_back(train_set[order[start + j]]);
                labels.push_back(batch.back().label);
            }
            const Var loss = softmax_cross_entropy(model.logits(constant(rf::to_tensor(batch))), labels);
            const float v = loss.value().item();
            if (!std::isfinite(v)) throw DivergenceError("classifier loss became non-finite at step " + std::to_string(step));
            opt.zero_grad();
            backward(loss);
            opt.step(sched.at(step));
            ++step;
            log.train_loss += static_cast<double>(n) * v;
        }
        log.train_loss /= static_cast<double>(train_set.size());
        log.val_accuracy = accuracy(model, val_set);
        if (log.val_accuracy > res.best_accuracy) {
            res.best_accuracy = log.val_accuracy;
            res.best = model.clone();
            res.best_epoch = epoch;
        }
        res.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    if (cfg.min_accuracy > 0 && res.best_accuracy < cfg.min_accuracy)
        throw ValidationError("classifier reached only " + std::to_string(100.0 * res.best_accuracy) +
                              "% validation accuracy (< " + std::to_string(100.0 * cfg.min_accuracy) +
                              "%); the classes should be separable, check the dataset");
    return res;
}

}  // namespace refgen::cls
