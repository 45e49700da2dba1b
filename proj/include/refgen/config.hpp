#pragma once

// Run configuration: one JSON document with data, vqvae, dot, classifier and
// eval sections. Unknown keys are rejected so typos cannot silently fall back
// to defaults.

#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"

#include "refgen/classifier.hpp"
#include "refgen/io.hpp"
#include "refgen/rf.hpp"
#include "refgen/toppr.hpp"
#include "refgen/transformer.hpp"
#include "refgen/vqvae.hpp"

namespace refgen {

struct RunConfig {
    rf::DatasetConfig data{};

    vq::VqvaeConfig vqvae{};
    vq::TrainConfig vqvae_train{};
    double vqvae_val_frac = 0.1;
    std::uint64_t tokenize_seed = 6;
    // Quantizer mode for tokenize/reconstruct/eval. Sampled tokens carry the
    // posterior's per-slice entropy, which no sequence model can predict.
    std::string tokenize_mode = "argmax";  // or "stochastic"

    std::string dot_name = "nano";
    float dot_dropout = 0.0f;
    dot::TrainConfig dot_train{};
    double dot_val_frac = 0.1;
    float temperature = 1.0f;
    std::uint64_t gen_seed = 7;

    cls::TrainConfig classifier_train{};
    double classifier_val_frac = 0.2;
    // The evaluation classifier trains on fresh frames, never on the test set.
    std::size_t classifier_per_class = 100;

    eval::KdeConfig kde{};
    std::string features = "classifier";  // or "raw"

    RunConfig() {
        data.per_class = 500;
        data.seed = 1;
        vqvae_train.seed = 2;
        dot_train.seed = 3;
        classifier_train.seed = 4;
        kde.seed = 5;
    }

    vq::QuantMode token_mode() const {
        return tokenize_mode == "stochastic" ? vq::QuantMode::Stochastic : vq::QuantMode::Argmax;
    }

    dot::DotConfig dot_config() const {
        auto c = dot::config_by_name(dot_name);
        c.dropout = dot_dropout;
        return c;
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys, const std::string& where) {
    if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!keys.count(k)) throw ValidationError("config: unknown key '" + where + "." + k + "'");
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    const auto& m = c.data.mod;
    return {
        {"data",
         {{"per_class", c.data.per_class},
          {"seed", c.data.seed},
          {"snr_db", c.data.snr_db ? nlohmann::json(*c.data.snr_db) : nlohmann::json(nullptr)},
          {"samples_per_symbol", m.samples_per_symbol},
          {"pulse", rf::pulse_name(m.pulse)},
          {"rolloff", m.rolloff},
          {"span_symbols", m.span_symbols},
          {"ofdm_subcarriers", m.ofdm_subcarriers},
          {"ofdm_cp", m.ofdm_cp}}},
        {"vqvae",
         {{"beta", c.vqvae.beta},
          {"latent_radius", c.vqvae.latent_radius},
          {"anchor_nearest", c.vqvae.anchor_nearest},
          {"lr", c.vqvae_train.lr},
          {"epochs", c.vqvae_train.epochs},
          {"batch", c.vqvae_train.batch},
          {"warmup_frac", c.vqvae_train.warmup_frac},
          {"seed", c.vqvae_train.seed},
          {"restart_interval", c.vqvae_train.restart_interval},
          {"argmax_warmup_frac", c.vqvae_train.argmax_warmup_frac},
          {"relax_tau", c.vqvae_train.relax_tau},
          {"val_frac", c.vqvae_val_frac},
          {"tokenize_seed", c.tokenize_seed},
          {"tokenize_mode", c.tokenize_mode},
          {"encoder", c.vqvae.encoder},
          {"decoder", c.vqvae.decoder}}},
        {"dot",
         {{"config", c.dot_name},
          {"dropout", c.dot_dropout},
          {"lr", c.dot_train.lr},
          {"epochs", c.dot_train.epochs},
          {"batch", c.dot_train.batch},
          {"warmup_frac", c.dot_train.warmup_frac},
          {"seed", c.dot_train.seed},
          {"overfit_patience", c.dot_train.overfit_patience},
          {"val_frac", c.dot_val_frac},
          {"temperature", c.temperature},
          {"gen_seed", c.gen_seed}}},
        {"classifier",
         {{"lr", c.classifier_train.lr},
          {"epochs", c.classifier_train.epochs},
          {"batch", c.classifier_train.batch},
          {"warmup_frac", c.classifier_train.warmup_frac},
          {"seed", c.classifier_train.seed},
          {"min_accuracy", c.classifier_train.min_accuracy},
          {"val_frac", c.classifier_val_frac},
          {"per_class", c.classifier_per_class}}},
        {"eval",
         {{"bootstrap_iters", c.kde.bootstrap_iters},
          {"alpha", c.kde.alpha},
          {"bandwidth", c.kde.bandwidth},
          {"floor_radius", c.kde.floor_radius},
          {"seed", c.kde.seed},
          {"features", c.features}}},
    };
}

inline void validate(const RunConfig& c) {
    c.data.mod.validate();
    require(c.data.per_class >= 1, "data.per_class must be positive");
    c.vqvae.validate();
    require(c.vqvae_val_frac >= 0.0 && c.vqvae_val_frac < 1.0, "vqvae.val_frac must lie in [0,1)");
    require(c.dot_val_frac >= 0.0 && c.dot_val_frac < 1.0, "dot.val_frac must lie in [0,1)");
    require(c.classifier_per_class >= 2, "classifier.per_class must be at least 2");
    require(c.classifier_val_frac > 0.0 && c.classifier_val_frac < 1.0, "classifier.val_frac must lie in (0,1)");
    c.dot_config().validate();
    require(c.temperature >= 0.0f, "dot.temperature must be non-negative");
    require(c.tokenize_mode == "argmax" || c.tokenize_mode == "stochastic",
            "vqvae.tokenize_mode must be 'argmax' or 'stochastic'");
    require(c.features == "classifier" || c.features == "raw", "eval.features must be 'classifier' or 'raw'");
    require(c.kde.alpha > 0.0 && c.kde.alpha < 1.0 && c.kde.bootstrap_iters >= 1, "bad eval bootstrap settings");
}

// Overlays the keys present in `j` onto `c`.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    using detail::read;
    detail::reject_unknown(j, {"data", "vqvae", "dot", "classifier", "eval"}, "config");
    if (j.contains("data")) {
        const auto& d = j["data"];
        detail::reject_unknown(d, {"per_class", "seed", "snr_db", "samples_per_symbol", "pulse", "rolloff",
                                   "span_symbols", "ofdm_subcarriers", "ofdm_cp"},
                               "data");
        read(d, "per_class", c.data.per_class);
        read(d, "seed", c.data.seed);
        if (d.contains("snr_db")) {
            if (d["snr_db"].is_null())
                c.data.snr_db.reset();
            else
                c.data.snr_db = d["snr_db"].get<double>();
        }
        read(d, "samples_per_symbol", c.data.mod.samples_per_symbol);
        if (d.contains("pulse")) c.data.mod.pulse = rf::pulse_from_name(d["pulse"].get<std::string>());
        read(d, "rolloff", c.data.mod.rolloff);
        read(d, "span_symbols", c.data.mod.span_symbols);
        read(d, "ofdm_subcarriers", c.data.mod.ofdm_subcarriers);
        read(d, "ofdm_cp", c.data.mod.ofdm_cp);
    }
    if (j.contains("vqvae")) {
        const auto& v = j["vqvae"];
        detail::reject_unknown(v, {"beta", "latent_radius", "anchor_nearest", "lr", "epochs", "batch", "warmup_frac",
                                   "seed", "restart_interval", "argmax_warmup_frac", "relax_tau", "val_frac",
                                   "tokenize_seed", "tokenize_mode", "encoder", "decoder"},
                               "vqvae");
        read(v, "beta", c.vqvae.beta);
        read(v, "latent_radius", c.vqvae.latent_radius);
        read(v, "anchor_nearest", c.vqvae.anchor_nearest);
        read(v, "lr", c.vqvae_train.lr);
        read(v, "epochs", c.vqvae_train.epochs);
        read(v, "batch", c.vqvae_train.batch);
        read(v, "warmup_frac", c.vqvae_train.warmup_frac);
        read(v, "seed", c.vqvae_train.seed);
        read(v, "restart_interval", c.vqvae_train.restart_interval);
        read(v, "argmax_warmup_frac", c.vqvae_train.argmax_warmup_frac);
        read(v, "relax_tau", c.vqvae_train.relax_tau);
        read(v, "val_frac", c.vqvae_val_frac);
        read(v, "tokenize_seed", c.tokenize_seed);
        read(v, "tokenize_mode", c.tokenize_mode);
        read(v, "encoder", c.vqvae.encoder);
        read(v, "decoder", c.vqvae.decoder);
    }
    if (j.contains("dot")) {
        const auto& d = j["dot"];
        detail::reject_unknown(d, {"config", "dropout", "lr", "epochs", "batch", "warmup_frac", "seed",
                                   "overfit_patience", "val_frac", "temperature", "gen_seed"},
                               "dot");
        read(d, "config", c.dot_name);
        read(d, "dropout", c.dot_dropout);
        read(d, "lr", c.dot_train.lr);
        read(d, "epochs", c.dot_train.epochs);
        read(d, "batch", c.dot_train.batch);
        read(d, "warmup_frac", c.dot_train.warmup_frac);
        read(d, "seed", c.dot_train.seed);
        read(d, "overfit_patience", c.dot_train.overfit_patience);
        read(d, "val_frac", c.dot_val_frac);
        read(d, "temperature", c.temperature);
        read(d, "gen_seed", c.gen_seed);
    }
    if (j.contains("classifier")) {
        const auto& d = j["classifier"];
        detail::reject_unknown(d, {"lr", "epochs", "batch", "warmup_frac", "seed", "min_accuracy", "val_frac", "per_class"},
                               "classifier");
        read(d, "lr", c.classifier_train.lr);
        read(d, "epochs", c.classifier_train.epochs);
        read(d, "batch", c.classifier_train.batch);
        read(d, "warmup_frac", c.classifier_train.warmup_frac);
        read(d, "seed", c.classifier_train.seed);
        read(d, "min_accuracy", c.classifier_train.min_accuracy);
        read(d, "val_frac", c.classifier_val_frac);
        read(d, "per_class", c.classifier_per_class);
    }
    if (j.contains("eval")) {
        const auto& d = j["eval"];
        detail::reject_unknown(d, {"bootstrap_iters", "alpha", "bandwidth", "floor_radius", "seed", "features"},
                               "eval");
        read(d, "bootstrap_iters", c.kde.bootstrap_iters);
        read(d, "alpha", c.kde.alpha);
        read(d, "bandwidth", c.kde.bandwidth);
        read(d, "floor_radius", c.kde.floor_radius);
        read(d, "seed", c.kde.seed);
        read(d, "features", c.features);
    }
    validate(c);
}

inline RunConfig load_config(const std::filesystem::path& path) {
    RunConfig c;
    const Bytes raw = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    apply_json(c, j);
    return c;
}

}  // namespace refgen
