#pragma once

// Pipeline commands: each reads artifacts, writes one primary artifact plus side
// files, and records a manifest <out>.manifest.json with the hashes of every
// input and output so the derivation chain can be re-checked later.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "refgen/classifier.hpp"
#include "refgen/config.hpp"
#include "refgen/io.hpp"
#include "refgen/report.hpp"
#include "refgen/rf.hpp"
#include "refgen/tokens.hpp"
#include "refgen/toppr.hpp"
#include "refgen/transformer.hpp"
#include "refgen/vqvae.hpp"

namespace refgen::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests

struct Input {
    std::string role;
    fs::path path;
};

inline fs::path manifest_path(const fs::path& artifact) {
    auto p = artifact;
    p += ".manifest.json";
    return p;
}

inline std::string config_hash(const RunConfig& cfg) { return sha256_hex(sha256(to_json(cfg).dump())); }

// Paths are stored relative to the manifest's directory, so a run directory can be moved.
inline nlohmann::json file_entry(const fs::path& p, const fs::path& manifest_dir) {
    const auto rel = fs::relative(fs::absolute(p), fs::absolute(manifest_dir.empty() ? fs::path(".") : manifest_dir));
    return {{"path", rel.generic_string()}, {"sha256", sha256_file(p)}};
}

// No timestamps or host details, so an identical rerun writes an identical manifest.
inline void write_manifest(const fs::path& artifact, const std::string& command, const RunConfig& cfg,
                           std::uint64_t seed, const std::vector<Input>& inputs,
                           const std::vector<fs::path>& side_outputs = {}) {
    const auto dir = manifest_path(artifact).parent_path();
    nlohmann::json ins = nlohmann::json::array();
    for (const auto& in : inputs) {
        auto e = file_entry(in.path, dir);
        e["role"] = in.role;
        ins.push_back(std::move(e));
    }
    nlohmann::json side = nlohmann::json::array();
    for (const auto& p : side_outputs) side.push_back(file_entry(p, dir));
    const nlohmann::json m{{"artifact", file_entry(artifact, dir)}, {"command", command}, {"seed", seed},
                           {"config_hash", config_hash(cfg)}, {"config", to_json(cfg)}, {"inputs", ins},
                           {"outputs", side}};
    write_text(manifest_path(artifact), m.dump(2) + "\n");
}

namespace detail {

inline fs::path resolve(const std::string& recorded, const fs::path& manifest_dir) {
    const fs::path p(recorded);
    return p.is_absolute() ? p : manifest_dir / p;
}

inline void check_entry(const nlohmann::json& e, const fs::path& dir, const std::string& what) {
    const auto path = resolve(e.at("path").get<std::string>(), dir);
    if (!fs::exists(path)) throw IntegrityError("verify: " + what + " " + path.string() + " is missing");
    if (sha256_file(path) != e.at("sha256").get<std::string>())
        throw IntegrityError("verify: " + what + " " + path.string() + " does not match its recorded hash");
}

inline void verify_into(const fs::path& artifact, std::set<std::string>& seen, std::vector<fs::path>& checked) {
    const auto key = fs::weakly_canonical(artifact).string();
    if (!seen.insert(key).second) return;
    const auto mpath = manifest_path(artifact);
    if (!fs::exists(mpath)) throw IntegrityError("verify: no manifest for " + artifact.string());
    nlohmann::json m;
    try {
        const auto raw = read_file(mpath);
        m = nlohmann::json::parse(raw.begin(), raw.end());
        const auto dir = mpath.parent_path();
        if (sha256_file(artifact) != m.at("artifact").at("sha256").get<std::string>())
            throw IntegrityError("verify: " + artifact.string() + " does not match its manifest");
        if (sha256_hex(sha256(m.at("config").dump())) != m.at("config_hash").get<std::string>())
            throw IntegrityError("verify: config hash mismatch in " + mpath.string());
        for (const auto& e : m.at("outputs")) check_entry(e, dir, "output");
        checked.push_back(artifact);
        for (const auto& e : m.at("inputs")) {
            check_entry(e, dir, "input");
            const auto in = resolve(e.at("path").get<std::string>(), dir);
            // Inputs produced outside the pipeline (e.g. a hand-written config) have no manifest.
            if (fs::exists(manifest_path(in))) verify_into(in, seen, checked);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("verify: malformed manifest " + mpath.string() + ": " + e.what());
    }
}

}  // namespace detail

// Re-hashes the artifact, its side outputs and every upstream artifact. Returns
// the artifacts whose manifests were checked; throws IntegrityError on mismatch.
inline std::vector<fs::path> verify(const fs::path& artifact) {
    std::set<std::string> seen;
    std::vector<fs::path> checked;
    detail::verify_into(artifact, seen, checked);
    return checked;
}

// ---------------------------------------------------------------------------
// Splits

template <class T>
struct Split {
    std::vector<T> train, val;
};

// Stratified: within each class a seeded shuffle, the first ceil(frac * n) go to val.
// Classes with a single item stay in train.
template <class T, class LabelOf>
Split<T> stratified_split(std::span<const T> items, double frac, std::uint64_t seed, LabelOf label_of) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < items.size(); ++i) by_class[label_of(items[i])].push_back(i);
    std::vector<bool> is_val(items.size(), false);
    for (auto& [c, idx] : by_class) {
        std::mt19937_64 rng(rf::mix_seed(seed, 0x5b17u, static_cast<std::uint64_t>(c)));
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t n_val = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(idx.size())));
        if (idx.size() < 2) n_val = 0;
        n_val = std::min(n_val, idx.size() - 1);
        for (std::size_t k = 0; k < n_val; ++k) is_val[idx[k]] = true;
    }
    Split<T> s;
    for (std::size_t i = 0; i < items.size(); ++i) (is_val[i] ? s.val : s.train).push_back(items[i]);
    return s;
}

inline Split<rf::IQFrame> split_frames(std::span<const rf::IQFrame> frames, double frac, std::uint64_t seed) {
    return stratified_split(frames, frac, seed, [](const rf::IQFrame& f) { return f.label; });
}

inline Split<tok::TokenSeq> split_tokens(std::span<const tok::TokenSeq> seqs, double frac, std::uint64_t seed) {
    return stratified_split(seqs, frac, seed, [](const tok::TokenSeq& s) { return s.label; });
}

// ---------------------------------------------------------------------------
// Side-file helpers

inline fs::path sibling(const fs::path& out, const std::string& suffix) {
    auto p = out;
    p += suffix;
    return p;
}

using Log = std::function<void(const std::string&)>;

inline void say(const Log& log, const std::string& s) {
    if (log) log(s);
}

inline std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_data(const RunConfig& cfg, const fs::path& out, const Log& log = {}) {
    const auto frames = rf::build_dataset(cfg.data);
    rf::save_dataset(out, frames);
    write_manifest(out, "data", cfg, cfg.data.seed, {});
    say(log, "wrote " + std::to_string(frames.size()) + " frames to " + out.string());
}

inline vq::TrainResult cmd_train_vqvae(const RunConfig& cfg, const fs::path& data, const fs::path& out,
                                       const Log& log = {}) {
    const auto frames = rf::load_dataset(data);
    const auto split = split_frames(frames, cfg.vqvae_val_frac, cfg.vqvae_train.seed);
    say(log, "train-vqvae: " + std::to_string(split.train.size()) + " train / " + std::to_string(split.val.size()) +
                 " val frames");
    vq::Vqvae model(cfg.vqvae, rf::mix_seed(cfg.vqvae_train.seed, 0x1417u));
    auto res = vq::train(std::move(model), split.train, split.val, cfg.vqvae_train, [&](const vq::EpochLog& l) {
        say(log, "epoch " + std::to_string(l.epoch) + " total " + fmt(l.train_total) + " rec " + fmt(l.train_rec) +
                     " quant " + fmt(l.train_quant) + " kl " + fmt(l.train_kl) + " val " + fmt(l.val_total) +
                     " usage " + fmt(l.usage_entropy, 2) + " codes " + std::to_string(l.codes_used));
    });

    nlohmann::json extra{{"train", vq::config_json(cfg.vqvae_train)},
                         {"best_epoch", res.best_epoch},
                         {"initial_val_rec", res.initial_val.rec}};
    save_checkpoint(out, res.best.to_checkpoint(extra));

    std::vector<std::vector<double>> rows;
    rows.push_back({0, 0, res.initial_val.total, res.initial_val.rec, res.initial_val.quant, res.initial_val.commit,
                    res.initial_val.kl, res.initial_val.total, res.initial_val.rec, 0, 0, 0});
    for (const auto& l : res.log)
        rows.push_back({static_cast<double>(l.epoch), l.lr, l.train_total, l.train_rec, l.train_quant, l.train_commit,
                        l.train_kl, l.val_total, l.val_rec, l.usage_entropy, static_cast<double>(l.codes_used),
                        static_cast<double>(l.restarts)});
    const auto loss_csv = sibling(out, ".loss.csv");
    write_text(loss_csv, eval::table_csv({"epoch", "lr", "total", "rec", "quant", "commit", "kl", "val_total",
                                          "val_rec", "usage_entropy", "codes_used", "restarts"},
                                         rows));
    write_manifest(out, "train-vqvae", cfg, cfg.vqvae_train.seed, {{"data", data}}, {loss_csv});
    say(log, "best epoch " + std::to_string(res.best_epoch) + "; checkpoint " + out.string());
    return res;
}

inline std::vector<tok::TokenSeq> cmd_tokenize(const RunConfig& cfg, const fs::path& vqvae, const fs::path& data,
                                               const fs::path& out, const Log& log = {}) {
    const auto model = vq::Vqvae::from_checkpoint(load_checkpoint(vqvae, "RFVQ", 1));
    const auto frames = rf::load_dataset(data);
    const auto seqs = tok::encode_corpus(model, frames, cfg.tokenize_seed, cfg.token_mode());
    tok::save_tokens(out, seqs);
    const auto hist_csv = sibling(out, ".hist.csv");
    write_text(hist_csv, eval::histogram_csv(tok::codebook_histogram(seqs)));
    write_manifest(out, "tokenize", cfg, cfg.tokenize_seed, {{"vqvae", vqvae}, {"data", data}}, {hist_csv});
    say(log, "tokenized " + std::to_string(seqs.size()) + " frames into " + out.string());
    return seqs;
}

inline dot::TrainResult cmd_train_dot(const RunConfig& cfg, const fs::path& tokens, const fs::path& out,
                                      const Log& log = {}) {
    const auto seqs = tok::load_tokens(tokens);
    const auto split = split_tokens(seqs, cfg.dot_val_frac, cfg.dot_train.seed);
    const auto train_pairs = tok::make_pairs(split.train);
    const auto val_pairs = tok::make_pairs(split.val);
    const auto dcfg = cfg.dot_config();
    dot::Dot model(dcfg, rf::mix_seed(cfg.dot_train.seed, 0x1417u));
    say(log, "train-dot: " + dcfg.name + " (" + std::to_string(model.parameter_count()) + " parameters), " +
                 std::to_string(train_pairs.size()) + " train / " + std::to_string(val_pairs.size()) + " val");
    auto res = dot::train(std::move(model), train_pairs, val_pairs, cfg.dot_train, [&](const dot::EpochLog& l) {
        say(log, "epoch " + std::to_string(l.epoch) + " train_ce " + fmt(l.train_ce) + " val_ce " + fmt(l.val_ce) +
                     (l.overfit_warning ? "  warning: validation CE rising while training CE falls" : ""));
    });

    nlohmann::json extra{{"train", dot::config_json(cfg.dot_train)},
                         {"best_epoch", res.best_epoch},
                         {"initial_train_ce", res.initial_train_ce}};
    save_checkpoint(out, res.best.to_checkpoint(extra));
    std::vector<std::vector<double>> rows;
    rows.push_back({0, 0, res.initial_train_ce, res.initial_val_ce, 0});
    for (const auto& l : res.log)
        rows.push_back({static_cast<double>(l.epoch), l.lr, l.train_ce, l.val_ce, l.overfit_warning ? 1.0 : 0.0});
    const auto loss_csv = sibling(out, ".loss.csv");
    write_text(loss_csv, eval::table_csv({"epoch", "lr", "train_ce", "val_ce", "overfit_warning"}, rows));
    write_manifest(out, "train-dot", cfg, cfg.dot_train.seed, {{"tokens", tokens}}, {loss_csv});
    say(log, "best epoch " + std::to_string(res.best_epoch) + "; checkpoint " + out.string());
    return res;
}

// `count` fakes split evenly over the six classes. Writes the frames to `out`
// and the generated token sequences to <out>.tokens.
inline std::vector<rf::IQFrame> cmd_gen(const RunConfig& cfg, const fs::path& dot_ckpt, const fs::path& vqvae,
                                        std::size_t count, const fs::path& out, const Log& log = {}) {
    if (count == 0 || count % rf::kNumClasses != 0)
        throw ValidationError("gen: count must be a positive multiple of " + std::to_string(rf::kNumClasses));
    const auto model = dot::Dot::from_checkpoint(load_checkpoint(dot_ckpt, "RFDT", 1));
    const auto vq_model = vq::Vqvae::from_checkpoint(load_checkpoint(vqvae, "RFVQ", 1));
    std::vector<int> labels(rf::kNumClasses);
    std::iota(labels.begin(), labels.end(), 0);
    const auto seqs = dot::generate_many(model, labels, count / rf::kNumClasses, cfg.gen_seed, cfg.temperature);
    const auto frames = tok::detokenize(vq_model, seqs);
    rf::save_dataset(out, frames);
    const auto tok_path = sibling(out, ".tokens");
    tok::save_tokens(tok_path, seqs);
    write_manifest(out, "gen", cfg, cfg.gen_seed, {{"dot", dot_ckpt}, {"vqvae", vqvae}}, {tok_path});
    say(log, "generated " + std::to_string(frames.size()) + " fakes into " + out.string());
    return frames;
}

inline std::vector<rf::IQFrame> cmd_reconstruct(const RunConfig& cfg, const fs::path& vqvae, const fs::path& data,
                                                const fs::path& out, const Log& log = {}) {
    const auto model = vq::Vqvae::from_checkpoint(load_checkpoint(vqvae, "RFVQ", 1));
    const auto frames = rf::load_dataset(data);
    const auto rec = vq::reconstruct(model, frames, cfg.tokenize_seed, cfg.token_mode());
    rf::save_dataset(out, rec.frames);
    write_manifest(out, "reconstruct", cfg, cfg.tokenize_seed, {{"vqvae", vqvae}, {"data", data}});
    say(log, "reconstructed " + std::to_string(rec.frames.size()) + " frames into " + out.string());
    return rec.frames;
}

// Trains on freshly synthesized frames (classifier.per_class per class, seed
// derived from data.seed and classifier.seed) so test frames stay unseen.
inline cls::TrainResult train_eval_classifier(const RunConfig& cfg, const Log& log = {}) {
    rf::DatasetConfig dc = cfg.data;
    dc.per_class = cfg.classifier_per_class;
    dc.seed = rf::mix_seed(cfg.data.seed, 0xc1a55u, cfg.classifier_train.seed);
    const auto frames = rf::build_dataset(dc);
    const auto split = split_frames(frames, cfg.classifier_val_frac, cfg.classifier_train.seed);
    return cls::train(cls::Classifier({}, rf::mix_seed(cfg.classifier_train.seed, 0x1417u)), split.train, split.val,
                      cfg.classifier_train, [&](const cls::EpochLog& l) {
                          say(log, "classifier epoch " + std::to_string(l.epoch) + " loss " + fmt(l.train_loss) +
                                       " val_acc " + fmt(l.val_accuracy));
                      });
}

inline cls::TrainResult cmd_train_classifier(const RunConfig& cfg, const fs::path& out, const Log& log = {}) {
    auto res = train_eval_classifier(cfg, log);
    save_checkpoint(out, res.best.to_checkpoint({{"train", cls::config_json(cfg.classifier_train)},
                                                  {"best_accuracy", res.best_accuracy}}));
    write_manifest(out, "train-classifier", cfg, cfg.classifier_train.seed, {});
    return res;
}

struct EvalInputs {
    fs::path data;                       // real test frames
    std::optional<fs::path> fakes;       // generated frames
    std::optional<fs::path> vqvae;       // adds a reconstruction row
    std::optional<fs::path> classifier;  // trained on the fly when absent
    std::optional<fs::path> tokens;      // real tokens, for histogram comparison
    std::optional<fs::path> fake_tokens;
};

inline eval::PointSet features_of(const RunConfig& cfg, const cls::Classifier& c, std::span<const rf::IQFrame> frames) {
    if (cfg.features == "raw") {
        std::vector<double> data;
        data.reserve(frames.size() * 2 * rf::kFrameLen);
        for (const auto& f : frames) {
            data.insert(data.end(), f.i.begin(), f.i.end());
            data.insert(data.end(), f.q.begin(), f.q.end());
        }
        return {2 * rf::kFrameLen, std::move(data)};
    }
    return eval::PointSet::from_rows(cls::embed(c, frames));
}

// Writes the JSON report to `out` (hyperparameters echoed under "config") plus
// constellation and histogram CSVs next to it. Returns the report.
inline nlohmann::json cmd_eval(const RunConfig& cfg, const EvalInputs& in, const fs::path& out, const Log& log = {}) {
    std::vector<Input> inputs{{"data", in.data}};
    std::vector<fs::path> side;
    const auto real = rf::load_dataset(in.data);
    nlohmann::json report{{"config", to_json(cfg)},
                          {"config_hash", config_hash(cfg)},
                          {"toppr_config", eval::config_json(cfg.kde)}};
    report["toppr_config"]["features"] = cfg.features;

    std::optional<cls::Classifier> classifier;
    if (in.classifier) {
        classifier = cls::Classifier::from_checkpoint(load_checkpoint(*in.classifier, "RFCL", 1));
        inputs.push_back({"classifier", *in.classifier});
        report["classifier"] = {{"source", "checkpoint"}};
    } else {
        auto res = train_eval_classifier(cfg, log);
        report["classifier"] = {{"source", "trained"},
                                {"best_epoch", res.best_epoch},
                                {"val_accuracy", res.best_accuracy},
                                {"per_class_frames", cfg.classifier_per_class}};
        classifier = std::move(res.best);
    }

    nlohmann::json rows = nlohmann::json::array();
    rows.push_back(eval::to_json(eval::accuracy_row(*classifier, "real", real)));
    const auto stem = out.parent_path() / out.stem();
    auto export_frames = [&](std::span<const rf::IQFrame> frames, const std::string& tag) {
        auto prefix = stem;
        prefix += "_" + tag;
        for (auto& p : eval::export_constellations(frames, prefix)) side.push_back(p);
    };
    export_frames(real, "real");

    if (in.vqvae) {
        inputs.push_back({"vqvae", *in.vqvae});
        const auto model = vq::Vqvae::from_checkpoint(load_checkpoint(*in.vqvae, "RFVQ", 1));
        const auto rec = vq::reconstruct(model, real, cfg.tokenize_seed, cfg.token_mode());
        rows.push_back(eval::to_json(eval::accuracy_row(*classifier, "reconstructed", rec.frames)));
        double se = 0.0;
        for (std::size_t j = 0; j < real.size(); ++j)
            for (std::size_t k = 0; k < rf::kFrameLen; ++k) {
                const double a = rec.frames[j].i[k] - real[j].i[k], b = rec.frames[j].q[k] - real[j].q[k];
                se += a * a + b * b;
            }
        report["reconstruction_mse"] = se / static_cast<double>(real.size() * rf::kFrameLen);
        export_frames(rec.frames, "reconstructed");
    }

    if (in.fakes) {
        inputs.push_back({"fakes", *in.fakes});
        const auto fakes = rf::load_dataset(*in.fakes);
        rows.push_back(eval::to_json(eval::accuracy_row(*classifier, "fake", fakes)));
        export_frames(fakes, "fake");
        say(log, "topp&r on " + cfg.features + " features");
        const auto fr = features_of(cfg, *classifier, real), ff = features_of(cfg, *classifier, fakes);
        nlohmann::json t = eval::to_json(eval::toppr(fr, ff, cfg.kde));
        nlohmann::json per = nlohmann::json::object();
        for (std::size_t c = 0; c < rf::kNumClasses; ++c) {
            std::vector<rf::IQFrame> rc, fc;
            for (const auto& f : real)
                if (static_cast<std::size_t>(f.label) == c) rc.push_back(f);
            for (const auto& f : fakes)
                if (static_cast<std::size_t>(f.label) == c) fc.push_back(f);
            if (rc.size() < 2 || fc.empty()) continue;
            const auto name = std::string(rf::scheme_name(rf::kAllSchemes[c]));
            try {
                per[name] = eval::to_json(
                    eval::toppr(features_of(cfg, *classifier, rc), features_of(cfg, *classifier, fc), cfg.kde));
            } catch (const DegenerateSetError& e) {
                per[name] = {{"error", e.what()}};
            }
        }
        t["per_class"] = per;
        report["toppr"] = t;
    }
    report["accuracy"] = rows;

    if (in.tokens) {
        inputs.push_back({"tokens", *in.tokens});
        const auto h = tok::codebook_histogram(tok::load_tokens(*in.tokens));
        report["token_usage"] = eval::usage_json(h);
        if (in.fake_tokens) {
            inputs.push_back({"fake_tokens", *in.fake_tokens});
            const auto hf = tok::codebook_histogram(tok::load_tokens(*in.fake_tokens));
            report["fake_token_usage"] = eval::usage_json(hf);
            nlohmann::json tv = nlohmann::json::object();
            for (std::size_t c = 0; c < rf::kNumClasses; ++c)
                if (tok::total(h[c]) && tok::total(hf[c]))
                    tv[std::string(rf::scheme_name(rf::kAllSchemes[c]))] = tok::tv_distance(h[c], hf[c]);
            report["token_tv_distance"] = tv;
            const auto fake_csv = sibling(stem, "_fake_hist.csv");
            write_text(fake_csv, eval::histogram_csv(hf));
            side.push_back(fake_csv);
        }
        const auto real_csv = sibling(stem, "_real_hist.csv");
        write_text(real_csv, eval::histogram_csv(h));
        side.push_back(real_csv);
    }

    write_text(out, report.dump(2) + "\n");
    write_manifest(out, "eval", cfg, cfg.kde.seed, inputs, side);
    for (const auto& r : rows)
        say(log, r.at("dataset").get<std::string>() + " accuracy " + fmt(r.at("accuracy").get<double>()));
    if (report.contains("toppr"))
        say(log, "fidelity " + fmt(report["toppr"]["fidelity"].get<double>()) + " diversity " +
                     fmt(report["toppr"]["diversity"].get<double>()) + " top_f1 " +
                     fmt(report["toppr"]["top_f1"].get<double>()));
    return report;
}

}  // namespace refgen::pipeline
