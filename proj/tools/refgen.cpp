// refgen command line: data | train-vqvae | tokenize | train-dot | gen | eval,
// plus train-classifier, reconstruct, verify and print-config.
//
// Exit codes: 0 ok, 2 validation (bad flags, bad config, missing input),
// 3 integrity (corrupt artifact, manifest mismatch), 4 divergence, 1 anything else.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "refgen/config.hpp"
#include "refgen/error.hpp"
#include "refgen/pipeline.hpp"

using namespace refgen;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool verify = false;
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
    sub->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "seed for this command's random stage");
    auto* o = sub->add_option("--out", c.out, "output artifact path");
    if (needs_out) o->required();
    sub->add_flag("--verify", c.verify, "re-check the manifest chain of every input first");
}

RunConfig base_config(const Common& c) { return c.config.empty() ? RunConfig{} : load_config(c.config); }

void verify_inputs(const Common& c, const std::vector<std::string>& inputs) {
    if (!c.verify) return;
    for (const auto& in : inputs)
        if (!in.empty()) pipeline::verify(in);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic RF frames: VQ-VAE tokenization and a decoder-only transformer"};
    app.require_subcommand(1);

    // data
    Common data_c;
    std::optional<std::size_t> per_class;
    std::optional<double> snr_db;
    auto* data = app.add_subcommand("data", "synthesize a labelled IQ dataset");
    add_common(data, data_c);
    data->add_option("--per-class", per_class, "frames per modulation class");
    data->add_option("--snr-db", snr_db, "add white Gaussian noise at this SNR");

    // train-vqvae
    Common vq_c;
    std::string vq_data;
    std::optional<std::size_t> vq_epochs, vq_batch;
    std::optional<float> vq_lr, vq_beta;
    auto* tvq = app.add_subcommand("train-vqvae", "train the VQ-VAE tokenizer");
    add_common(tvq, vq_c);
    tvq->add_option("--data", vq_data, "dataset file")->required();
    tvq->add_option("--epochs", vq_epochs);
    tvq->add_option("--batch", vq_batch);
    tvq->add_option("--lr", vq_lr);
    tvq->add_option("--beta", vq_beta, "commitment weight");

    // tokenize
    Common tk_c;
    std::string tk_vqvae, tk_data;
    auto* tk = app.add_subcommand("tokenize", "quantize a dataset into token sequences");
    add_common(tk, tk_c);
    tk->add_option("--vqvae", tk_vqvae, "VQ-VAE checkpoint")->required();
    tk->add_option("--data", tk_data, "dataset file")->required();

    // train-dot
    Common dt_c;
    std::string dt_tokens;
    std::optional<std::string> dt_model;
    std::optional<std::size_t> dt_epochs, dt_batch;
    std::optional<float> dt_lr;
    auto* tdt = app.add_subcommand("train-dot", "train the decoder-only transformer on token sequences");
    add_common(tdt, dt_c);
    tdt->add_option("--tokens", dt_tokens, "token file")->required();
    tdt->add_option("--model", dt_model, "nano or large")->check(CLI::IsMember({"nano", "large"}));
    tdt->add_option("--epochs", dt_epochs);
    tdt->add_option("--batch", dt_batch);
    tdt->add_option("--lr", dt_lr);

    // gen
    Common gn_c;
    std::string gn_dot, gn_vqvae;
    std::size_t gn_count = 300;
    std::optional<float> gn_temp;
    auto* gen = app.add_subcommand("gen", "generate class-conditioned fake frames");
    add_common(gen, gn_c);
    gen->add_option("--dot", gn_dot, "transformer checkpoint")->required();
    gen->add_option("--vqvae", gn_vqvae, "VQ-VAE checkpoint")->required();
    gen->add_option("--count", gn_count, "total fakes, split evenly over the six classes")->capture_default_str();
    gen->add_option("--temperature", gn_temp, "sampling temperature (0: greedy)");

    // eval
    Common ev_c;
    std::string ev_data, ev_fakes, ev_vqvae, ev_cls, ev_tokens, ev_fake_tokens;
    std::optional<std::string> ev_features;
    auto* ev = app.add_subcommand("eval", "classifier accuracy, TopP&R and token statistics");
    add_common(ev, ev_c);
    ev->add_option("--data", ev_data, "real test dataset")->required();
    ev->add_option("--fakes", ev_fakes, "generated frames");
    ev->add_option("--vqvae", ev_vqvae, "VQ-VAE checkpoint (adds reconstructed rows)");
    ev->add_option("--classifier", ev_cls, "classifier checkpoint (trained on fresh frames when omitted)");
    ev->add_option("--tokens", ev_tokens, "real token file");
    ev->add_option("--fake-tokens", ev_fake_tokens, "generated token file");
    ev->add_option("--features", ev_features, "TopP&R feature space")->check(CLI::IsMember({"classifier", "raw"}));

    // train-classifier
    Common cl_c;
    std::optional<std::size_t> cl_epochs;
    auto* tcl = app.add_subcommand("train-classifier", "train the evaluation classifier on fresh frames");
    add_common(tcl, cl_c);
    tcl->add_option("--epochs", cl_epochs);

    // reconstruct
    Common rc_c;
    std::string rc_vqvae, rc_data;
    auto* rc = app.add_subcommand("reconstruct", "encode and decode a dataset through the VQ-VAE");
    add_common(rc, rc_c);
    rc->add_option("--vqvae", rc_vqvae, "VQ-VAE checkpoint")->required();
    rc->add_option("--data", rc_data, "dataset file")->required();

    // verify
    std::vector<std::string> vf_paths;
    auto* vf = app.add_subcommand("verify", "re-check artifact hashes along the manifest chain");
    vf->add_option("artifacts", vf_paths, "artifact paths")->required();

    // print-config
    Common pc_c;
    auto* pc = app.add_subcommand("print-config", "print the effective configuration as JSON");
    add_common(pc, pc_c, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (data->parsed()) {
            auto cfg = base_config(data_c);
            if (per_class) cfg.data.per_class = *per_class;
            if (snr_db) cfg.data.snr_db = *snr_db;
            if (data_c.seed) cfg.data.seed = *data_c.seed;
            validate(cfg);
            pipeline::cmd_data(cfg, data_c.out, log_line);
        } else if (tvq->parsed()) {
            auto cfg = base_config(vq_c);
            if (vq_epochs) cfg.vqvae_train.epochs = *vq_epochs;
            if (vq_batch) cfg.vqvae_train.batch = *vq_batch;
            if (vq_lr) cfg.vqvae_train.lr = *vq_lr;
            if (vq_beta) cfg.vqvae.beta = *vq_beta;
            if (vq_c.seed) cfg.vqvae_train.seed = *vq_c.seed;
            validate(cfg);
            verify_inputs(vq_c, {vq_data});
            pipeline::cmd_train_vqvae(cfg, vq_data, vq_c.out, log_line);
        } else if (tk->parsed()) {
            auto cfg = base_config(tk_c);
            if (tk_c.seed) cfg.tokenize_seed = *tk_c.seed;
            validate(cfg);
            verify_inputs(tk_c, {tk_vqvae, tk_data});
            pipeline::cmd_tokenize(cfg, tk_vqvae, tk_data, tk_c.out, log_line);
        } else if (tdt->parsed()) {
            auto cfg = base_config(dt_c);
            if (dt_model) cfg.dot_name = *dt_model;
            if (dt_epochs) cfg.dot_train.epochs = *dt_epochs;
            if (dt_batch) cfg.dot_train.batch = *dt_batch;
            if (dt_lr) cfg.dot_train.lr = *dt_lr;
            if (dt_c.seed) cfg.dot_train.seed = *dt_c.seed;
            validate(cfg);
            verify_inputs(dt_c, {dt_tokens});
            pipeline::cmd_train_dot(cfg, dt_tokens, dt_c.out, log_line);
        } else if (gen->parsed()) {
            auto cfg = base_config(gn_c);
            if (gn_temp) cfg.temperature = *gn_temp;
            if (gn_c.seed) cfg.gen_seed = *gn_c.seed;
            validate(cfg);
            verify_inputs(gn_c, {gn_dot, gn_vqvae});
            pipeline::cmd_gen(cfg, gn_dot, gn_vqvae, gn_count, gn_c.out, log_line);
        } else if (ev->parsed()) {
            auto cfg = base_config(ev_c);
            if (ev_features) cfg.features = *ev_features;
            if (ev_c.seed) cfg.kde.seed = *ev_c.seed;
            validate(cfg);
            verify_inputs(ev_c, {ev_data, ev_fakes, ev_vqvae, ev_cls, ev_tokens, ev_fake_tokens});
            pipeline::EvalInputs in;
            in.data = ev_data;
            auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
            in.fakes = opt(ev_fakes);
            in.vqvae = opt(ev_vqvae);
            in.classifier = opt(ev_cls);
            in.tokens = opt(ev_tokens);
            in.fake_tokens = opt(ev_fake_tokens);
            pipeline::cmd_eval(cfg, in, ev_c.out, log_line);
        } else if (tcl->parsed()) {
            auto cfg = base_config(cl_c);
            if (cl_epochs) cfg.classifier_train.epochs = *cl_epochs;
            if (cl_c.seed) cfg.classifier_train.seed = *cl_c.seed;
            validate(cfg);
            pipeline::cmd_train_classifier(cfg, cl_c.out, log_line);
        } else if (rc->parsed()) {
            auto cfg = base_config(rc_c);
            if (rc_c.seed) cfg.tokenize_seed = *rc_c.seed;
            validate(cfg);
            verify_inputs(rc_c, {rc_vqvae, rc_data});
            pipeline::cmd_reconstruct(cfg, rc_vqvae, rc_data, rc_c.out, log_line);
        } else if (vf->parsed()) {
            for (const auto& p : vf_paths)
                for (const auto& a : pipeline::verify(p)) std::cout << "ok " << a.string() << '\n';
        } else if (pc->parsed()) {
            const auto cfg = base_config(pc_c);
            const auto text = to_json(cfg).dump(2) + "\n";
            if (pc_c.out.empty())
                std::cout << text;
            else
                write_text(pc_c.out, text);
        }
    } catch (const DivergenceError& e) {
        std::cerr << "error: numerical divergence: " << e.what() << '\n';
        return 4;
    } catch (const IntegrityError& e) {
        std::cerr << "error: integrity: " << e.what() << '\n';
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
