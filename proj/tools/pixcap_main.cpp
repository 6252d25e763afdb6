// pixcap command-line tool: synthetic data generation, training,
// generation, evaluation, and data-loader simulation.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pixcap/commands.hpp"

namespace {

int exit_code_for(pixcap::ErrorCategory cat) {
    using EC = pixcap::ErrorCategory;
    switch (cat) {
        case EC::config: return 2;
        case EC::input: return 3;
        case EC::shape:
        case EC::param:
        case EC::contract: return 4;
        case EC::io: return 5;
        case EC::numeric: return 6;
    }
    return 1;
}

pixcap::RunConfig load_run_config(const std::string& config_path) {
    if (config_path.empty()) return {};
    return pixcap::RunConfig::from_file(config_path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixcap: a desk-scale image-to-text transformer"};
    app.require_subcommand(1);

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    pixcap::SynthCommand synth_cmd;
    std::string synth_mode = "caption";
    synth->add_option("--mode", synth_mode, "caption|vqa|video|classify|scene-text");
    synth->add_option("--n", synth_cmd.synth.n, "number of samples")->required();
    synth->add_option("--seed", synth_cmd.synth.seed, "generator seed");
    synth->add_option("--grid", synth_cmd.synth.grid, "cells per side");
    synth->add_option("--cell-px", synth_cmd.synth.cell_px, "pixels per cell");
    synth->add_option("--palette", synth_cmd.synth.palette, "colors in play");
    synth->add_option("--frames", synth_cmd.synth.frames, "frames per video sample");
    synth->add_option("--text-len", synth_cmd.synth.text_len, "scene-text string length");
    synth->add_option("--trunk-size", synth_cmd.trunk_size, "records per trunk file");
    synth->add_option("--out-dir", synth_cmd.out_dir, "dataset directory")->required();

    // --- train ---
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    std::string train_config_path;
    pixcap::RunConfig train_overrides;
    std::optional<int> ov_total_iters, ov_batch, ov_warmup, ov_decoder_layers, ov_encoder_layers, ov_dmodel,
        ov_heads, ov_patch;
    std::optional<double> ov_lr, ov_lr_mult, ov_smoothing, ov_wd;
    std::optional<uint64_t> ov_seed;
    std::optional<std::string> ov_decoder_style;
    train->add_option("--config", train_config_path, "JSON run config (flags override)");
    train->add_option("--data-dir", train_overrides.data_dir, "dataset directory");
    train->add_option("--out-dir", train_overrides.out_dir, "output directory");
    train->add_option("--init-checkpoint", train_overrides.init_checkpoint,
                      "model directory to continue from (intermediate fine-tuning)");
    train->add_option("--total-iters", ov_total_iters);
    train->add_option("--batch-size", ov_batch);
    train->add_option("--warmup-iters", ov_warmup);
    train->add_option("--peak-lr", ov_lr, "encoder peak learning rate");
    train->add_option("--lr-decoder-multiplier", ov_lr_mult);
    train->add_option("--label-smoothing", ov_smoothing);
    train->add_option("--weight-decay", ov_wd);
    train->add_option("--seed", ov_seed);
    train->add_option("--d-model", ov_dmodel);
    train->add_option("--heads", ov_heads);
    train->add_option("--patch-size", ov_patch);
    train->add_option("--encoder-layers", ov_encoder_layers);
    train->add_option("--decoder-layers", ov_decoder_layers);
    train->add_option("--decoder-style", ov_decoder_style, "self_attention|cross_attention");
    train->add_flag("--permute-trunks", train_overrides.permute_trunks,
                    "reshuffle trunk visit order per epoch");

    // --- generate ---
    auto* gen = app.add_subcommand("generate", "decode text for a dataset record");
    pixcap::GenerateCommand gen_cmd;
    std::string gen_question;
    bool gen_greedy = false;
    gen->add_option("--model-dir", gen_cmd.model_dir)->required();
    gen->add_option("--dataset", gen_cmd.dataset_dir)->required();
    gen->add_option("--index", gen_cmd.index, "record index");
    gen->add_option("--question", gen_question, "prefix-condition on a question");
    gen->add_option("--labels-file", gen_cmd.labels_file, "trie-constrained decoding over these labels");
    gen->add_option("--beam", gen_cmd.decode.beam);
    gen->add_option("--length-penalty", gen_cmd.decode.length_penalty);
    gen->add_option("--max-steps", gen_cmd.decode.max_steps);
    gen->add_flag("--greedy", gen_greedy, "greedy decoding (beam 1, penalty 0)");

    // --- eval ---
    auto* ev = app.add_subcommand("eval", "decode a dataset and score it");
    pixcap::EvalCommand eval_cmd;
    std::string eval_mode = "equal";
    ev->add_option("--model-dir", eval_cmd.model_dir)->required();
    ev->add_option("--dataset", eval_cmd.dataset_dir)->required();
    ev->add_option("--mode", eval_mode, "equal|in|voc-prior|scene-text");
    ev->add_option("--labels-file", eval_cmd.labels_file);
    ev->add_option("--limit", eval_cmd.limit, "evaluate only the first N records");
    ev->add_option("--out", eval_cmd.report_path, "write the JSON report here");
    ev->add_option("--beam", eval_cmd.decode.beam);
    ev->add_option("--length-penalty", eval_cmd.decode.length_penalty);
    ev->add_option("--max-steps", eval_cmd.decode.max_steps);

    // --- loader-sim ---
    auto* sim = app.add_subcommand("loader-sim", "simulate the sharded streaming loader");
    pixcap::LoaderSimCommand sim_cmd;
    sim->add_option("--total", sim_cmd.total, "total items");
    sim->add_option("--nodes", sim_cmd.nodes);
    sim->add_option("--ranks", sim_cmd.ranks, "consumers per node");
    sim->add_option("--trunk-size", sim_cmd.trunk_size);
    sim->add_option("--seed", sim_cmd.seed);
    sim->add_option("--fetch-latency-us", sim_cmd.fetch_latency_us);
    sim->add_option("--consumer-delay-us", sim_cmd.consumer_delay_us);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            synth_cmd.synth.mode = pixcap::synth_mode_from_string(synth_mode);
            pixcap::cmd_synth(synth_cmd);
            std::cout << "wrote " << synth_cmd.synth.n << " " << synth_mode << " records to "
                      << synth_cmd.out_dir << "\n";
        } else if (*train) {
            pixcap::RunConfig cfg = load_run_config(train_config_path);
            if (!train_overrides.data_dir.empty()) cfg.data_dir = train_overrides.data_dir;
            if (!train_overrides.out_dir.empty() && train_overrides.out_dir != "out")
                cfg.out_dir = train_overrides.out_dir;
            if (!train_overrides.init_checkpoint.empty()) cfg.init_checkpoint = train_overrides.init_checkpoint;
            if (train_overrides.permute_trunks) cfg.permute_trunks = true;
            if (ov_total_iters) cfg.train.total_iters = *ov_total_iters;
            if (ov_batch) cfg.train.batch_size = *ov_batch;
            if (ov_warmup) cfg.train.warmup_iters = *ov_warmup;
            if (ov_lr) cfg.train.peak_lr_encoder = *ov_lr;
            if (ov_lr_mult) cfg.train.lr_decoder_multiplier = *ov_lr_mult;
            if (ov_smoothing) cfg.train.label_smoothing = *ov_smoothing;
            if (ov_wd) cfg.train.weight_decay = *ov_wd;
            if (ov_seed) cfg.train.seed = *ov_seed;
            if (ov_dmodel) cfg.model.d_model = *ov_dmodel;
            if (ov_heads) cfg.model.heads = *ov_heads;
            if (ov_patch) cfg.model.patch_size = *ov_patch;
            if (ov_encoder_layers) cfg.model.encoder_layers = *ov_encoder_layers;
            if (ov_decoder_layers) cfg.model.decoder_layers = *ov_decoder_layers;
            if (ov_decoder_style) cfg.model.decoder_style = pixcap::decoder_style_from_string(*ov_decoder_style);
            auto out = pixcap::cmd_train(cfg);
            std::cout << "trained " << cfg.train.total_iters << " iters, final loss " << out.result.final_loss
                      << ", model in " << out.model_dir << "\n";
        } else if (*gen) {
            if (!gen_question.empty()) gen_cmd.question = gen_question;
            if (gen_greedy) {
                gen_cmd.decode.beam = 1;
                gen_cmd.decode.length_penalty = 0;
            }
            std::cout << pixcap::cmd_generate(gen_cmd) << "\n";
        } else if (*ev) {
            eval_cmd.mode = pixcap::eval_mode_from_string(eval_mode);
            auto rep = pixcap::cmd_eval(eval_cmd);
            rep.print_summary(std::cout);
        } else if (*sim) {
            auto rep = pixcap::cmd_loader_sim(sim_cmd);
            pixcap::print_loader_sim_report(rep, std::cout);
            if (!rep.exactly_once) return 4;
        }
    } catch (const pixcap::Error& e) {
        std::cerr << "pixcap: error: [" << pixcap::to_string(e.category()) << "] " << e.what() << "\n";
        return exit_code_for(e.category());
    } catch (const std::exception& e) {
        std::cerr << "pixcap: error: [internal] " << e.what() << "\n";
        return 1;
    }
    return 0;
}
