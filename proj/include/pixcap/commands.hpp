#pragma once

// Command implementations behind the CLI: synthetic dataset generation,
// training (with optional checkpoint-resume for intermediate fine-tuning),
// generation, evaluation, and the loader simulation. All commands are
// deterministic for a fixed (config, seed).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pixcap/checkpoint.hpp"
#include "pixcap/data.hpp"
#include "pixcap/decode.hpp"
#include "pixcap/error.hpp"
#include "pixcap/eval.hpp"
#include "pixcap/model.hpp"
#include "pixcap/synth.hpp"
#include "pixcap/train.hpp"
#include "pixcap/vocab.hpp"

namespace pixcap {

// Merged run configuration; a JSON config file provides defaults and
// command-line flags override individual fields (flags win).
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DecodeParams decode;
    std::string data_dir;
    std::string out_dir = "out";
    std::string init_checkpoint;  // model directory to continue from
    std::string labels_file;
    bool permute_trunks = false;

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
        if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
        if (j.contains("decode")) {
            c.decode.beam = j["decode"].value("beam", c.decode.beam);
            c.decode.length_penalty = j["decode"].value("length_penalty", c.decode.length_penalty);
            c.decode.max_steps = j["decode"].value("max_steps", c.decode.max_steps);
        }
        c.data_dir = j.value("data_dir", c.data_dir);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
        c.labels_file = j.value("labels_file", c.labels_file);
        c.permute_trunks = j.value("permute_trunks", c.permute_trunks);
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read config file " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
        }
        return from_json(j);
    }
};

using ModelF = Captioner<float>;

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthCommand {
    SynthConfig synth;
    std::string out_dir;
    int64_t trunk_size = 64;
};

inline void cmd_synth(const SynthCommand& cmd) {
    cmd.synth.validate();
    if (cmd.out_dir.empty()) throw ConfigError("synth: out_dir is required");
    const auto samples = synth_dataset(cmd.synth);
    const auto labels = synth_labels(cmd.synth);
    const bool emit_labels = cmd.synth.mode == SynthMode::classify;
    write_dataset(cmd.out_dir, samples, cmd.trunk_size, to_string(cmd.synth.mode),
                  emit_labels ? &labels : nullptr);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace detail {

inline void write_loss_csv(const std::string& path, const std::vector<TraceRow>& trace) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "step,loss,lr_encoder,lr_decoder\n";
    f.precision(10);
    for (const auto& r : trace) f << r.step << ',' << r.loss << ',' << r.lr_encoder << ',' << r.lr_decoder << '\n';
}

inline Vocabulary build_dataset_vocab(const std::vector<SyntheticSample>& samples, TokenMode mode) {
    std::vector<std::string> corpus;
    for (const auto& s : samples) {
        corpus.push_back(s.caption);
        if (s.question) corpus.push_back(*s.question);
        if (s.answer) corpus.push_back(*s.answer);
        if (s.label) corpus.push_back(*s.label);
    }
    return Vocabulary::build(corpus, mode);
}

inline int longest_text(const std::vector<SyntheticSample>& samples, const Vocabulary& vocab) {
    int longest = 0;
    for (const auto& s : samples) {
        int n = static_cast<int>(vocab.encode(s.caption).size());
        if (s.question)
            n = static_cast<int>(vocab.encode(*s.question).size() +
                                 vocab.encode(s.answer ? *s.answer : s.caption).size());
        longest = std::max(longest, n);
    }
    return longest;
}

}  // namespace detail

struct TrainOutputs {
    std::string model_dir;
    TrainResult result;
};

// Streams the on-disk dataset through the trunk loader (single node, one
// rank per training loop) and fits the model. Writes model.ckpt,
// model.json, vocab.txt and loss.csv under out_dir.
inline TrainOutputs cmd_train(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.data_dir.empty() || !fs::exists(fs::path(cfg.data_dir) / "manifest.json"))
        throw ConfigError("train: data_dir with a manifest.json is required, got '" + cfg.data_dir + "'");
    if (!cfg.init_checkpoint.empty() && !fs::exists(fs::path(cfg.init_checkpoint) / "model.ckpt"))
        throw ConfigError("train: init_checkpoint has no model.ckpt: " + cfg.init_checkpoint);
    cfg.train.validate();

    const DiskManifest disk = read_dataset_manifest(cfg.data_dir);
    const SynthMode task = synth_mode_from_string(disk.mode);
    const auto all = read_records(cfg.data_dir, disk, 0, disk.total);
    const TokenMode token_mode = task == SynthMode::scene_text ? TokenMode::character : TokenMode::word;
    const Vocabulary vocab = detail::build_dataset_vocab(all, token_mode);

    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    if (mc.image_size == 0 && !all.empty())
        mc.image_size = all[0].frames.empty() ? all[0].image.height : all[0].frames[0].height;
    const int need_len = detail::longest_text(all, vocab) + 1;  // + BOS
    if (mc.max_text_len < need_len) mc.max_text_len = need_len;
    mc.validate();

    ModelF model(mc, cfg.train.seed);
    if (!cfg.init_checkpoint.empty())
        apply_checkpoint(model, load_checkpoint((fs::path(cfg.init_checkpoint) / "model.ckpt").string()));

    const TrunkManifest manifest = TrunkManifest::build({0, disk.total}, disk.trunk_size);
    const std::string dir = cfg.data_dir;
    auto factory = [&, manifest](int epoch) -> std::function<std::optional<TrainSample>()> {
        LoaderOptions opts;
        opts.permute_trunk_order = cfg.permute_trunks;
        opts.epoch = epoch;
        auto streamer = std::shared_ptr<NodeStreamer<SyntheticSample>>(stream_epoch<SyntheticSample>(
            manifest, 1, cfg.train.seed,
            [dir, disk](int64_t, const TrunkRange& r) { return read_records(dir, disk, r.begin, r.end); },
            opts));
        return [streamer]() -> std::optional<TrainSample> {
            auto s = streamer->next(0);
            if (!s) return std::nullopt;
            return s->to_train_sample();
        };
    };

    TrainOutputs out;
    out.result = train(model, vocab, factory, cfg.train);

    fs::create_directories(cfg.out_dir);
    save_checkpoint((fs::path(cfg.out_dir) / "model.ckpt").string(), model.params());
    vocab.save((fs::path(cfg.out_dir) / "vocab.txt").string());
    nlohmann::json mj{{"model", mc.to_json()}, {"task", to_string(task)}};
    std::ofstream mf(fs::path(cfg.out_dir) / "model.json", std::ios::binary);
    if (!mf) throw IoError("cannot write model.json");
    mf << mj.dump(2) << '\n';
    detail::write_loss_csv((fs::path(cfg.out_dir) / "loss.csv").string(), out.result.trace);
    out.model_dir = cfg.out_dir;
    return out;
}

// ---------------------------------------------------------------------------
// generate / eval
// ---------------------------------------------------------------------------

struct ModelBundle {
    ModelConfig config;
    std::string task;
    Vocabulary vocab;
    std::shared_ptr<ModelF> model;
};

inline ModelBundle load_model_bundle(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "model.json", std::ios::binary);
    if (!mf) throw IoError("cannot read model.json in " + dir);
    nlohmann::json j;
    mf >> j;
    ModelBundle b;
    b.config = ModelConfig::from_json(j.at("model"));
    b.task = j.value("task", "caption");
    b.vocab = Vocabulary::load((fs::path(dir) / "vocab.txt").string());
    b.model = std::make_shared<ModelF>(b.config, 0);
    apply_checkpoint(*b.model, load_checkpoint((fs::path(dir) / "model.ckpt").string()));
    return b;
}

struct GenerateCommand {
    std::string model_dir;
    std::string dataset_dir;  // record source
    int64_t index = 0;
    std::optional<std::string> question;
    std::string labels_file;  // non-empty switches on trie-constrained mode
    DecodeParams decode;
};

inline std::string cmd_generate(const GenerateCommand& cmd) {
    if (cmd.model_dir.empty()) throw ConfigError("generate: model_dir is required");
    if (cmd.dataset_dir.empty()) throw ConfigError("generate: dataset is required");
    ModelBundle b = load_model_bundle(cmd.model_dir);
    const DiskManifest disk = read_dataset_manifest(cmd.dataset_dir);
    if (cmd.index < 0 || cmd.index >= disk.total)
        throw InputError("generate: index " + std::to_string(cmd.index) + " outside dataset of " +
                         std::to_string(disk.total));
    const auto recs = read_records(cmd.dataset_dir, disk, cmd.index, cmd.index + 1);
    const auto& rec = recs.at(0);

    autograd::NoGradGuard ng;
    auto feats = rec.frames.empty() ? b.model->encode_image(rec.image) : b.model->encode_video(rec.frames);
    if (!cmd.labels_file.empty()) {
        const auto labels = read_labels_file(cmd.labels_file);
        const auto trie = TokenTrie::build(labels, b.vocab);
        return constrained_decode(*b.model, b.vocab, feats, trie, cmd.decode);
    }
    if (cmd.question) return prefix_generate(*b.model, b.vocab, feats, *cmd.question, cmd.decode);
    auto step = make_step_fn(*b.model, feats);
    DecodeParams eff = cmd.decode;
    eff.max_steps = std::min(eff.max_steps, b.config.max_text_len - 1);
    return b.vocab.decode(decode_ids(step, {Vocabulary::kBos}, eff));
}

struct EvalCommand {
    std::string model_dir;
    std::string dataset_dir;
    EvalMode mode = EvalMode::equal;
    std::string labels_file;
    std::string report_path;  // optional JSON output
    int64_t limit = 0;        // 0 = all
    DecodeParams decode;
};

// Decodes every dataset record and scores it: question records answer via
// prefix generation, voc-prior uses the trie, everything else free-form
// decoding against the caption.
inline EvalReport cmd_eval(const EvalCommand& cmd) {
    if (cmd.model_dir.empty()) throw ConfigError("eval: model_dir is required");
    if (cmd.dataset_dir.empty()) throw ConfigError("eval: dataset is required");
    if (cmd.mode == EvalMode::voc_prior && cmd.labels_file.empty())
        throw ConfigError("eval: voc-prior mode needs --labels-file");
    ModelBundle b = load_model_bundle(cmd.model_dir);
    const DiskManifest disk = read_dataset_manifest(cmd.dataset_dir);
    const int64_t n = cmd.limit > 0 ? std::min(cmd.limit, disk.total) : disk.total;
    const auto recs = read_records(cmd.dataset_dir, disk, 0, n);

    std::vector<std::string> labels;
    std::optional<TokenTrie> trie;
    if (!cmd.labels_file.empty()) {
        labels = read_labels_file(cmd.labels_file);
        trie = TokenTrie::build(labels, b.vocab);
    }

    autograd::NoGradGuard ng;
    std::vector<std::string> preds, gts;
    for (const auto& rec : recs) {
        auto feats = rec.frames.empty() ? b.model->encode_image(rec.image) : b.model->encode_video(rec.frames);
        std::string pred;
        if (cmd.mode == EvalMode::voc_prior) {
            pred = constrained_decode(*b.model, b.vocab, feats, *trie, cmd.decode);
        } else if (rec.question) {
            pred = prefix_generate(*b.model, b.vocab, feats, *rec.question, cmd.decode);
        } else {
            auto step = make_step_fn(*b.model, feats);
            DecodeParams eff = cmd.decode;
            eff.max_steps = std::min(eff.max_steps, b.config.max_text_len - 1);
            pred = b.vocab.decode(decode_ids(step, {Vocabulary::kBos}, eff));
        }
        preds.push_back(std::move(pred));
        gts.push_back(rec.question && rec.answer ? *rec.answer
                                                 : (rec.label ? *rec.label : rec.caption));
    }
    EvalReport rep = evaluate(preds, gts, cmd.mode, labels.empty() ? nullptr : &labels);
    if (!cmd.report_path.empty()) {
        std::ofstream f(cmd.report_path, std::ios::binary);
        if (!f) throw IoError("cannot write report " + cmd.report_path);
        f << rep.to_json().dump(2) << '\n';
    }
    return rep;
}

// ---------------------------------------------------------------------------
// loader-sim
// ---------------------------------------------------------------------------

struct LoaderSimCommand {
    int64_t total = 1000;
    int nodes = 1;
    int ranks = 1;
    int64_t trunk_size = 64;
    uint64_t seed = 0;
    int fetch_latency_us = 0;     // injected per-trunk fetch latency
    int consumer_delay_us = 0;    // injected per-item consumer work
    LoaderLimits limits;
};

struct LoaderSimNodeReport {
    int node_id = 0;
    LoaderStats stats;
    std::vector<std::vector<int64_t>> delivered;  // per rank, in order
};

struct LoaderSimReport {
    std::vector<LoaderSimNodeReport> nodes;
    bool exactly_once = false;
    int prefetch_high_water = 0;
    int resident_high_water = 0;
    int64_t total_stall_ns = 0;
};

// Runs the full topology in-process: per node a streamer plus one thread
// per rank, with injectable fetch latency and consumer delay. Verifies
// exactly-once delivery across the whole grid.
inline LoaderSimReport cmd_loader_sim(const LoaderSimCommand& cmd) {
    if (cmd.nodes < 1 || cmd.ranks < 1) throw ConfigError("loader-sim: nodes and ranks must be >= 1");
    LoaderSimReport report;
    const auto shards = shard_pairs(cmd.total, cmd.nodes);
    for (int node = 0; node < cmd.nodes; ++node) {
        const TrunkManifest manifest = TrunkManifest::build(shards[static_cast<size_t>(node)], cmd.trunk_size, node);
        LoaderSimNodeReport nr;
        nr.node_id = node;
        nr.delivered.assign(static_cast<size_t>(cmd.ranks), {});
        if (manifest.trunks.empty()) {
            report.nodes.push_back(std::move(nr));
            continue;
        }
        const int latency = cmd.fetch_latency_us;
        auto fetch = [latency](int64_t, const TrunkRange& r) {
            if (latency > 0) std::this_thread::sleep_for(std::chrono::microseconds(latency));
            std::vector<int64_t> items(static_cast<size_t>(r.count()));
            for (int64_t i = 0; i < r.count(); ++i) items[static_cast<size_t>(i)] = r.begin + i;
            return items;
        };
        LoaderOptions opts;
        opts.limits = cmd.limits;
        auto streamer = stream_epoch<int64_t>(manifest, cmd.ranks, cmd.seed, fetch, opts);
        std::vector<std::thread> consumers;
        for (int r = 0; r < cmd.ranks; ++r)
            consumers.emplace_back([&, r] {
                std::mt19937_64 rng(detail::mix_seed(cmd.seed, static_cast<uint64_t>(node * 131 + r)));
                while (auto item = streamer->next(r)) {
                    nr.delivered[static_cast<size_t>(r)].push_back(*item);
                    if (cmd.consumer_delay_us > 0)
                        std::this_thread::sleep_for(std::chrono::microseconds(rng() % cmd.consumer_delay_us));
                }
            });
        for (auto& t : consumers) t.join();
        nr.stats = streamer->stats();
        report.nodes.push_back(std::move(nr));
    }

    std::vector<uint8_t> seen(static_cast<size_t>(cmd.total), 0);
    bool dup = false;
    int64_t count = 0;
    for (const auto& nr : report.nodes) {
        report.prefetch_high_water = std::max(report.prefetch_high_water, nr.stats.prefetch_high_water);
        report.resident_high_water = std::max(report.resident_high_water, nr.stats.resident_high_water);
        for (int64_t ns : nr.stats.rank_stall_ns) report.total_stall_ns += ns;
        for (const auto& rank_items : nr.delivered)
            for (int64_t i : rank_items) {
                if (i < 0 || i >= cmd.total || seen[static_cast<size_t>(i)]) dup = true;
                else seen[static_cast<size_t>(i)] = 1, ++count;
            }
    }
    report.exactly_once = !dup && count == cmd.total;
    return report;
}

inline void print_loader_sim_report(const LoaderSimReport& r, std::ostream& os) {
    os << "exactly-once          " << (r.exactly_once ? "pass" : "FAIL") << "\n"
       << "prefetch high-water   " << r.prefetch_high_water << "\n"
       << "resident high-water   " << r.resident_high_water << "\n"
       << "total consumer stall  " << r.total_stall_ns / 1000 << " us\n";
    for (const auto& n : r.nodes) {
        os << "node " << n.node_id << " fetches " << n.stats.fetch_count << " stalls_us";
        for (auto s : n.stats.rank_stall_ns) os << ' ' << s / 1000;
        os << "\n";
    }
}

}  // namespace pixcap
