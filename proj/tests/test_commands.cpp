#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pixcap/checkpoint.hpp"
#include "pixcap/commands.hpp"

using namespace pixcap;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("pixcap_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& leaf) const { return (path / leaf).string(); }
};

RunConfig quick_train_config(const std::string& data_dir, const std::string& out_dir, int iters = 30) {
    RunConfig cfg;
    cfg.data_dir = data_dir;
    cfg.out_dir = out_dir;
    cfg.model.d_model = 32;
    cfg.model.heads = 4;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.patch_size = 4;
    cfg.model.image_size = 0;  // derive from the data
    cfg.train.total_iters = iters;
    cfg.train.warmup_iters = iters / 4;
    cfg.train.batch_size = 8;
    cfg.train.peak_lr_encoder = 5e-4;
    cfg.train.log_every = 10;
    cfg.train.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trips parameters bit-exactly") {
    TempDir tmp("ckpt");
    ModelConfig mc;
    mc.d_model = 16;
    mc.heads = 2;
    mc.encoder_layers = 1;
    mc.decoder_layers = 1;
    mc.patch_size = 4;
    mc.image_size = 8;
    mc.vocab_size = 9;
    mc.max_text_len = 6;
    Captioner<float> a(mc, 3);
    const std::string path = tmp.sub("model.ckpt");
    save_checkpoint(path, a.params());

    Captioner<float> b(mc, 99);  // different init
    apply_checkpoint(b, load_checkpoint(path));
    for (size_t i = 0; i < a.params().size(); ++i)
        CHECK(a.params()[i].tensor.data() == b.params()[i].tensor.data());

    // shape mismatch rejected
    ModelConfig other = mc;
    other.vocab_size = 11;
    Captioner<float> c(other, 0);
    CHECK_THROWS_AS(apply_checkpoint(c, load_checkpoint(path)), Error);
}

TEST_CASE("cmd_synth writes deterministic datasets and labels") {
    TempDir tmp("synth");
    SynthCommand cmd;
    cmd.synth.mode = SynthMode::classify;
    cmd.synth.n = 30;
    cmd.synth.seed = 5;
    cmd.synth.palette = 6;
    cmd.trunk_size = 16;
    cmd.out_dir = tmp.sub("a");
    cmd_synth(cmd);
    cmd.out_dir = tmp.sub("b");
    cmd_synth(cmd);

    CHECK(fs::exists(fs::path(tmp.sub("a")) / "labels.txt"));
    const auto ma = read_dataset_manifest(tmp.sub("a"));
    CHECK(ma.total == 30);
    const auto ra = read_records(tmp.sub("a"), ma, 0, 30);
    const auto rb = read_records(tmp.sub("b"), read_dataset_manifest(tmp.sub("b")), 0, 30);
    for (size_t i = 0; i < 30; ++i) {
        CHECK(ra[i].caption == rb[i].caption);
        CHECK(ra[i].image.pixels == rb[i].image.pixels);
    }

    // video records carry frame lists
    SynthCommand vid;
    vid.synth.mode = SynthMode::video;
    vid.synth.n = 4;
    vid.out_dir = tmp.sub("v");
    cmd_synth(vid);
    const auto rv = read_records(tmp.sub("v"), read_dataset_manifest(tmp.sub("v")), 0, 4);
    for (const auto& r : rv) CHECK(r.frames.size() == 3);
}

TEST_CASE("cmd_train produces a loadable model bundle") {
    TempDir tmp("train");
    SynthCommand synth;
    synth.synth.mode = SynthMode::caption;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 32;
    synth.synth.seed = 1;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto cfg = quick_train_config(tmp.sub("data"), tmp.sub("model"));
    const auto out = cmd_train(cfg);
    CHECK(fs::exists(fs::path(out.model_dir) / "model.ckpt"));
    CHECK(fs::exists(fs::path(out.model_dir) / "model.json"));
    CHECK(fs::exists(fs::path(out.model_dir) / "vocab.txt"));
    CHECK(fs::exists(fs::path(out.model_dir) / "loss.csv"));

    // loss csv has header + log rows
    std::ifstream csv(fs::path(out.model_dir) / "loss.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,loss,lr_encoder,lr_decoder");
    int rows = 0;
    for (std::string line; std::getline(csv, line);) rows += line.empty() ? 0 : 1;
    CHECK(rows == static_cast<int>(out.result.trace.size()));

    auto bundle = load_model_bundle(out.model_dir);
    CHECK(bundle.task == "caption");
    CHECK(bundle.config.vocab_size == bundle.vocab.size());

    // resume: the loaded model reproduces the trained model's outputs
    const auto manifest = read_dataset_manifest(tmp.sub("data"));
    const auto recs = read_records(tmp.sub("data"), manifest, 0, 1);
    autograd::NoGradGuard ng;
    auto feats = bundle.model->encode_image(recs[0].image);
    auto logits = bundle.model->forward(feats, {Vocabulary::kBos});
    CHECK(logits.dim(1) == bundle.vocab.size());
}

TEST_CASE("training determinism carries through the full command") {
    TempDir tmp("train_det");
    SynthCommand synth;
    synth.synth.mode = SynthMode::caption;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 24;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto r1 = cmd_train(quick_train_config(tmp.sub("data"), tmp.sub("m1"), 12));
    auto r2 = cmd_train(quick_train_config(tmp.sub("data"), tmp.sub("m2"), 12));
    REQUIRE(r1.result.trace.size() == r2.result.trace.size());
    for (size_t i = 0; i < r1.result.trace.size(); ++i)
        CHECK(r1.result.trace[i].loss == r2.result.trace[i].loss);

    const auto c1 = load_checkpoint(tmp.sub("m1") + "/model.ckpt");
    const auto c2 = load_checkpoint(tmp.sub("m2") + "/model.ckpt");
    REQUIRE(c1.size() == c2.size());
    for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].payload == c2[i].payload);
}

TEST_CASE("intermediate fine-tuning resumes from a checkpoint") {
    TempDir tmp("resume");
    SynthCommand synth;
    synth.synth.mode = SynthMode::caption;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 24;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto first = cmd_train(quick_train_config(tmp.sub("data"), tmp.sub("stage1"), 10));
    auto cfg = quick_train_config(tmp.sub("data"), tmp.sub("stage2"), 10);
    cfg.init_checkpoint = tmp.sub("stage1");
    auto second = cmd_train(cfg);
    // fine-tuning from a fitted checkpoint starts lower than from scratch
    CHECK(second.result.trace.front().loss < first.result.trace.front().loss);
}

TEST_CASE("decoder depth knob builds and trains") {
    TempDir tmp("deep");
    SynthCommand synth;
    synth.synth.mode = SynthMode::caption;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 8;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto cfg = quick_train_config(tmp.sub("data"), tmp.sub("model"), 2);
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.decoder_layers = 24;
    cfg.train.batch_size = 2;
    const auto out = cmd_train(cfg);
    CHECK(fs::exists(fs::path(out.model_dir) / "model.ckpt"));
}

TEST_CASE("generate honors decoding flags and trie labels") {
    TempDir tmp("gen");
    SynthCommand synth;
    synth.synth.mode = SynthMode::classify;
    synth.synth.palette = 4;
    synth.synth.n = 48;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto cfg = quick_train_config(tmp.sub("data"), tmp.sub("model"), 40);
    cmd_train(cfg);

    GenerateCommand gen;
    gen.model_dir = tmp.sub("model");
    gen.dataset_dir = tmp.sub("data");
    gen.index = 3;

    // beam 1 with zero penalty equals greedy
    gen.decode.beam = 1;
    gen.decode.length_penalty = 0;
    const auto greedy_out = cmd_generate(gen);
    gen.decode.beam = 4;
    gen.decode.length_penalty = 0.6;
    const auto beam_out = cmd_generate(gen);
    CHECK_FALSE(greedy_out.empty());

    // trie mode stays in the label set
    gen.labels_file = tmp.sub("data") + "/labels.txt";
    const auto constrained = cmd_generate(gen);
    const auto labels = read_labels_file(gen.labels_file);
    CHECK(std::find(labels.begin(), labels.end(), constrained) != labels.end());

    GenerateCommand bad = gen;
    bad.index = 99;
    CHECK_THROWS_AS(cmd_generate(bad), InputError);
}

TEST_CASE("vqa generation answers without echoing the question") {
    TempDir tmp("vqa_gen");
    SynthCommand synth;
    synth.synth.mode = SynthMode::vqa;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 60;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);

    auto cfg = quick_train_config(tmp.sub("data"), tmp.sub("model"), 60);
    cmd_train(cfg);

    GenerateCommand gen;
    gen.model_dir = tmp.sub("model");
    gen.dataset_dir = tmp.sub("data");
    gen.index = 0;
    gen.question = "cell 0 1";
    const auto answer = cmd_generate(gen);
    CHECK(answer.find("cell") == std::string::npos);
    // same question, same image, deterministic result
    CHECK(cmd_generate(gen) == answer);
}

TEST_CASE("cmd_eval writes a report") {
    TempDir tmp("eval");
    SynthCommand synth;
    synth.synth.mode = SynthMode::caption;
    synth.synth.grid = 2;
    synth.synth.palette = 3;
    synth.synth.n = 16;
    synth.out_dir = tmp.sub("data");
    cmd_synth(synth);
    cmd_train(quick_train_config(tmp.sub("data"), tmp.sub("model"), 20));

    EvalCommand ev;
    ev.model_dir = tmp.sub("model");
    ev.dataset_dir = tmp.sub("data");
    ev.limit = 8;
    ev.report_path = tmp.sub("report.json");
    const auto rep = cmd_eval(ev);
    CHECK(rep.n == 8);
    CHECK(rep.in_acc >= rep.equal_acc);
    CHECK(fs::exists(ev.report_path));

    EvalCommand bad = ev;
    bad.mode = EvalMode::voc_prior;
    CHECK_THROWS_AS(cmd_eval(bad), ConfigError);  // labels file missing
}

TEST_CASE("run config validation fails before compute") {
    RunConfig cfg;
    cfg.data_dir = "does_not_exist_anywhere";
    CHECK_THROWS_AS(cmd_train(cfg), ConfigError);

    TempDir tmp("cfgfile");
    {
        std::ofstream bad(tmp.sub("bad.json"));
        bad << "{ not json";
    }
    CHECK_THROWS_AS(RunConfig::from_file(tmp.sub("bad.json")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_file(tmp.sub("missing.json")), IoError);

    {
        std::ofstream good(tmp.sub("good.json"));
        good << R"({"train": {"total_iters": 77}, "decode": {"beam": 2}, "data_dir": "d"})";
    }
    const auto loaded = RunConfig::from_file(tmp.sub("good.json"));
    CHECK(loaded.train.total_iters == 77);
    CHECK(loaded.decode.beam == 2);
    CHECK(loaded.data_dir == "d");
}

TEST_CASE("loader sim verifies its own contract") {
    LoaderSimCommand cmd;
    cmd.total = 200;
    cmd.nodes = 2;
    cmd.ranks = 2;
    cmd.trunk_size = 16;
    cmd.fetch_latency_us = 30;
    cmd.consumer_delay_us = 5;
    const auto rep = cmd_loader_sim(cmd);
    CHECK(rep.exactly_once);
    CHECK(rep.prefetch_high_water <= 7);
    CHECK(rep.resident_high_water <= 12);

    // zero latency with a primed window: no consumer stalls
    LoaderSimCommand zero;
    zero.total = 64;
    zero.trunk_size = 8;  // 8 trunks, fully primed
    const auto zrep = cmd_loader_sim(zero);
    CHECK(zrep.exactly_once);
    CHECK(zrep.total_stall_ns == 0);
}
