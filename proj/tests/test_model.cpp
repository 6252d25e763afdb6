#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pixcap/model.hpp"

using namespace pixcap;

namespace {

ModelConfig tiny_config(DecoderStyle style = DecoderStyle::self_attention) {
    ModelConfig c;
    c.d_model = 16;
    c.heads = 2;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.patch_size = 4;
    c.image_size = 8;
    c.vocab_size = 11;
    c.max_text_len = 8;
    c.max_frames = 4;
    c.decoder_style = style;
    return c;
}

ImageGrid random_image(int side, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.f, 1.f);
    ImageGrid img{side, side, std::vector<float>(static_cast<size_t>(side) * side)};
    for (auto& p : img.pixels) p = d(rng);
    return img;
}

std::vector<int> random_text(int n, int vocab, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> ids{Vocabulary::kBos};
    for (int i = 1; i < n; ++i) ids.push_back(Vocabulary::kReserved + static_cast<int>(rng() % (vocab - 4)));
    return ids;
}

}  // namespace

TEST_CASE("seq2seq mask examples") {
    auto m = build_seq2seq_mask(2, 3);
    const std::vector<std::string> want = {"11000", "11000", "11100", "11110", "11111"};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            CHECK(m.at(i, j) == (want[static_cast<size_t>(i)][static_cast<size_t>(j)] == '1'));

    auto lm = build_seq2seq_mask(0, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(lm.at(i, j) == (j <= i));

    auto img_only = build_seq2seq_mask(2, 0);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(img_only.at(i, j));
}

TEST_CASE("seq2seq mask equals brute-force rule for all small sizes") {
    for (int n_img = 0; n_img <= 4; ++n_img)
        for (int n_txt = 0; n_txt <= 4; ++n_txt) {
            auto m = build_seq2seq_mask(n_img, n_txt);
            const int n = n_img + n_txt;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    bool want;
                    if (i < n_img)
                        want = j < n_img;  // image rows: exactly the image columns
                    else
                        want = j < n_img || j <= i;  // text: all image + preceding text
                    INFO("n_img=" << n_img << " n_txt=" << n_txt << " i=" << i << " j=" << j);
                    CHECK(m.at(i, j) == want);
                }
        }
}

TEST_CASE("encode_image token count and determinism") {
    ModelConfig c = tiny_config();
    c.image_size = 16;
    c.patch_size = 8;
    Captioner<float> model(c, 1);
    auto img = random_image(16, 42);
    auto f1 = model.encode_image(img);
    CHECK(f1.shape() == Shape{4, 16});
    auto f2 = model.encode_image(img);
    CHECK(f1.data() == f2.data());

    CHECK_THROWS_AS(model.encode_image(random_image(8, 1)), InputError);
}

TEST_CASE("constant-zero image is invariant to patch permutation") {
    Captioner<float> model(tiny_config(), 2);
    ImageGrid zero{8, 8, std::vector<float>(64, 0.f)};
    auto base = model.encode_image(zero).data();
    // permuting patches of an all-equal image is the identity on pixels,
    // so features must be unchanged; check against a rebuilt copy
    ImageGrid permuted = zero;
    std::swap_ranges(permuted.pixels.begin(), permuted.pixels.begin() + 4, permuted.pixels.begin() + 4);
    CHECK(model.encode_image(permuted).data() == base);
}

TEST_CASE("decoder causality is exact for both styles") {
    for (auto style : {DecoderStyle::self_attention, DecoderStyle::cross_attention}) {
        Captioner<float> model(tiny_config(style), 7);
        autograd::NoGradGuard ng;
        auto img = model.encode_image(random_image(8, 3));
        auto ids = random_text(6, 11, 9);
        auto base = model.forward(img, ids);
        const int v = base.dim(1);
        for (int p = 1; p < 6; ++p) {
            auto altered = ids;
            altered[static_cast<size_t>(p)] = (altered[static_cast<size_t>(p)] - 4 + 1) % 7 + 4;
            auto out = model.forward(img, altered);
            for (int r = 0; r < p; ++r)
                for (int cidx = 0; cidx < v; ++cidx) {
                    INFO("style=" << to_string(style) << " perturbed=" << p << " row=" << r);
                    REQUIRE(out.data()[static_cast<size_t>(r * v + cidx)] ==
                            base.data()[static_cast<size_t>(r * v + cidx)]);
                }
        }
    }
}

TEST_CASE("image changes can reach every text logit") {
    Captioner<float> model(tiny_config(), 11);
    autograd::NoGradGuard ng;
    auto ids = random_text(4, 11, 5);
    auto a = model.forward(model.encode_image(random_image(8, 1)), ids);
    auto b = model.forward(model.encode_image(random_image(8, 2)), ids);
    const int v = a.dim(1);
    for (int r = 0; r < 4; ++r) {
        bool row_changed = false;
        for (int c = 0; c < v; ++c)
            row_changed |= a.data()[static_cast<size_t>(r * v + c)] != b.data()[static_cast<size_t>(r * v + c)];
        CHECK(row_changed);
    }
}

TEST_CASE("zeroing one image token perturbs text logits") {
    Captioner<float> model(tiny_config(), 13);
    autograd::NoGradGuard ng;
    auto feats = model.encode_image(random_image(8, 8));
    auto ids = random_text(4, 11, 6);
    auto base = model.forward(feats, ids);
    auto zeroed_data = feats.data();
    for (int c = 0; c < feats.dim(1); ++c) zeroed_data[static_cast<size_t>(c)] = 0.f;
    auto zeroed = Tensor<float>::from_data(feats.shape(), zeroed_data);
    auto out = model.forward(zeroed, ids);
    CHECK(out.data() != base.data());
}

TEST_CASE("single BOS yields one logits row") {
    Captioner<float> model(tiny_config(), 17);
    autograd::NoGradGuard ng;
    auto logits = model.forward(model.encode_image(random_image(8, 4)), {Vocabulary::kBos});
    CHECK(logits.shape() == Shape{1, 11});
}

TEST_CASE("text contract errors") {
    Captioner<float> model(tiny_config(), 19);
    autograd::NoGradGuard ng;
    auto img = model.encode_image(random_image(8, 4));
    CHECK_THROWS_AS(model.forward(img, {5, 6}), ContractError);          // missing BOS
    CHECK_THROWS_AS(model.forward(img, random_text(9, 11, 4)), InputError);  // overlong
}

TEST_CASE("cross-attention decoder with zero output weights ignores the image") {
    ModelConfig c = tiny_config(DecoderStyle::cross_attention);
    Captioner<float> model(c, 23);
    for (auto& p : model.params())
        if (p.name.find(".cross.wo") != std::string::npos || p.name.find(".cross.bo") != std::string::npos)
            std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.f);
    autograd::NoGradGuard ng;
    auto ids = random_text(5, 11, 31);
    auto a = model.forward(model.encode_image(random_image(8, 1)), ids);
    auto b = model.forward(model.encode_image(random_image(8, 2)), ids);
    CHECK(a.data() == b.data());
}

TEST_CASE("video encoding with zero temporal embeddings") {
    Captioner<float> model(tiny_config(), 29);
    autograd::NoGradGuard ng;
    auto frame = random_image(8, 77);
    auto multi = model.encode_video({frame, frame, frame});
    CHECK(multi.dim(0) == 3 * 4);
    const int row = multi.dim(1);
    // identical frames, zero-initialized temporal embeddings: the three
    // per-frame blocks are bit-identical
    for (int f = 1; f < 3; ++f)
        for (int i = 0; i < 4 * row; ++i)
            REQUIRE(multi.data()[static_cast<size_t>(f * 4 * row + i)] == multi.data()[static_cast<size_t>(i)]);

    auto single = model.encode_video({frame});
    CHECK(single.data() == model.encode_image(frame).data());

    CHECK_THROWS_AS(model.encode_video({frame, frame, frame, frame, frame}), InputError);
    CHECK_THROWS_AS(model.encode_video({}), InputError);
}

TEST_CASE("trained temporal embeddings distinguish frame order") {
    Captioner<float> model(tiny_config(), 31);
    // stand-in for training: make the temporal table non-zero
    auto temporal = model.temporal_embeddings();
    std::mt19937_64 rng(5);
    std::normal_distribution<float> d(0.f, 0.1f);
    for (auto& v : temporal.mutable_data()) v = d(rng);
    autograd::NoGradGuard ng;
    auto f1 = random_image(8, 1), f2 = random_image(8, 2);
    auto ab = model.encode_video({f1, f2});
    auto ba = model.encode_video({f2, f1});
    CHECK(ab.data() != ba.data());
}

TEST_CASE("weight tying shares storage") {
    Captioner<float> tied(tiny_config(), 37);
    CHECK(tied.token_embedding().same_storage(tied.output_matrix()));
    for (const auto& p : tied.params()) CHECK(p.name.find("out_proj") == std::string::npos);

    ModelConfig untied_cfg = tiny_config();
    untied_cfg.tie_embeddings = false;
    Captioner<float> untied(untied_cfg, 37);
    CHECK_FALSE(untied.token_embedding().same_storage(untied.output_matrix()));
    CHECK(untied.parameter_count() == tied.parameter_count() + 11 * 16);
}

TEST_CASE("updating the tied matrix moves the logits") {
    Captioner<float> model(tiny_config(), 41);
    autograd::NoGradGuard ng;
    auto img = model.encode_image(random_image(8, 9));
    auto before = model.forward(img, {Vocabulary::kBos});
    auto emb = model.token_embedding();
    for (auto& v : emb.mutable_data()) v += 0.05f;
    auto after = model.forward(img, {Vocabulary::kBos});
    CHECK(before.data() != after.data());
}

TEST_CASE("parameter count matches the documented formula") {
    for (auto style : {DecoderStyle::self_attention, DecoderStyle::cross_attention})
        for (bool tie : {true, false}) {
            ModelConfig c;
            c.d_model = 24;
            c.heads = 3;
            c.encoder_layers = 2;
            c.decoder_layers = 3;
            c.patch_size = 3;
            c.image_size = 9;
            c.vocab_size = 17;
            c.max_text_len = 10;
            c.max_frames = 5;
            c.decoder_style = style;
            c.tie_embeddings = tie;
            Captioner<float> model(c, 0);
            CHECK(model.parameter_count() == parameter_count(c));
        }
}

TEST_CASE("config invariants rejected") {
    ModelConfig c = tiny_config();
    c.heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(Captioner<float>(c, 0), ConfigError);
    c = tiny_config();
    c.image_size = 10;  // not divisible by patch 4
    CHECK_THROWS_AS(Captioner<float>(c, 0), ConfigError);
    c = tiny_config();
    c.vocab_size = 2;
    CHECK_THROWS_AS(Captioner<float>(c, 0), ConfigError);
}

TEST_CASE("model config json round trip") {
    ModelConfig c = tiny_config(DecoderStyle::cross_attention);
    c.tie_embeddings = false;
    auto j = c.to_json();
    auto back = ModelConfig::from_json(j);
    CHECK(back.d_model == c.d_model);
    CHECK(back.decoder_style == c.decoder_style);
    CHECK(back.tie_embeddings == c.tie_embeddings);
    CHECK(back.max_frames == c.max_frames);
}
