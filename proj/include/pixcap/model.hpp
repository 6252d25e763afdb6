#pragma once

// Image-to-text transformer: patch-based image encoder, linear+layernorm
// projection bridge, and a text decoder over the concatenated image+text
// token sequence with a seq2seq visibility mask. A cross-attention decoder
// variant is selectable for comparison; there the image features enter
// each block as read-only keys/values and are never updated.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pixcap/error.hpp"
#include "pixcap/tensor.hpp"
#include "pixcap/vocab.hpp"

namespace pixcap {

enum class DecoderStyle { self_attention, cross_attention };

inline const char* to_string(DecoderStyle s) {
    return s == DecoderStyle::self_attention ? "self_attention" : "cross_attention";
}

inline DecoderStyle decoder_style_from_string(const std::string& s) {
    if (s == "self_attention") return DecoderStyle::self_attention;
    if (s == "cross_attention") return DecoderStyle::cross_attention;
    throw ConfigError("unknown decoder_style '" + s + "'");
}

struct ModelConfig {
    int d_model = 128;
    int encoder_layers = 2;
    int decoder_layers = 6;
    int heads = 8;
    int patch_size = 4;
    int image_size = 12;
    int vocab_size = 0;
    int max_text_len = 32;
    DecoderStyle decoder_style = DecoderStyle::self_attention;
    bool tie_embeddings = true;
    int max_frames = 6;
    double layer_norm_eps = 1e-5;

    int patches_per_side() const { return image_size / patch_size; }
    int tokens_per_frame() const { return patches_per_side() * patches_per_side(); }

    void validate() const {
        if (d_model <= 0 || heads <= 0 || encoder_layers < 0 || decoder_layers <= 0)
            throw ConfigError("model dims must be positive");
        if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
        if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("image_size must be divisible by patch_size");
        if (vocab_size < Vocabulary::kReserved) throw ConfigError("vocab_size must cover reserved tokens");
        if (max_text_len < 2) throw ConfigError("max_text_len must be at least 2");
        if (max_frames < 1) throw ConfigError("max_frames must be at least 1");
        if (layer_norm_eps <= 0) throw ConfigError("layer_norm_eps must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"d_model", d_model},
                {"encoder_layers", encoder_layers},
                {"decoder_layers", decoder_layers},
                {"heads", heads},
                {"patch_size", patch_size},
                {"image_size", image_size},
                {"vocab_size", vocab_size},
                {"max_text_len", max_text_len},
                {"decoder_style", to_string(decoder_style)},
                {"tie_embeddings", tie_embeddings},
                {"max_frames", max_frames},
                {"layer_norm_eps", layer_norm_eps}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_model = j.value("d_model", c.d_model);
        c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
        c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
        c.heads = j.value("heads", c.heads);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.image_size = j.value("image_size", c.image_size);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.max_text_len = j.value("max_text_len", c.max_text_len);
        if (j.contains("decoder_style")) c.decoder_style = decoder_style_from_string(j["decoder_style"]);
        c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
        c.max_frames = j.value("max_frames", c.max_frames);
        c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
        return c;
    }
};

// Visibility matrix over the concatenated [image tokens | text tokens]
// sequence: image rows see exactly the image columns; text row t sees all
// image columns and text columns up to and including t.
struct AttentionMask {
    int n_img = 0;
    int n_txt = 0;
    std::vector<uint8_t> allowed;  // (n_img+n_txt)^2, row-major

    int n() const { return n_img + n_txt; }
    bool at(int i, int j) const { return allowed[static_cast<size_t>(i) * n() + j] != 0; }
};

inline AttentionMask build_seq2seq_mask(int n_img, int n_txt) {
    if (n_img < 0 || n_txt < 0) throw InputError("build_seq2seq_mask: negative token count");
    AttentionMask m;
    m.n_img = n_img;
    m.n_txt = n_txt;
    const int n = n_img + n_txt;
    m.allowed.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const bool vis = i < n_img ? (j < n_img)                 // image rows: image columns only
                                       : (j < n_img || j <= i);      // text rows: all image + text up to i
            m.allowed[static_cast<size_t>(i) * n + j] = vis ? 1 : 0;
        }
    return m;
}

// Single-channel pixel grid; the on-disk float payload for images/frames.
struct ImageGrid {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // row-major, height*width
};

enum class ParamGroup { encoder, decoder };

template <typename T>
struct ParamInfo {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group = ParamGroup::decoder;
    bool weight_decay = true;  // off for layernorm params, biases, embeddings
};

namespace detail {

template <typename T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    AttentionParams<T> attn;
    Tensor<T> lnx_g, lnx_b;          // cross-attention sublayer (cross style only)
    AttentionParams<T> cross;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
};

// Splits [S,D] into heads, applies scaled dot-product attention with the
// given mask over keys of [Sk,D], concatenates heads and projects.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& query_src, const Tensor<T>& key_src,
                               const AttentionParams<T>& p, int heads,
                               const std::vector<uint8_t>* mask) {
    const int sq = query_src.dim(0);
    const int sk = key_src.dim(0);
    const int d = query_src.dim(1);
    const int dh = d / heads;

    auto split = [&](const Tensor<T>& x, int s) {
        // [S,D] -> [H,S,dh]
        return transpose(reshape(x, {s, heads, dh}), {1, 0, 2});
    };
    auto q = split(add(matmul(query_src, p.wq), p.bq), sq);
    auto k = split(add(matmul(key_src, p.wk), p.bk), sk);
    auto v = split(add(matmul(key_src, p.wv), p.bv), sk);

    auto scores = scale(matmul(q, transpose(k, {0, 2, 1})), T(1) / std::sqrt(T(dh)));  // [H,Sq,Sk]
    auto probs = mask ? masked_softmax(scores, *mask) : softmax(scores);
    auto ctx = matmul(probs, v);                                        // [H,Sq,dh]
    auto merged = reshape(transpose(ctx, {1, 0, 2}), {sq, d});          // [Sq,D]
    return add(matmul(merged, p.wo), p.bo);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const BlockParams<T>& b) {
    return add(matmul(gelu(add(matmul(x, b.ff1_w), b.ff1_b)), b.ff2_w), b.ff2_b);
}

}  // namespace detail

// Parameter count is a pure function of the configuration:
//   per transformer block: 12 D^2 + 13 D   (qkv/out projections with biases,
//                                           two layernorms, 4D feed-forward)
//   cross-attention block adds 4 D^2 + 6 D (extra attention + layernorm)
//   encoder: P^2 D + D patch proj, Np D positions, blocks, bridge D^2 + 3D,
//            max_frames D temporal embeddings
//   decoder: V D token embeddings (shared with the output projection when
//            tied, else + V D), T D positions, 2 D embedding layernorm,
//            blocks, 2 D final layernorm
inline int64_t parameter_count(const ModelConfig& c) {
    const int64_t d = c.d_model;
    const int64_t block = 12 * d * d + 13 * d;
    const int64_t cross_extra = 4 * d * d + 6 * d;
    const int64_t np = c.tokens_per_frame();
    int64_t enc = (int64_t)c.patch_size * c.patch_size * d + d  // patch projection
                  + np * d                                      // encoder positions
                  + c.encoder_layers * block                    // encoder blocks
                  + d * d + d + 2 * d                           // bridge linear + layernorm
                  + (int64_t)c.max_frames * d;                  // temporal embeddings
    int64_t dec = (int64_t)c.vocab_size * d                     // token embeddings
                  + (int64_t)c.max_text_len * d                 // text positions
                  + 2 * d                                       // embedding layernorm
                  + c.decoder_layers * block + 2 * d;           // blocks + final layernorm
    if (c.decoder_style == DecoderStyle::cross_attention) dec += c.decoder_layers * cross_extra;
    if (!c.tie_embeddings) dec += (int64_t)c.vocab_size * d;
    return enc + dec;
}

template <typename T>
class Captioner {
public:
    explicit Captioner(ModelConfig cfg, uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        init_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<ParamInfo<T>>& params() { return params_; }
    const std::vector<ParamInfo<T>>& params() const { return params_; }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    // Patch embedding, bidirectional encoder blocks, then the projection
    // bridge: linear to D followed by layernorm, in that order.
    Tensor<T> encode_image(const ImageGrid& img) const {
        if (img.height != cfg_.image_size || img.width != cfg_.image_size ||
            img.pixels.size() != static_cast<size_t>(img.height) * img.width)
            throw InputError("encode_image: expected " + std::to_string(cfg_.image_size) + "x" +
                             std::to_string(cfg_.image_size) + " image, got " + std::to_string(img.height) +
                             "x" + std::to_string(img.width));
        const int ps = cfg_.patch_size;
        const int grid = cfg_.patches_per_side();
        const int np = cfg_.tokens_per_frame();
        std::vector<T> patches(static_cast<size_t>(np) * ps * ps);
        for (int py = 0; py < grid; ++py)
            for (int px = 0; px < grid; ++px) {
                T* dst = patches.data() + (static_cast<size_t>(py) * grid + px) * ps * ps;
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x)
                        dst[y * ps + x] =
                            static_cast<T>(img.pixels[static_cast<size_t>(py * ps + y) * img.width + px * ps + x]);
            }
        auto x = Tensor<T>::from_data({np, ps * ps}, std::move(patches));
        x = add(add(matmul(x, patch_w_), patch_b_), enc_pos_);
        const AttentionMask full = build_seq2seq_mask(np, 0);
        for (const auto& blk : enc_blocks_) x = block_forward(x, blk, &full.allowed, nullptr);
        x = add(matmul(x, bridge_w_), bridge_b_);
        return layer_norm(x, bridge_ln_g_, bridge_ln_b_, T(cfg_.layer_norm_eps));
    }

    // Frames are encoded independently; the learned per-frame-index
    // temporal embedding (zero-initialized) is added to every token of
    // its frame; results concatenate in frame order.
    Tensor<T> encode_video(const std::vector<ImageGrid>& frames) const {
        if (frames.empty() || static_cast<int>(frames.size()) > cfg_.max_frames)
            throw InputError("encode_video: frame count " + std::to_string(frames.size()) +
                             " outside [1," + std::to_string(cfg_.max_frames) + "]");
        std::vector<Tensor<T>> parts;
        for (size_t f = 0; f < frames.size(); ++f) {
            auto feats = encode_image(frames[f]);
            auto emb = slice0(temporal_, static_cast<int>(f), static_cast<int>(f) + 1);
            parts.push_back(add(feats, reshape(emb, {cfg_.d_model})));
        }
        return parts.size() == 1 ? parts[0] : concat0(parts);
    }

    // Logits over the next token at each text position. text_ids must
    // begin with BOS; logits row t is the distribution over token t+1.
    Tensor<T> decoder_forward(const Tensor<T>& img_feats, const std::vector<int>& text_ids) const {
        check_text(text_ids);
        const int n_img = img_feats.defined() ? img_feats.dim(0) : 0;
        const int n_txt = static_cast<int>(text_ids.size());
        auto txt = embed_text(text_ids);
        Tensor<T> x = img_feats.defined() ? concat0<T>({img_feats, txt}) : txt;
        const AttentionMask mask = build_seq2seq_mask(n_img, n_txt);
        for (const auto& blk : dec_blocks_) x = block_forward(x, blk, &mask.allowed, nullptr);
        x = layer_norm(x, final_ln_g_, final_ln_b_, T(cfg_.layer_norm_eps));
        auto t = n_img > 0 ? slice0(x, n_img, n_img + n_txt) : x;
        return matmul(t, transpose(output_matrix()));
    }

    // Cross-attention variant: causal text self-attention, cross-attention
    // with the image features as keys/values, feed-forward. The image
    // features tensor is passed to every block unchanged.
    Tensor<T> decoder_forward_cross(const Tensor<T>& img_feats, const std::vector<int>& text_ids) const {
        check_text(text_ids);
        const int n_txt = static_cast<int>(text_ids.size());
        auto x = embed_text(text_ids);
        const AttentionMask causal = build_seq2seq_mask(0, n_txt);
        for (const auto& blk : dec_blocks_) x = block_forward(x, blk, &causal.allowed, &img_feats);
        x = layer_norm(x, final_ln_g_, final_ln_b_, T(cfg_.layer_norm_eps));
        return matmul(x, transpose(output_matrix()));
    }

    // Dispatches on the configured decoder style.
    Tensor<T> forward(const Tensor<T>& img_feats, const std::vector<int>& text_ids) const {
        return cfg_.decoder_style == DecoderStyle::self_attention ? decoder_forward(img_feats, text_ids)
                                                                  : decoder_forward_cross(img_feats, text_ids);
    }

    Tensor<T> token_embedding() const { return tok_embed_; }
    Tensor<T> output_matrix() const { return cfg_.tie_embeddings ? tok_embed_ : out_proj_; }
    Tensor<T> temporal_embeddings() const { return temporal_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    void check_text(const std::vector<int>& ids) const {
        if (ids.empty() || ids[0] != Vocabulary::kBos)
            throw ContractError("decoder_forward: text must begin with BOS");
        if (static_cast<int>(ids.size()) > cfg_.max_text_len)
            throw InputError("decoder_forward: text length " + std::to_string(ids.size()) +
                             " exceeds max_text_len " + std::to_string(cfg_.max_text_len));
    }

    // Token embedding + learned positions, then layernorm, per the
    // embedding pipeline the decoder expects.
    Tensor<T> embed_text(const std::vector<int>& ids) const {
        auto e = embedding(tok_embed_, ids);
        auto pos = slice0(txt_pos_, 0, static_cast<int>(ids.size()));
        return layer_norm(add(e, pos), embed_ln_g_, embed_ln_b_, T(cfg_.layer_norm_eps));
    }

    Tensor<T> block_forward(const Tensor<T>& x, const detail::BlockParams<T>& b,
                            const std::vector<uint8_t>* mask, const Tensor<T>* cross_src) const {
        const T eps = T(cfg_.layer_norm_eps);
        auto ln_x = layer_norm(x, b.ln1_g, b.ln1_b, eps);
        auto h = add(x, detail::multi_head_attention(ln_x, ln_x, b.attn, cfg_.heads, mask));
        if (cross_src) {
            auto q = layer_norm(h, b.lnx_g, b.lnx_b, eps);
            h = add(h, detail::multi_head_attention(q, *cross_src, b.cross, cfg_.heads, nullptr));
        }
        return add(h, detail::feed_forward(layer_norm(h, b.ln2_g, b.ln2_b, eps), b));
    }

    Tensor<T> reg(const std::string& name, Tensor<T> t, ParamGroup g, bool decay) {
        t.set_requires_grad(true);
        params_.push_back({name, t, g, decay});
        return t;
    }

    template <typename Rng>
    Tensor<T> weight(const std::string& name, Shape shape, Rng& rng, ParamGroup g) {
        return reg(name, Tensor<T>::randn(std::move(shape), rng, T(0.02)), g, true);
    }

    template <typename Rng>
    detail::AttentionParams<T> init_attention(const std::string& prefix, Rng& rng, ParamGroup g) {
        const int d = cfg_.d_model;
        detail::AttentionParams<T> a;
        a.wq = weight(prefix + ".wq", {d, d}, rng, g);
        a.bq = reg(prefix + ".bq", Tensor<T>::zeros({d}), g, false);
        a.wk = weight(prefix + ".wk", {d, d}, rng, g);
        a.bk = reg(prefix + ".bk", Tensor<T>::zeros({d}), g, false);
        a.wv = weight(prefix + ".wv", {d, d}, rng, g);
        a.bv = reg(prefix + ".bv", Tensor<T>::zeros({d}), g, false);
        a.wo = weight(prefix + ".wo", {d, d}, rng, g);
        a.bo = reg(prefix + ".bo", Tensor<T>::zeros({d}), g, false);
        return a;
    }

    template <typename Rng>
    detail::BlockParams<T> init_block(const std::string& prefix, Rng& rng, ParamGroup g, bool with_cross) {
        const int d = cfg_.d_model;
        detail::BlockParams<T> b;
        b.ln1_g = reg(prefix + ".ln1.g", Tensor<T>::full({d}, T(1)), g, false);
        b.ln1_b = reg(prefix + ".ln1.b", Tensor<T>::zeros({d}), g, false);
        b.attn = init_attention(prefix + ".attn", rng, g);
        if (with_cross) {
            b.lnx_g = reg(prefix + ".lnx.g", Tensor<T>::full({d}, T(1)), g, false);
            b.lnx_b = reg(prefix + ".lnx.b", Tensor<T>::zeros({d}), g, false);
            b.cross = init_attention(prefix + ".cross", rng, g);
        }
        b.ln2_g = reg(prefix + ".ln2.g", Tensor<T>::full({d}, T(1)), g, false);
        b.ln2_b = reg(prefix + ".ln2.b", Tensor<T>::zeros({d}), g, false);
        b.ff1_w = weight(prefix + ".ff1.w", {d, 4 * d}, rng, g);
        b.ff1_b = reg(prefix + ".ff1.b", Tensor<T>::zeros({4 * d}), g, false);
        b.ff2_w = weight(prefix + ".ff2.w", {4 * d, d}, rng, g);
        b.ff2_b = reg(prefix + ".ff2.b", Tensor<T>::zeros({d}), g, false);
        return b;
    }

    template <typename Rng>
    void init_params(Rng& rng) {
        const int d = cfg_.d_model;
        const int np = cfg_.tokens_per_frame();
        patch_w_ = weight("encoder.patch.w", {cfg_.patch_size * cfg_.patch_size, d}, rng, ParamGroup::encoder);
        patch_b_ = reg("encoder.patch.b", Tensor<T>::zeros({d}), ParamGroup::encoder, false);
        enc_pos_ = reg("encoder.pos", Tensor<T>::randn({np, d}, rng, T(0.02)), ParamGroup::encoder, false);
        for (int i = 0; i < cfg_.encoder_layers; ++i)
            enc_blocks_.push_back(init_block("encoder.block" + std::to_string(i), rng, ParamGroup::encoder, false));
        bridge_w_ = weight("encoder.bridge.w", {d, d}, rng, ParamGroup::encoder);
        bridge_b_ = reg("encoder.bridge.b", Tensor<T>::zeros({d}), ParamGroup::encoder, false);
        bridge_ln_g_ = reg("encoder.bridge.ln.g", Tensor<T>::full({d}, T(1)), ParamGroup::encoder, false);
        bridge_ln_b_ = reg("encoder.bridge.ln.b", Tensor<T>::zeros({d}), ParamGroup::encoder, false);
        temporal_ = reg("encoder.temporal", Tensor<T>::zeros({cfg_.max_frames, d}), ParamGroup::encoder, false);

        tok_embed_ = reg("decoder.token_embed", Tensor<T>::randn({cfg_.vocab_size, d}, rng, T(0.02)),
                         ParamGroup::decoder, false);
        txt_pos_ = reg("decoder.pos", Tensor<T>::randn({cfg_.max_text_len, d}, rng, T(0.02)),
                       ParamGroup::decoder, false);
        embed_ln_g_ = reg("decoder.embed_ln.g", Tensor<T>::full({d}, T(1)), ParamGroup::decoder, false);
        embed_ln_b_ = reg("decoder.embed_ln.b", Tensor<T>::zeros({d}), ParamGroup::decoder, false);
        const bool with_cross = cfg_.decoder_style == DecoderStyle::cross_attention;
        for (int i = 0; i < cfg_.decoder_layers; ++i)
            dec_blocks_.push_back(init_block("decoder.block" + std::to_string(i), rng, ParamGroup::decoder, with_cross));
        final_ln_g_ = reg("decoder.final_ln.g", Tensor<T>::full({d}, T(1)), ParamGroup::decoder, false);
        final_ln_b_ = reg("decoder.final_ln.b", Tensor<T>::zeros({d}), ParamGroup::decoder, false);
        if (!cfg_.tie_embeddings)
            out_proj_ = reg("decoder.out_proj", Tensor<T>::randn({cfg_.vocab_size, d}, rng, T(0.02)),
                            ParamGroup::decoder, false);
    }

    ModelConfig cfg_;
    std::vector<ParamInfo<T>> params_;

    Tensor<T> patch_w_, patch_b_, enc_pos_;
    std::vector<detail::BlockParams<T>> enc_blocks_;
    Tensor<T> bridge_w_, bridge_b_, bridge_ln_g_, bridge_ln_b_, temporal_;

    Tensor<T> tok_embed_, txt_pos_, embed_ln_g_, embed_ln_b_;
    std::vector<detail::BlockParams<T>> dec_blocks_;
    Tensor<T> final_ln_g_, final_ln_b_, out_proj_;
};

}  // namespace pixcap
