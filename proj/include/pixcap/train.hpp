#pragma once

// Language-modeling objective with label smoothing, answer-only loss
// masking for question answering, AdamW with decoupled weight decay, and
// the warmup-then-cosine learning-rate schedule with a separate multiplier
// for the decoder parameter group.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pixcap/error.hpp"
#include "pixcap/model.hpp"
#include "pixcap/tensor.hpp"
#include "pixcap/vocab.hpp"

namespace pixcap {

struct TrainConfig {
    double peak_lr_encoder = 1e-4;
    double lr_decoder_multiplier = 5.0;
    int warmup_iters = 500;
    int total_iters = 1000;
    int batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double label_smoothing = 0.1;
    uint64_t seed = 0;
    double grad_clip = 1.0;  // global-norm clip, <=0 disables
    int log_every = 10;
    double adam_eps = 1e-8;

    void validate() const {
        if (label_smoothing < 0 || label_smoothing >= 1)
            throw ConfigError("label_smoothing must be in [0,1)");
        if (warmup_iters > total_iters) throw ConfigError("warmup_iters must not exceed total_iters");
        if (warmup_iters < 0 || total_iters <= 0) throw ConfigError("iteration counts must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (peak_lr_encoder <= 0 || lr_decoder_multiplier <= 0) throw ConfigError("learning rates must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must be in [0,1)");
    }

    nlohmann::json to_json() const {
        return {{"peak_lr_encoder", peak_lr_encoder},
                {"lr_decoder_multiplier", lr_decoder_multiplier},
                {"warmup_iters", warmup_iters},
                {"total_iters", total_iters},
                {"batch_size", batch_size},
                {"beta1", beta1},
                {"beta2", beta2},
                {"weight_decay", weight_decay},
                {"label_smoothing", label_smoothing},
                {"seed", seed},
                {"grad_clip", grad_clip},
                {"log_every", log_every}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.peak_lr_encoder = j.value("peak_lr_encoder", c.peak_lr_encoder);
        c.lr_decoder_multiplier = j.value("lr_decoder_multiplier", c.lr_decoder_multiplier);
        c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
        c.total_iters = j.value("total_iters", c.total_iters);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
        c.seed = j.value("seed", c.seed);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.log_every = j.value("log_every", c.log_every);
        return c;
    }
};

// Per-position loss membership. Question-answering masks out the question:
// false on the positions predicting question tokens, true on the answer
// tokens and the closing EOS.
inline std::vector<bool> vqa_loss_mask(int question_len, int answer_len) {
    if (question_len < 0 || answer_len < 0) throw InputError("vqa_loss_mask: negative length");
    std::vector<bool> m(static_cast<size_t>(question_len + answer_len + 1), true);
    for (int i = 0; i < question_len; ++i) m[static_cast<size_t>(i)] = false;
    return m;
}

// Mean over mask-true positions of label-smoothed cross-entropy. The
// smoothed target distribution is (1-eps) one-hot + eps/V uniform over the
// full vocabulary; positions whose mask is false (padding, question
// tokens) contribute neither to the value nor to any gradient.
template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, const std::vector<int>& targets, const std::vector<bool>& mask,
                  double smoothing) {
    if (logits.ndim() != 2) throw ShapeError("lm_loss: logits must be 2D, got " + shape_str(logits.shape()));
    const int n = logits.dim(0);
    const int v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("lm_loss: logits rows " + std::to_string(n) + " vs targets " +
                         std::to_string(targets.size()) + " / mask " + std::to_string(mask.size()));
    if (smoothing < 0 || smoothing >= 1) throw ParamError("lm_loss: smoothing must be in [0,1)");
    int n_true = 0;
    for (bool b : mask) n_true += b ? 1 : 0;
    if (n_true == 0) throw ContractError("lm_loss: mask selects no positions");

    std::vector<T> q(static_cast<size_t>(n) * v, T(0));
    const T uniform = static_cast<T>(smoothing / v);
    const T hot = static_cast<T>(1.0 - smoothing);
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v) throw InputError("lm_loss: target id " + std::to_string(t) + " outside vocab");
        T* row = q.data() + static_cast<size_t>(i) * v;
        for (int c = 0; c < v; ++c) row[c] = uniform;
        row[t] += hot;
    }
    auto weights = Tensor<T>::from_data({n, v}, std::move(q));
    return scale(sum(mul(log_softmax(logits), weights)), T(-1.0 / n_true));
}

// Linear warmup from zero to peak, then cosine decay to zero. The decoder
// group runs at peak * lr_decoder_multiplier.
inline double lr_at(int step, const TrainConfig& cfg, ParamGroup group) {
    if (step < 0 || step > cfg.total_iters)
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0," +
                            std::to_string(cfg.total_iters) + "]");
    const double peak =
        cfg.peak_lr_encoder * (group == ParamGroup::decoder ? cfg.lr_decoder_multiplier : 1.0);
    if (step < cfg.warmup_iters) return peak * step / cfg.warmup_iters;
    if (cfg.total_iters == cfg.warmup_iters) return step == cfg.total_iters ? 0.0 : peak;
    const double progress = static_cast<double>(step - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters);
    return peak * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// AdamW with bias correction and decoupled weight decay. Weight decay is
// skipped for parameters registered without it (layernorm, bias,
// embedding tensors).
template <typename T>
class AdamW {
public:
    explicit AdamW(std::vector<ParamInfo<T>>& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
        for (auto& p : *params_) {
            m_.emplace_back(p.tensor.size(), T(0));
            v_.emplace_back(p.tensor.size(), T(0));
        }
    }

    int64_t step_count() const { return t_; }

    void scale_grads(T factor) {
        for (auto& p : *params_)
            for (auto& g : p.tensor.grad()) g *= factor;
    }

    // Returns the global gradient norm before clipping.
    double clip_global_norm(double max_norm) {
        double sq = 0;
        for (auto& p : *params_)
            for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (max_norm > 0 && norm > max_norm) {
            const T s = static_cast<T>(max_norm / norm);
            for (auto& p : *params_)
                for (auto& g : p.tensor.grad()) g *= s;
        }
        return norm;
    }

    void step(double lr_encoder, double lr_decoder) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t pi = 0; pi < params_->size(); ++pi) {
            auto& p = (*params_)[pi];
            const double lr = p.group == ParamGroup::encoder ? lr_encoder : lr_decoder;
            auto& data = p.tensor.mutable_data();
            auto& grad = p.tensor.grad();
            if (grad.size() != data.size())
                throw ContractError("adamw_step: grad/param size mismatch for " + p.name);
            auto& m = m_[pi];
            auto& v = v_[pi];
            const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
            for (size_t i = 0; i < data.size(); ++i) {
                if (p.weight_decay && cfg_.weight_decay > 0)
                    data[i] -= static_cast<T>(lr * cfg_.weight_decay) * data[i];
                m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
                v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : *params_) p.tensor.zero_grad();
    }

private:
    std::vector<ParamInfo<T>>* params_;
    TrainConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// One training item: an image or frame list plus the text fields the task
// mode needs.
struct TrainSample {
    ImageGrid image;
    std::vector<ImageGrid> frames;  // video mode when non-empty
    std::string caption;            // LM target (classification uses the label here)
    std::optional<std::string> question;
    std::optional<std::string> answer;
};

struct TraceRow {
    int step = 0;
    double loss = 0;
    double lr_encoder = 0;
    double lr_decoder = 0;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    double final_loss = 0;
};

struct TokenizedSample {
    std::vector<int> input_ids;  // BOS + text
    std::vector<int> targets;    // text + EOS
    std::vector<bool> mask;
};

// Tokenizes one sample for the LM objective. Captioning predicts every
// target position; question answering concatenates question and answer
// and masks the loss to the answer and EOS positions.
inline TokenizedSample prepare_tokens(const Vocabulary& vocab, const TrainSample& s, int max_text_len) {
    TokenizedSample out;
    std::vector<int> text;
    if (s.question) {
        const auto q = vocab.encode(*s.question);
        const auto a = vocab.encode(s.answer ? *s.answer : s.caption);
        text = q;
        text.insert(text.end(), a.begin(), a.end());
        out.mask = vqa_loss_mask(static_cast<int>(q.size()), static_cast<int>(a.size()));
    } else {
        text = vocab.encode(s.caption);
        out.mask.assign(text.size() + 1, true);
    }
    out.input_ids.push_back(Vocabulary::kBos);
    out.input_ids.insert(out.input_ids.end(), text.begin(), text.end());
    out.targets = text;
    out.targets.push_back(Vocabulary::kEos);
    if (static_cast<int>(out.input_ids.size()) > max_text_len)
        throw InputError("training sample text length " + std::to_string(out.input_ids.size()) +
                         " exceeds max_text_len");
    return out;
}

// Runs the LM objective over a sample stream. The factory is called once
// per epoch and must yield the same node-shard items in a deterministic
// order for a given seed. Loss is the per-sequence masked mean averaged
// over the batch. Aborts with a diagnostic on non-finite loss.
template <typename T>
TrainResult train(Captioner<T>& model, const Vocabulary& vocab,
                  const std::function<std::function<std::optional<TrainSample>()>(int epoch)>& stream_factory,
                  const TrainConfig& cfg) {
    cfg.validate();
    AdamW<T> opt(model.params(), cfg);
    TrainResult result;
    int epoch = 0;
    auto stream = stream_factory(epoch);
    auto next_sample = [&]() -> TrainSample {
        auto s = stream();
        if (!s) {
            stream = stream_factory(++epoch);
            s = stream();
            if (!s) throw InputError("train: dataset stream yielded no items");
        }
        return *s;
    };

    for (int step = 1; step <= cfg.total_iters; ++step) {
        opt.zero_grad();
        double batch_loss = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TrainSample s = next_sample();
            const TokenizedSample ts = prepare_tokens(vocab, s, model.config().max_text_len);
            auto feats = s.frames.empty() ? model.encode_image(s.image) : model.encode_video(s.frames);
            auto logits = model.forward(feats, ts.input_ids);
            auto loss = lm_loss(logits, ts.targets, ts.mask, cfg.label_smoothing);
            batch_loss += static_cast<double>(loss.item());
            backward(loss);
        }
        batch_loss /= cfg.batch_size;
        if (!std::isfinite(batch_loss))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));

        opt.scale_grads(static_cast<T>(1.0 / cfg.batch_size));
        if (cfg.grad_clip > 0) opt.clip_global_norm(cfg.grad_clip);
        const double lr_enc = lr_at(step, cfg, ParamGroup::encoder);
        const double lr_dec = lr_at(step, cfg, ParamGroup::decoder);
        opt.step(lr_enc, lr_dec);

        if (step % cfg.log_every == 0 || step == cfg.total_iters)
            result.trace.push_back({step, batch_loss, lr_enc, lr_dec});
        result.final_loss = batch_loss;
    }
    return result;
}

// Convenience overload over an in-memory dataset; per-epoch order is a
// deterministic reshuffle keyed by (seed, epoch).
template <typename T>
TrainResult train(Captioner<T>& model, const Vocabulary& vocab, const std::vector<TrainSample>& samples,
                  const TrainConfig& cfg) {
    if (samples.empty()) throw InputError("train: empty dataset");
    auto factory = [&samples, &cfg](int epoch) -> std::function<std::optional<TrainSample>()> {
        auto order = std::make_shared<std::vector<size_t>>(samples.size());
        for (size_t i = 0; i < order->size(); ++i) (*order)[i] = i;
        std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1);
        for (size_t i = order->size(); i > 1; --i)
            std::swap((*order)[i - 1], (*order)[rng() % i]);
        auto pos = std::make_shared<size_t>(0);
        return [order, pos, &samples]() -> std::optional<TrainSample> {
            if (*pos >= order->size()) return std::nullopt;
            return samples[(*order)[(*pos)++]];
        };
    };
    return train(model, vocab, factory, cfg);
}

}  // namespace pixcap
