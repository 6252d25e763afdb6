#pragma once

// Autoregressive inference: greedy, beam search with length penalty,
// prefix-conditioned generation for question answering, and
// trie-constrained generation over a closed label set.
//
// Decoders are written against a step function (prefix ids -> next-token
// logits) so they run identically over the real model and over synthetic
// models in tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pixcap/error.hpp"
#include "pixcap/model.hpp"
#include "pixcap/tensor.hpp"
#include "pixcap/vocab.hpp"

namespace pixcap {

struct DecodeParams {
    int beam = 4;
    double length_penalty = 0.6;
    int max_steps = 40;
};

// ((5+len)/6)^alpha; lp(1) == 1 for any alpha. Hypothesis length counts
// every emitted token including the closing EOS.
inline double length_penalty_factor(int len, double alpha) {
    return std::pow((5.0 + len) / 6.0, alpha);
}

struct Hypothesis {
    std::vector<int> tokens;  // after the prefix, EOS not stored
    double logprob = 0;       // sum of per-step log p, including EOS when finished
    bool finished = false;

    int penalized_length() const { return static_cast<int>(tokens.size()) + (finished ? 1 : 0); }
    double score(double alpha) const { return logprob / length_penalty_factor(penalized_length(), alpha); }
};

// Prefix tree over the token sequences of a closed label set, each path
// terminated by EOS. Node 0 is the root; children are ordered by token id
// so traversal order is deterministic.
class TokenTrie {
public:
    static TokenTrie build(const std::vector<std::string>& labels, const Vocabulary& vocab) {
        if (labels.empty()) throw InputError("build_trie: no labels");
        TokenTrie t;
        t.nodes_.emplace_back();
        for (const auto& label : labels) {
            auto ids = vocab.encode(label);
            if (ids.empty()) throw InputError("build_trie: label '" + label + "' tokenizes to nothing");
            for (int id : ids)
                if (id == Vocabulary::kUnk)
                    throw InputError("build_trie: label '" + label + "' contains out-of-vocabulary tokens");
            ids.push_back(Vocabulary::kEos);
            t.max_depth_ = std::max(t.max_depth_, static_cast<int>(ids.size()));
            int node = 0;
            for (int id : ids) {
                auto it = t.nodes_[static_cast<size_t>(node)].children.find(id);
                if (it == t.nodes_[static_cast<size_t>(node)].children.end()) {
                    t.nodes_.emplace_back();
                    it = t.nodes_[static_cast<size_t>(node)]
                             .children.emplace(id, static_cast<int>(t.nodes_.size()) - 1)
                             .first;
                }
                node = it->second;
            }
            t.labels_.insert(lowercase(label));
        }
        return t;
    }

    int root() const { return 0; }
    const std::map<int, int>& next(int node) const { return nodes_[static_cast<size_t>(node)].children; }
    size_t node_count() const { return nodes_.size(); }
    size_t label_count() const { return labels_.size(); }
    int max_depth() const { return max_depth_; }  // longest path, EOS included
    bool is_label(const std::string& s) const { return labels_.count(lowercase(s)) > 0; }

private:
    struct Node {
        std::map<int, int> children;
    };
    std::vector<Node> nodes_;
    std::set<std::string> labels_;
    int max_depth_ = 0;
};

template <typename T>
using StepFn = std::function<std::vector<T>(const std::vector<int>& prefix_ids)>;

namespace detail {

template <typename T>
std::vector<double> log_probs(const std::vector<T>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    std::vector<double> lp(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        lp[i] = static_cast<double>(logits[i]) - mx;
        sum += std::exp(lp[i]);
    }
    const double lse = std::log(sum);
    for (auto& v : lp) v -= lse;
    return lp;
}

inline bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace detail

// Argmax decoding; ties resolve to the lowest token id. Stops at EOS or
// after max_steps tokens; the returned sequence excludes prefix and EOS.
template <typename T>
std::vector<int> greedy_decode(const StepFn<T>& step, std::vector<int> prefix_ids, int max_steps,
                               const TokenTrie* trie = nullptr) {
    if (max_steps < 1) throw InputError("greedy_decode: max_steps must be >= 1");
    std::vector<int> out;
    std::vector<int> ids = std::move(prefix_ids);
    int node = trie ? trie->root() : 0;
    for (int s = 0; s < max_steps; ++s) {
        const auto logits = step(ids);
        int best = -1;
        if (trie) {
            for (const auto& [id, child] : trie->next(node))
                if (best < 0 || logits[static_cast<size_t>(id)] > logits[static_cast<size_t>(best)]) best = id;
        } else {
            best = 0;
            for (size_t i = 1; i < logits.size(); ++i)
                if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
        }
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
        ids.push_back(best);
        if (trie) node = trie->next(node).at(best);
    }
    return out;
}

// Beam search with the ((5+len)/6)^alpha length penalty. Finished
// hypotheses accumulate in a pool of at most `beam`; search stops when no
// unfinished hypothesis can still beat the worst pooled score, or at
// max_steps. Ties break by token-id sequence lexicographic order.
template <typename T>
std::vector<int> beam_search(const StepFn<T>& step, const std::vector<int>& prefix_ids, const DecodeParams& p,
                             const TokenTrie* trie = nullptr) {
    if (p.beam < 1) throw InputError("beam_search: beam must be >= 1");
    if (p.max_steps < 1) throw InputError("beam_search: max_steps must be >= 1");
    const double alpha = p.length_penalty;

    struct Candidate {
        Hypothesis hyp;
        int trie_node = 0;
    };
    auto better_final = [alpha](const Hypothesis& a, const Hypothesis& b) {
        const double sa = a.score(alpha), sb = b.score(alpha);
        if (sa != sb) return sa > sb;
        if (a.tokens != b.tokens) return detail::lex_less(a.tokens, b.tokens);
        return a.finished && !b.finished;
    };

    std::vector<Candidate> active{{Hypothesis{}, trie ? trie->root() : 0}};
    std::vector<Hypothesis> finished;

    for (int s = 0; s < p.max_steps && !active.empty(); ++s) {
        std::vector<Candidate> expansions;
        for (const auto& cand : active) {
            std::vector<int> ids = prefix_ids;
            ids.insert(ids.end(), cand.hyp.tokens.begin(), cand.hyp.tokens.end());
            const auto lp = detail::log_probs(step(ids));
            if (trie) {
                for (const auto& [id, child] : trie->next(cand.trie_node)) {
                    Candidate c = cand;
                    c.hyp.logprob += lp[static_cast<size_t>(id)];
                    if (id == Vocabulary::kEos)
                        c.hyp.finished = true;
                    else
                        c.hyp.tokens.push_back(id);
                    c.trie_node = child;
                    expansions.push_back(std::move(c));
                }
            } else {
                for (size_t id = 0; id < lp.size(); ++id) {
                    Candidate c = cand;
                    c.hyp.logprob += lp[id];
                    if (static_cast<int>(id) == Vocabulary::kEos)
                        c.hyp.finished = true;
                    else
                        c.hyp.tokens.push_back(static_cast<int>(id));
                    expansions.push_back(std::move(c));
                }
            }
        }
        // Same-length candidates rank by raw cumulative log-probability.
        std::sort(expansions.begin(), expansions.end(), [](const Candidate& a, const Candidate& b) {
            if (a.hyp.logprob != b.hyp.logprob) return a.hyp.logprob > b.hyp.logprob;
            if (a.hyp.finished != b.hyp.finished) return a.hyp.finished;
            return detail::lex_less(a.hyp.tokens, b.hyp.tokens);
        });
        // The step keeps exactly the top `beam` candidates; EOS-completed
        // ones move to the finished pool and release their slot. With beam
        // 1 this walks the argmax path, i.e. greedy decoding.
        const size_t keep = std::min(expansions.size(), static_cast<size_t>(p.beam));
        std::vector<Candidate> next_active;
        for (size_t i = 0; i < keep; ++i) {
            auto& c = expansions[i];
            if (c.hyp.finished)
                finished.push_back(std::move(c.hyp));
            else
                next_active.push_back(std::move(c));
        }
        active = std::move(next_active);
        if (!finished.empty()) {
            std::sort(finished.begin(), finished.end(), better_final);
            if (finished.size() > static_cast<size_t>(p.beam)) finished.resize(static_cast<size_t>(p.beam));
            // Admissible bound: log-probability never increases, and for
            // alpha >= 0 the penalty divisor only grows with length, so
            // the best reachable score for an unfinished hypothesis is its
            // current logprob at the most favorable remaining length.
            if (finished.size() == static_cast<size_t>(p.beam)) {
                double best_possible = -std::numeric_limits<double>::infinity();
                for (const auto& c : active) {
                    const double lp_near = length_penalty_factor(c.hyp.penalized_length() + 1, alpha);
                    const double lp_far = length_penalty_factor(p.max_steps, alpha);
                    best_possible = std::max(best_possible,
                                             std::max(c.hyp.logprob / lp_near, c.hyp.logprob / lp_far));
                }
                if (best_possible < finished.back().score(alpha)) break;
            }
        }
    }

    // Final ranking pools finished hypotheses with whatever survived to
    // max_steps, compared by penalized score. Hypotheses dropped by early
    // termination cannot win: their optimistic bound already lost.
    std::vector<Hypothesis> pool = std::move(finished);
    for (auto& c : active) pool.push_back(std::move(c.hyp));
    if (pool.empty()) return {};
    std::sort(pool.begin(), pool.end(), better_final);
    return pool.front().tokens;
}

// Step function over a fixed image: re-runs the decoder forward on the
// growing prefix and returns the last row of logits. Grad recording off.
template <typename T>
StepFn<T> make_step_fn(const Captioner<T>& model, const Tensor<T>& img_feats) {
    return [&model, img_feats](const std::vector<int>& ids) {
        autograd::NoGradGuard ng;
        auto logits = model.forward(img_feats, ids);
        const int v = logits.dim(1);
        const auto& d = logits.data();
        return std::vector<T>(d.end() - v, d.end());
    };
}

// Decodes a caption for an image; beam when params.beam > 1, else greedy.
template <typename T>
std::vector<int> decode_ids(const StepFn<T>& step, const std::vector<int>& prefix_ids, const DecodeParams& p,
                            const TokenTrie* trie = nullptr) {
    if (p.beam == 1 && p.length_penalty == 0) return greedy_decode(step, prefix_ids, p.max_steps, trie);
    return beam_search(step, prefix_ids, p, trie);
}

// The question is the caption prefix; only the completion is returned.
template <typename T>
std::string prefix_generate(const Captioner<T>& model, const Vocabulary& vocab, const Tensor<T>& img_feats,
                            const std::string& question, const DecodeParams& p) {
    std::vector<int> prefix{Vocabulary::kBos};
    const auto q = vocab.encode(question);
    prefix.insert(prefix.end(), q.begin(), q.end());
    if (static_cast<int>(prefix.size()) >= model.config().max_text_len)
        throw InputError("prefix_generate: question of " + std::to_string(prefix.size() - 1) +
                         " tokens leaves no room to generate");
    auto step = make_step_fn(model, img_feats);
    DecodeParams eff = p;
    eff.max_steps = std::min(p.max_steps, model.config().max_text_len - static_cast<int>(prefix.size()));
    return vocab.decode(decode_ids(step, prefix, eff));
}

// Trie-constrained decoding: per-step candidates are limited to the trie
// children of the current node, so the result is always one of the labels.
// max_steps is raised to the deepest trie path so every hypothesis can
// reach its EOS.
template <typename T>
std::string constrained_decode(const Captioner<T>& model, const Vocabulary& vocab, const Tensor<T>& img_feats,
                               const TokenTrie& trie, const DecodeParams& p) {
    if (trie.max_depth() > model.config().max_text_len - 1)
        throw InputError("constrained_decode: longest label does not fit in max_text_len");
    auto step = make_step_fn(model, img_feats);
    DecodeParams eff = p;
    eff.max_steps = std::max(p.max_steps, trie.max_depth());
    return vocab.decode(decode_ids(step, {Vocabulary::kBos}, eff, &trie));
}

}  // namespace pixcap
