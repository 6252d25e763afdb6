#pragma once

// Generation-based evaluation: whitespace-insensitive exact match,
// containment, vocabulary-prior accuracy, and strict scene-text match.
// All comparisons case-fold first.

#include <algorithm>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pixcap/error.hpp"
#include "pixcap/vocab.hpp"

namespace pixcap {

enum class EvalMode { equal, in, voc_prior, scene_text };

inline const char* to_string(EvalMode m) {
    switch (m) {
        case EvalMode::equal: return "equal";
        case EvalMode::in: return "in";
        case EvalMode::voc_prior: return "voc-prior";
        case EvalMode::scene_text: return "scene-text";
    }
    return "?";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "equal") return EvalMode::equal;
    if (s == "in") return EvalMode::in;
    if (s == "voc-prior" || s == "voc_prior") return EvalMode::voc_prior;
    if (s == "scene-text" || s == "scene_text") return EvalMode::scene_text;
    throw ConfigError("unknown eval mode '" + s + "'");
}

namespace detail {

inline std::string strip_spaces(const std::string& s) {
    std::string out;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
    return out;
}

}  // namespace detail

// True iff the strings agree after removing all whitespace (case-folded):
// "crane bird" matches "cranebird".
inline bool match_equal_ws(const std::string& pred, const std::string& gt) {
    return detail::strip_spaces(lowercase(pred)) == detail::strip_spaces(lowercase(gt));
}

// True iff the ground truth appears as a substring of the prediction
// (case-folded).
inline bool match_in(const std::string& pred, const std::string& gt) {
    return lowercase(pred).find(lowercase(gt)) != std::string::npos;
}

// Strict exact match keeping internal whitespace (case-folded).
inline bool match_scene_text(const std::string& pred, const std::string& gt) {
    return lowercase(pred) == lowercase(gt);
}

struct EvalRecord {
    std::string prediction;
    std::string ground_truth;
    bool equal = false;
    bool contains = false;
};

struct EvalReport {
    int64_t n = 0;
    EvalMode mode = EvalMode::equal;
    double equal_acc = 0;  // the mode's own match rule
    double in_acc = 0;     // containment, always computed
    std::optional<double> vocprior_acc;
    std::vector<EvalRecord> records;

    nlohmann::json to_json() const {
        nlohmann::json j{{"n", n},
                         {"mode", to_string(mode)},
                         {"equal_acc", equal_acc},
                         {"in_acc", in_acc}};
        if (vocprior_acc) j["vocprior_acc"] = *vocprior_acc;
        j["samples"] = nlohmann::json::array();
        for (const auto& r : records)
            j["samples"].push_back({{"prediction", r.prediction},
                                    {"ground_truth", r.ground_truth},
                                    {"equal", r.equal},
                                    {"in", r.contains}});
        return j;
    }

    void print_summary(std::ostream& os) const {
        os << "mode        " << to_string(mode) << "\n"
           << "samples     " << n << "\n"
           << "equal_acc   " << equal_acc << "\n"
           << "in_acc      " << in_acc << "\n";
        if (vocprior_acc) os << "vocprior    " << *vocprior_acc << "\n";
    }
};

// Aggregates per-sample verdicts. voc-prior additionally requires every
// prediction to be one of the given labels and fails loudly otherwise;
// scene-text keeps internal whitespace significant.
inline EvalReport evaluate(const std::vector<std::string>& predictions,
                           const std::vector<std::string>& ground_truths, EvalMode mode,
                           const std::vector<std::string>* labels = nullptr) {
    if (predictions.size() != ground_truths.size())
        throw InputError("evaluate: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(ground_truths.size()) + " ground truths");
    EvalReport rep;
    rep.mode = mode;
    rep.n = static_cast<int64_t>(predictions.size());
    int64_t n_equal = 0, n_in = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        const auto& g = ground_truths[i];
        if (mode == EvalMode::voc_prior) {
            if (labels == nullptr) throw InputError("evaluate: voc-prior mode needs the label list");
            const bool in_set = std::any_of(labels->begin(), labels->end(), [&](const std::string& l) {
                return lowercase(l) == lowercase(p);
            });
            if (!in_set)
                throw ContractError("evaluate: voc-prior prediction '" + p + "' is not in the label set");
        }
        EvalRecord r;
        r.prediction = p;
        r.ground_truth = g;
        r.equal = mode == EvalMode::scene_text ? match_scene_text(p, g) : match_equal_ws(p, g);
        // Containment on whitespace-stripped strings, so an equal match
        // always implies an in match and in_acc dominates equal_acc.
        r.contains = match_in(detail::strip_spaces(p), detail::strip_spaces(g));
        n_equal += r.equal ? 1 : 0;
        n_in += r.contains ? 1 : 0;
        rep.records.push_back(std::move(r));
    }
    if (rep.n > 0) {
        rep.equal_acc = static_cast<double>(n_equal) / rep.n;
        rep.in_acc = static_cast<double>(n_in) / rep.n;
    }
    if (mode == EvalMode::voc_prior) rep.vocprior_acc = rep.equal_acc;
    return rep;
}

}  // namespace pixcap
