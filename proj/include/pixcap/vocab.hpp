#pragma once

// Token <-> id mapping with reserved BOS/EOS/PAD/UNK ids.
//
// Word mode splits on whitespace; character mode treats every character
// (including spaces) as a token, which gives sub-word granularity for
// text-recognition style tasks. Both modes lowercase.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "pixcap/error.hpp"

namespace pixcap {

enum class TokenMode { word, character };

inline std::string lowercase(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::vector<std::string> tokenize(const std::string& text, TokenMode mode) {
    const std::string lower = lowercase(text);
    std::vector<std::string> out;
    if (mode == TokenMode::word) {
        std::string cur;
        for (char c : lower) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
    } else {
        for (char c : lower) out.push_back(std::string(1, c));
    }
    return out;
}

class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    Vocabulary() = default;

    // Deterministic ordering: frequency descending, ties lexicographic.
    static Vocabulary build(const std::vector<std::string>& corpus, TokenMode mode = TokenMode::word) {
        if (corpus.empty()) throw InputError("build_vocab: empty corpus");
        std::map<std::string, int64_t> freq;
        for (const auto& line : corpus)
            for (auto& tok : tokenize(line, mode)) ++freq[tok];
        std::vector<std::pair<std::string, int64_t>> order(freq.begin(), freq.end());
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        v.mode_ = mode;
        for (auto& [tok, _] : order) v.add_token(tok);
        return v;
    }

    TokenMode mode() const { return mode_; }
    int size() const { return kReserved + static_cast<int>(id_to_token_.size()); }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    int token_id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    // Unknown tokens map to UNK. Never emits reserved ids.
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (auto& tok : tokenize(text, mode_)) ids.push_back(token_id(tok));
        return ids;
    }

    // Drops BOS/EOS/PAD. Word mode joins with single spaces; character
    // mode concatenates so encode/decode round-trips.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || id >= size())
                throw InputError("decode: id " + std::to_string(id) + " out of range for vocab of size " +
                                 std::to_string(size()));
            if (id == kBos || id == kEos || id == kPad) continue;
            const std::string& tok = id == kUnk ? unk_text() : id_to_token_[static_cast<size_t>(id - kReserved)];
            if (mode_ == TokenMode::word && !out.empty()) out.push_back(' ');
            out += tok;
        }
        return out;
    }

    // One token per line, line number = id - 4; reserved ids implicit.
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write vocabulary file " + path);
        f << (mode_ == TokenMode::word ? "#mode word\n" : "#mode character\n");
        for (const auto& tok : id_to_token_) f << tok << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read vocabulary file " + path);
        Vocabulary v;
        std::string line;
        bool first = true;
        while (std::getline(f, line)) {
            if (first && line.rfind("#mode", 0) == 0) {
                v.mode_ = line == "#mode character" ? TokenMode::character : TokenMode::word;
                first = false;
                continue;
            }
            first = false;
            v.add_token(line);
        }
        return v;
    }

    static const std::string& unk_text() {
        static const std::string u = "<unk>";
        return u;
    }

private:
    void add_token(const std::string& tok) {
        const int id = size();
        token_to_id_.emplace(tok, id);
        id_to_token_.push_back(tok);
    }

    TokenMode mode_ = TokenMode::word;
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

}  // namespace pixcap
