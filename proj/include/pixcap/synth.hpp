#pragma once

// Procedural synthetic datasets and their on-disk trunk format.
//
// Every sample is a deterministic function of (seed, index, config), so a
// dataset regenerates bit-identically and held-out splits are honest: a
// fresh seed gives color combinations the training split never saw.
//
// Modes:
//   caption    k x k cell grid of palette colors; the caption reads the
//              cells left-to-right, top-to-bottom ("red blue green ...")
//   vqa        same grids; question "cell r c", answer = that cell's color
//   video      per-frame solid colors; the caption is the frame color
//              sequence in order
//   classify   solid-color image; label drawn from a list that includes
//              multi-word names ("light blue")
//   scene-text a character string rendered as fixed 4x4 glyphs; caption =
//              the string (character-level tokenizer territory)

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pixcap/data.hpp"
#include "pixcap/error.hpp"
#include "pixcap/model.hpp"
#include "pixcap/train.hpp"

namespace pixcap {

enum class SynthMode { caption, vqa, video, classify, scene_text };

inline const char* to_string(SynthMode m) {
    switch (m) {
        case SynthMode::caption: return "caption";
        case SynthMode::vqa: return "vqa";
        case SynthMode::video: return "video";
        case SynthMode::classify: return "classify";
        case SynthMode::scene_text: return "scene-text";
    }
    return "?";
}

inline SynthMode synth_mode_from_string(const std::string& s) {
    if (s == "caption") return SynthMode::caption;
    if (s == "vqa") return SynthMode::vqa;
    if (s == "video") return SynthMode::video;
    if (s == "classify") return SynthMode::classify;
    if (s == "scene-text" || s == "scene_text") return SynthMode::scene_text;
    throw ConfigError("unknown synthetic mode '" + s + "'");
}

struct SynthConfig {
    SynthMode mode = SynthMode::caption;
    int n = 100;
    uint64_t seed = 0;
    int grid = 3;      // cells per side (caption/vqa)
    int cell_px = 4;   // pixels per cell
    int palette = 6;   // colors in play
    int frames = 3;    // frames per video sample
    int text_len = 3;  // scene-text string length (<= 9 glyph slots)

    // caption/vqa/classify render at grid*cell_px; video frames at
    // 2*cell_px; scene-text at a fixed 3x3 grid of 4px glyph slots.
    int image_size() const {
        switch (mode) {
            case SynthMode::video: return 2 * cell_px;
            case SynthMode::scene_text: return 12;
            default: return grid * cell_px;
        }
    }

    void validate() const {
        if (n < 1) throw ConfigError("synth: n must be >= 1");
        if (grid < 1 || cell_px < 1) throw ConfigError("synth: grid and cell_px must be >= 1");
        if (palette < 2) throw ConfigError("synth: palette needs at least 2 colors");
        if (frames < 1) throw ConfigError("synth: frames must be >= 1");
        if (mode == SynthMode::scene_text && (text_len < 1 || text_len > 9))
            throw ConfigError("synth: scene-text length must be in [1,9]");
    }
};

// Single-word color names for the grid tasks; values spread over (0,1].
inline const std::vector<std::string>& grid_palette_names() {
    static const std::vector<std::string> names = {"red",  "green",  "blue",   "yellow",
                                                   "cyan", "purple", "orange", "white"};
    return names;
}

// Classification labels include multi-word names so the whitespace
// matching rule gets exercised.
inline const std::vector<std::string>& classify_palette_names() {
    static const std::vector<std::string> names = {"red",         "green",      "blue",
                                                   "light blue",  "dark red",   "yellow",
                                                   "light green", "dark blue"};
    return names;
}

inline const std::string& scene_text_alphabet() {
    static const std::string a = "abcdefghijkl";
    return a;
}

inline std::vector<std::string> synth_labels(const SynthConfig& cfg) {
    const auto& names = cfg.mode == SynthMode::classify ? classify_palette_names() : grid_palette_names();
    if (cfg.palette > static_cast<int>(names.size()))
        throw ConfigError("synth: palette larger than the available color list");
    return {names.begin(), names.begin() + cfg.palette};
}

struct SyntheticSample {
    ImageGrid image;
    std::vector<ImageGrid> frames;
    std::string caption;
    std::optional<std::string> question;
    std::optional<std::string> answer;
    std::optional<std::string> label;

    TrainSample to_train_sample() const { return {image, frames, caption, question, answer}; }
};

namespace detail {

inline float color_value(int color, int palette) { return static_cast<float>(color + 1) / palette; }

inline ImageGrid solid_image(int side, float value) {
    return {side, side, std::vector<float>(static_cast<size_t>(side) * side, value)};
}

inline ImageGrid cell_grid_image(const std::vector<int>& cells, const SynthConfig& cfg) {
    const int side = cfg.grid * cfg.cell_px;
    ImageGrid img{side, side, std::vector<float>(static_cast<size_t>(side) * side)};
    for (int r = 0; r < cfg.grid; ++r)
        for (int c = 0; c < cfg.grid; ++c) {
            const float v = color_value(cells[static_cast<size_t>(r * cfg.grid + c)], cfg.palette);
            for (int y = 0; y < cfg.cell_px; ++y)
                for (int x = 0; x < cfg.cell_px; ++x)
                    img.pixels[static_cast<size_t>(r * cfg.cell_px + y) * side + c * cfg.cell_px + x] = v;
        }
    return img;
}

// Fixed 4x4 binary glyph per character, derived from its code point. The
// alphabet's twelve patterns are pairwise distinct (asserted in tests).
inline ImageGrid glyph(char ch) {
    ImageGrid g{4, 4, std::vector<float>(16, 0.f)};
    const uint64_t bits = mix_seed(0x5ce11e87u, static_cast<uint64_t>(ch));
    for (int i = 0; i < 16; ++i) g.pixels[static_cast<size_t>(i)] = (bits >> i) & 1 ? 1.f : 0.f;
    return g;
}

}  // namespace detail

// Deterministic for (seed, index): regenerating any prefix or subset of a
// dataset yields identical samples.
inline std::vector<SyntheticSample> synth_dataset(const SynthConfig& cfg) {
    cfg.validate();
    const auto labels = synth_labels(cfg);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<size_t>(cfg.n));
    for (int i = 0; i < cfg.n; ++i) {
        std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<uint64_t>(i)));
        SyntheticSample s;
        switch (cfg.mode) {
            case SynthMode::caption:
            case SynthMode::vqa: {
                std::vector<int> cells(static_cast<size_t>(cfg.grid) * cfg.grid);
                for (auto& c : cells) c = static_cast<int>(rng() % cfg.palette);
                s.image = detail::cell_grid_image(cells, cfg);
                std::string cap;
                for (size_t ci = 0; ci < cells.size(); ++ci) {
                    if (ci) cap += ' ';
                    cap += labels[static_cast<size_t>(cells[ci])];
                }
                s.caption = cap;
                if (cfg.mode == SynthMode::vqa) {
                    const int r = static_cast<int>(rng() % cfg.grid);
                    const int c = static_cast<int>(rng() % cfg.grid);
                    s.question = "cell " + std::to_string(r) + " " + std::to_string(c);
                    s.answer = labels[static_cast<size_t>(cells[static_cast<size_t>(r * cfg.grid + c)])];
                }
                break;
            }
            case SynthMode::video: {
                std::string cap;
                for (int f = 0; f < cfg.frames; ++f) {
                    const int color = static_cast<int>(rng() % cfg.palette);
                    s.frames.push_back(
                        detail::solid_image(cfg.image_size(), detail::color_value(color, cfg.palette)));
                    if (f) cap += ' ';
                    cap += labels[static_cast<size_t>(color)];
                }
                s.caption = cap;
                break;
            }
            case SynthMode::classify: {
                const int color = static_cast<int>(rng() % cfg.palette);
                s.image = detail::solid_image(cfg.image_size(), detail::color_value(color, cfg.palette));
                s.label = labels[static_cast<size_t>(color)];
                s.caption = *s.label;
                break;
            }
            case SynthMode::scene_text: {
                const auto& alpha = scene_text_alphabet();
                std::string text;
                for (int t = 0; t < cfg.text_len; ++t) text += alpha[rng() % alpha.size()];
                const int side = cfg.image_size();
                ImageGrid img{side, side, std::vector<float>(static_cast<size_t>(side) * side, 0.f)};
                for (int t = 0; t < cfg.text_len; ++t) {
                    const ImageGrid g = detail::glyph(text[static_cast<size_t>(t)]);
                    const int oy = (t / 3) * 4, ox = (t % 3) * 4;
                    for (int y = 0; y < 4; ++y)
                        for (int x = 0; x < 4; ++x)
                            img.pixels[static_cast<size_t>(oy + y) * side + ox + x] =
                                g.pixels[static_cast<size_t>(y * 4 + x)];
                }
                s.image = std::move(img);
                s.caption = text;
                break;
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset format: one JSONL file per trunk plus a JSON manifest.
// Image payloads are base64-encoded little-endian float32.
// ---------------------------------------------------------------------------

namespace b64 {

inline const char* alphabet() { return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"; }

inline std::string encode(const uint8_t* data, size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (size_t i = 0; i < len; i += 3) {
        uint32_t v = static_cast<uint32_t>(data[i]) << 16;
        if (i + 1 < len) v |= static_cast<uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(alphabet()[(v >> 18) & 63]);
        out.push_back(alphabet()[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? alphabet()[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? alphabet()[v & 63] : '=');
    }
    return out;
}

inline std::vector<uint8_t> decode(const std::string& text) {
    if (text.size() % 4 != 0) throw InputError("invalid base64 length");
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw InputError("invalid base64 input");
    };
    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        const int a = val(text[i]), b = val(text[i + 1]), c = val(text[i + 2]), d = val(text[i + 3]);
        if (a < 0 || b < 0) throw InputError("invalid base64 padding");
        out.push_back(static_cast<uint8_t>((a << 2) | (b >> 4)));
        if (c >= 0) out.push_back(static_cast<uint8_t>(((b & 15) << 4) | (c >> 2)));
        if (c >= 0 && d >= 0) out.push_back(static_cast<uint8_t>(((c & 3) << 6) | d));
    }
    return out;
}

}  // namespace b64

inline nlohmann::json image_to_json(const ImageGrid& img) {
    static_assert(sizeof(float) == 4);
    return {{"shape", {img.height, img.width}},
            {"data", b64::encode(reinterpret_cast<const uint8_t*>(img.pixels.data()),
                                 img.pixels.size() * sizeof(float))}};
}

inline ImageGrid image_from_json(const nlohmann::json& j) {
    ImageGrid img;
    img.height = j.at("shape").at(0).get<int>();
    img.width = j.at("shape").at(1).get<int>();
    const auto bytes = b64::decode(j.at("data").get<std::string>());
    if (bytes.size() != static_cast<size_t>(img.height) * img.width * sizeof(float))
        throw InputError("image payload size does not match its shape");
    img.pixels.resize(static_cast<size_t>(img.height) * img.width);
    std::memcpy(img.pixels.data(), bytes.data(), bytes.size());
    return img;
}

inline nlohmann::json sample_to_json(const SyntheticSample& s) {
    nlohmann::json j;
    if (!s.frames.empty()) {
        j["frames"] = nlohmann::json::array();
        for (const auto& f : s.frames) j["frames"].push_back(image_to_json(f));
    } else {
        j["image"] = image_to_json(s.image);
    }
    j["caption"] = s.caption;
    if (s.question) j["question"] = *s.question;
    if (s.answer) j["answer"] = *s.answer;
    if (s.label) j["label"] = *s.label;
    return j;
}

inline SyntheticSample sample_from_json(const nlohmann::json& j) {
    SyntheticSample s;
    if (j.contains("frames"))
        for (const auto& f : j["frames"]) s.frames.push_back(image_from_json(f));
    if (j.contains("image")) s.image = image_from_json(j["image"]);
    s.caption = j.at("caption").get<std::string>();
    if (j.contains("question")) s.question = j["question"].get<std::string>();
    if (j.contains("answer")) s.answer = j["answer"].get<std::string>();
    if (j.contains("label")) s.label = j["label"].get<std::string>();
    return s;
}

struct DiskManifest {
    int64_t trunk_size = 0;
    int64_t total = 0;
    std::string mode;
    struct TrunkFile {
        std::string file;
        int64_t count = 0;
    };
    std::vector<TrunkFile> trunks;
};

inline std::string trunk_file_name(int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "trunk_%05lld.jsonl", static_cast<long long>(index));
    return buf;
}

inline void write_dataset(const std::string& dir, const std::vector<SyntheticSample>& samples,
                          int64_t trunk_size, const std::string& mode,
                          const std::vector<std::string>* labels = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir);
    const auto total = static_cast<int64_t>(samples.size());
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["trunk_size"] = trunk_size;
    manifest["total"] = total;
    manifest["mode"] = mode;
    manifest["trunks"] = nlohmann::json::array();
    for (int64_t b = 0, ti = 0; b < total; b += trunk_size, ++ti) {
        const int64_t e = std::min(b + trunk_size, total);
        const std::string name = trunk_file_name(ti);
        std::ofstream f(fs::path(dir) / name, std::ios::binary);
        if (!f) throw IoError("cannot write " + name);
        for (int64_t i = b; i < e; ++i) f << sample_to_json(samples[static_cast<size_t>(i)]).dump() << '\n';
        manifest["trunks"].push_back({{"file", name}, {"count", e - b}});
    }
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!mf) throw IoError("cannot write manifest.json");
    mf << manifest.dump(2) << '\n';
    if (labels) {
        std::ofstream lf(fs::path(dir) / "labels.txt", std::ios::binary);
        if (!lf) throw IoError("cannot write labels.txt");
        for (const auto& l : *labels) lf << l << '\n';
    }
}

inline DiskManifest read_dataset_manifest(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot read manifest.json in " + dir);
    nlohmann::json j;
    f >> j;
    DiskManifest m;
    m.trunk_size = j.at("trunk_size").get<int64_t>();
    m.total = j.at("total").get<int64_t>();
    m.mode = j.value("mode", "caption");
    for (const auto& t : j.at("trunks"))
        m.trunks.push_back({t.at("file").get<std::string>(), t.at("count").get<int64_t>()});
    return m;
}

inline std::vector<SyntheticSample> read_trunk_file(const std::string& dir, const std::string& file) {
    std::ifstream f(std::filesystem::path(dir) / file, std::ios::binary);
    if (!f) throw IoError("cannot read trunk file " + file);
    std::vector<SyntheticSample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(sample_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

// Record range [begin, end) across trunk files, for topologies whose
// shard boundaries straddle the stored trunks.
inline std::vector<SyntheticSample> read_records(const std::string& dir, const DiskManifest& m, int64_t begin,
                                                 int64_t end) {
    if (begin < 0 || end > m.total || begin > end) throw InputError("read_records: range outside dataset");
    std::vector<SyntheticSample> out;
    int64_t at = 0;
    for (const auto& t : m.trunks) {
        const int64_t t_end = at + t.count;
        if (t_end > begin && at < end) {
            const auto items = read_trunk_file(dir, t.file);
            const int64_t lo = std::max(begin, at) - at;
            const int64_t hi = std::min(end, t_end) - at;
            for (int64_t i = lo; i < hi; ++i) out.push_back(items[static_cast<size_t>(i)]);
        }
        at = t_end;
        if (at >= end) break;
    }
    return out;
}

inline std::vector<std::string> read_labels_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read labels file " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(line);
    if (out.empty()) throw InputError("labels file " + path + " is empty");
    return out;
}

}  // namespace pixcap
