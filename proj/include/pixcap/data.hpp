#pragma once

// Trunk-based sharded streaming loader.
//
// A node's shard is consumed trunk by trunk: each trunk is shuffled with a
// permutation keyed by (seed, trunk), split evenly among the node's ranks,
// and fetched ahead of consumption by a single producer thread. At most 7
// future trunks are prefetched and at most 12 live in local storage; the
// oldest fully-consumed trunk is evicted first. Fetching goes through a
// pluggable interface so latency can be injected and the bounds tested
// without real remote storage.

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "pixcap/error.hpp"

namespace pixcap {

struct TrunkRange {
    int64_t begin = 0;
    int64_t end = 0;
    int64_t count() const { return end - begin; }
};

// Ordered trunk list partitioning one node's shard; every trunk except
// possibly the last holds exactly trunk_size items.
struct TrunkManifest {
    int node_id = 0;
    int64_t trunk_size = 0;
    TrunkRange shard;
    std::vector<TrunkRange> trunks;

    static TrunkManifest build(TrunkRange shard, int64_t trunk_size, int node_id = 0) {
        if (trunk_size < 1) throw InputError("trunk_size must be >= 1");
        if (shard.begin < 0 || shard.end < shard.begin) throw InputError("invalid shard range");
        TrunkManifest m;
        m.node_id = node_id;
        m.trunk_size = trunk_size;
        m.shard = shard;
        for (int64_t b = shard.begin; b < shard.end; b += trunk_size)
            m.trunks.push_back({b, std::min(b + trunk_size, shard.end)});
        return m;
    }

    void validate() const {
        int64_t expect = shard.begin;
        for (size_t i = 0; i < trunks.size(); ++i) {
            if (trunks[i].begin != expect || trunks[i].count() < 1)
                throw ContractError("manifest trunks do not partition the shard");
            if (trunks[i].count() != trunk_size && i + 1 != trunks.size())
                throw ContractError("only the last trunk may be short");
            expect = trunks[i].end;
        }
        if (expect != shard.end) throw ContractError("manifest trunks do not cover the shard");
    }
};

// Contiguous even split of [0,total) across nodes, remainder to the front.
inline std::vector<TrunkRange> shard_pairs(int64_t total, int nodes) {
    if (nodes < 1) throw InputError("shard_pairs: nodes must be >= 1");
    if (total < 0) throw InputError("shard_pairs: negative total");
    std::vector<TrunkRange> out;
    const int64_t base = total / nodes;
    const int64_t rem = total % nodes;
    int64_t at = 0;
    for (int i = 0; i < nodes; ++i) {
        const int64_t len = base + (i < rem ? 1 : 0);
        out.push_back({at, at + len});
        at += len;
    }
    return out;
}

namespace detail {

// splitmix64 finalizer; decouples derived seeds from raw (seed, salt).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Deterministic Fisher-Yates permutation of the trunk's global indices,
// keyed by (seed, trunk_id). Cost is proportional to the trunk, never the
// dataset.
inline std::vector<int64_t> trunk_shuffle(const TrunkRange& trunk, uint64_t seed, int64_t trunk_id) {
    std::vector<int64_t> idx(static_cast<size_t>(trunk.count()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = trunk.begin + static_cast<int64_t>(i);
    std::mt19937_64 rng(detail::mix_seed(seed, static_cast<uint64_t>(trunk_id)));
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    return idx;
}

// Even contiguous split among ranks, remainder to the front; the union
// preserves the input order per rank.
template <typename Item>
std::vector<std::vector<Item>> rank_split(const std::vector<Item>& items, int ranks) {
    if (ranks < 1) throw InputError("rank_split: ranks must be >= 1");
    std::vector<std::vector<Item>> out(static_cast<size_t>(ranks));
    const size_t base = items.size() / static_cast<size_t>(ranks);
    const size_t rem = items.size() % static_cast<size_t>(ranks);
    size_t at = 0;
    for (int r = 0; r < ranks; ++r) {
        const size_t len = base + (static_cast<size_t>(r) < rem ? 1 : 0);
        out[static_cast<size_t>(r)].assign(items.begin() + at, items.begin() + at + len);
        at += len;
    }
    return out;
}

struct LoaderLimits {
    int max_prefetch_ahead = 7;
    int max_resident = 12;
};

struct LoaderOptions {
    LoaderLimits limits;
    bool permute_trunk_order = false;  // optional per-epoch trunk order reshuffle
    int epoch = 0;
};

struct LoaderStats {
    int prefetch_high_water = 0;  // max (newest fetched - oldest in-progress trunk)
    int resident_high_water = 0;  // max trunks simultaneously in local storage
    int64_t fetch_count = 0;
    std::vector<int64_t> rank_stall_ns;  // time spent blocked on a missing trunk
};

// Snapshot of the loader for introspection.
struct LoaderState {
    int64_t current_trunk = 0;            // oldest trunk any rank still consumes
    std::vector<int64_t> prefetched;      // resident trunks ahead of current
    std::vector<int64_t> retained;        // all resident trunks
    std::vector<int64_t> rank_cursors;    // per-rank current trunk position
    uint64_t seed = 0;
};

// One node's epoch stream. One producer thread prefetches trunks; per-rank
// consumers call next(rank) concurrently. Delivery order per rank is a
// pure function of (seed, manifest, ranks) regardless of scheduling.
template <typename Item>
class NodeStreamer {
public:
    using FetchFn = std::function<std::vector<Item>(int64_t trunk_index, const TrunkRange&)>;

    NodeStreamer(const TrunkManifest& manifest, int ranks, uint64_t seed, FetchFn fetch,
                 LoaderOptions options = {})
        : manifest_(manifest),
          ranks_(ranks),
          seed_(detail::mix_seed(seed, static_cast<uint64_t>(manifest.node_id))),
          fetch_(std::move(fetch)),
          opt_(options) {
        if (ranks_ < 1) throw InputError("NodeStreamer: ranks must be >= 1");
        manifest_.validate();
        const auto n = static_cast<int64_t>(manifest_.trunks.size());
        order_.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order_[static_cast<size_t>(i)] = i;
        if (opt_.permute_trunk_order) {
            std::mt19937_64 rng(detail::mix_seed(seed_, 0x517cc1b727220a95ULL + static_cast<uint64_t>(opt_.epoch)));
            for (size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng() % i]);
        }
        cursors_.assign(static_cast<size_t>(ranks_), {0, 0});
        stats_.rank_stall_ns.assign(static_cast<size_t>(ranks_), 0);
        producer_ = std::thread([this] { produce(); });
        // Warm the prefetch window before serving so consumption starts
        // against fetched data.
        const int64_t prime =
            std::min<int64_t>({n, opt_.limits.max_prefetch_ahead + 1, opt_.limits.max_resident});
        std::unique_lock<std::mutex> lk(mu_);
        cv_consumer_.wait(lk, [&] { return stats_.fetch_count >= prime || stop_ || producer_error_; });
    }

    ~NodeStreamer() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_producer_.notify_all();
        cv_consumer_.notify_all();
        if (producer_.joinable()) producer_.join();
    }

    NodeStreamer(const NodeStreamer&) = delete;
    NodeStreamer& operator=(const NodeStreamer&) = delete;

    int ranks() const { return ranks_; }
    int64_t trunk_count() const { return static_cast<int64_t>(manifest_.trunks.size()); }

    // Yields the rank's next item, or nullopt at epoch end.
    std::optional<Item> next(int rank) {
        if (rank < 0 || rank >= ranks_) throw InputError("next: rank out of range");
        std::unique_lock<std::mutex> lk(mu_);
        auto& cur = cursors_[static_cast<size_t>(rank)];
        while (true) {
            if (producer_error_) std::rethrow_exception(producer_error_);
            if (cur.pos >= trunk_count()) return std::nullopt;
            Resident* res = find_resident(cur.pos);
            if (res == nullptr) {
                const auto t0 = std::chrono::steady_clock::now();
                cv_consumer_.wait(
                    lk, [&] { return stop_ || producer_error_ || find_resident(cur.pos) != nullptr; });
                stats_.rank_stall_ns[static_cast<size_t>(rank)] +=
                    std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
                        .count();
                if (producer_error_) std::rethrow_exception(producer_error_);
                if (stop_ && find_resident(cur.pos) == nullptr) return std::nullopt;
                continue;
            }
            const auto& slice = res->slices[static_cast<size_t>(rank)];
            if (cur.offset < static_cast<int64_t>(slice.size())) {
                Item item = slice[static_cast<size_t>(cur.offset++)];
                if (cur.offset == static_cast<int64_t>(slice.size())) advance_rank(*res, cur);
                return item;
            }
            // Empty slice for this rank (fewer items than ranks).
            advance_rank(*res, cur);
        }
    }

    LoaderStats stats() const {
        std::lock_guard<std::mutex> lk(mu_);
        return stats_;
    }

    LoaderState state() const {
        std::lock_guard<std::mutex> lk(mu_);
        LoaderState s;
        s.seed = seed_;
        s.current_trunk = min_rank_pos();
        for (const auto& r : resident_) {
            s.retained.push_back(r.pos);
            if (r.pos > s.current_trunk) s.prefetched.push_back(r.pos);
        }
        for (const auto& c : cursors_) s.rank_cursors.push_back(c.pos);
        return s;
    }

private:
    struct Resident {
        int64_t pos = 0;  // visit position
        std::vector<std::vector<Item>> slices;
        int done_ranks = 0;
    };
    struct Cursor {
        int64_t pos = 0;
        int64_t offset = 0;
    };

    Resident* find_resident(int64_t pos) {
        for (auto& r : resident_)
            if (r.pos == pos) return &r;
        return nullptr;
    }
    const Resident* find_resident(int64_t pos) const {
        for (const auto& r : resident_)
            if (r.pos == pos) return &r;
        return nullptr;
    }

    int64_t min_rank_pos() const {
        int64_t m = trunk_count();
        for (const auto& c : cursors_) m = std::min(m, c.pos);
        return m;
    }

    void advance_rank(Resident& res, Cursor& cur) {
        ++res.done_ranks;
        cur.pos += 1;
        cur.offset = 0;
        // The producer gate depends on min rank position as well as full
        // consumption, so every advance may unblock it.
        cv_producer_.notify_all();
    }

    void produce() {
        try {
            produce_impl();
        } catch (...) {
            std::lock_guard<std::mutex> lk(mu_);
            producer_error_ = std::current_exception();
            cv_consumer_.notify_all();
        }
    }

    void produce_impl() {
        const int64_t n = trunk_count();
        for (int64_t v = 0; v < n; ++v) {
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_producer_.wait(lk, [&] {
                    if (stop_) return true;
                    if (v - min_rank_pos() > opt_.limits.max_prefetch_ahead) return false;
                    if (static_cast<int>(resident_.size()) < opt_.limits.max_resident) return true;
                    return resident_.front().done_ranks == ranks_;  // oldest evictable
                });
                if (stop_) return;
                while (static_cast<int>(resident_.size()) >= opt_.limits.max_resident)
                    resident_.pop_front();  // oldest first; guarded fully consumed above
            }
            // Fetch outside the lock so consumers keep draining resident
            // trunks during the (possibly slow) download.
            const int64_t trunk_idx = order_[static_cast<size_t>(v)];
            const TrunkRange range = manifest_.trunks[static_cast<size_t>(trunk_idx)];
            std::vector<Item> items = fetch_(trunk_idx, range);
            if (static_cast<int64_t>(items.size()) != range.count())
                throw ContractError("fetch returned " + std::to_string(items.size()) + " items for a trunk of " +
                                    std::to_string(range.count()));
            const auto perm = trunk_shuffle(range, seed_, trunk_idx);
            std::vector<Item> shuffled(items.size());
            for (size_t i = 0; i < perm.size(); ++i)
                shuffled[i] = std::move(items[static_cast<size_t>(perm[i] - range.begin)]);

            Resident res;
            res.pos = v;
            res.slices = rank_split(shuffled, ranks_);
            {
                std::lock_guard<std::mutex> lk(mu_);
                resident_.push_back(std::move(res));
                ++stats_.fetch_count;
                stats_.resident_high_water =
                    std::max(stats_.resident_high_water, static_cast<int>(resident_.size()));
                stats_.prefetch_high_water = std::max(
                    stats_.prefetch_high_water, static_cast<int>(v - std::min(min_rank_pos(), v)));
            }
            cv_consumer_.notify_all();
        }
    }

    TrunkManifest manifest_;
    int ranks_;
    uint64_t seed_;
    FetchFn fetch_;
    LoaderOptions opt_;
    std::vector<int64_t> order_;

    mutable std::mutex mu_;
    std::condition_variable cv_producer_, cv_consumer_;
    std::deque<Resident> resident_;
    std::vector<Cursor> cursors_;
    LoaderStats stats_;
    bool stop_ = false;
    std::exception_ptr producer_error_;
    std::thread producer_;
};

// Builds the node's epoch stream; see NodeStreamer for the contract.
template <typename Item>
std::unique_ptr<NodeStreamer<Item>> stream_epoch(const TrunkManifest& manifest, int ranks, uint64_t seed,
                                                 typename NodeStreamer<Item>::FetchFn fetch,
                                                 LoaderOptions options = {}) {
    return std::make_unique<NodeStreamer<Item>>(manifest, ranks, seed, std::move(fetch), options);
}

}  // namespace pixcap
