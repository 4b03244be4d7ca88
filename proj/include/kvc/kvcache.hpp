#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace kvc {

// Dimensions of a key/value cache tensor laid out as
// (layers, 2, batch, heads, length, d_head).
struct CacheShape {
    std::size_t n_layers = 0;
    std::size_t batch = 1;
    std::size_t n_heads = 0;
    std::size_t length = 0;
    std::size_t d_head = 0;
};

inline constexpr std::size_t kCacheElementBytes = sizeof(float);

// Exact byte size of the cache tensor described by `shape`.
std::size_t cache_size_bytes(const CacheShape& shape);

// Running total shared by several caches (one per batch row) so a profiler can
// read the peak of their combined footprint.
struct ByteMeter {
    std::size_t current = 0;
    std::size_t peak = 0;

    void add(std::size_t bytes) {
        current += bytes;
        peak = std::max(peak, current);
    }
    void remove(std::size_t bytes) { current -= bytes; }
};

// Key/value memory for one sequence. Entries are addressed by their index in
// the (transformed) sequence; each index is written once and, once evicted,
// can never be read again. Storage is compacted on eviction, so the memory in
// use always matches the alive count.
class KVCache {
public:
    enum class EntryState : std::uint8_t { Absent, Alive, Evicted };

    KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head);

    std::size_t n_layers() const noexcept { return n_layers_; }
    std::size_t n_heads() const noexcept { return n_heads_; }
    std::size_t d_head() const noexcept { return d_head_; }
    std::size_t width() const noexcept { return n_heads_ * d_head_; }

    // Sequence index the next append receives.
    std::size_t next_index() const noexcept { return states_.size(); }
    std::size_t alive_count() const noexcept { return indices_.size(); }
    std::span<const std::size_t> alive_indices() const noexcept { return indices_; }
    EntryState state(std::size_t index) const noexcept;
    bool is_alive(std::size_t index) const noexcept { return state(index) == EntryState::Alive; }

    std::size_t bytes() const noexcept;
    std::size_t peak_bytes() const noexcept { return peak_bytes_; }
    std::size_t bytes_per_entry() const noexcept;

    // Rows of layer `layer`: alive_count() × width(), ordered like alive_indices().
    const float* keys(std::size_t layer) const noexcept { return keys_[layer].data(); }
    const float* values(std::size_t layer) const noexcept { return values_[layer].data(); }

    // Slot of an alive index in the layer buffers; throws StaleIndexError otherwise.
    std::size_t slot_of(std::size_t index) const;
    std::span<const float> read_key(std::size_t layer, std::size_t index) const;
    std::span<const float> read_value(std::size_t layer, std::size_t index) const;

    // Appends entries for `count` consecutive new indices. Both buffers hold
    // n_layers blocks of count × width() floats (layer-major).
    void append(std::size_t count, std::span<const float> keys, std::span<const float> values);

    // Kills the given alive indices. All-or-nothing: a stale index in the set
    // raises StaleIndexError before anything changes.
    void evict(std::span<const std::size_t> indices);

    void attach_meter(std::shared_ptr<ByteMeter> meter);

private:
    std::size_t n_layers_;
    std::size_t n_heads_;
    std::size_t d_head_;
    std::vector<EntryState> states_;
    std::vector<std::size_t> indices_;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
    std::size_t peak_bytes_ = 0;
    std::shared_ptr<ByteMeter> meter_;
};

// Local-attention FIFO maintenance: before token t is appended, drop every
// alive index below floor(t * r). Returns the evicted indices.
std::vector<std::size_t> local_fifo_step(KVCache& cache, std::size_t t, double r);

}  // namespace kvc
