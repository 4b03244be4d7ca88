#include "kvc/kvcache.hpp"

#include <algorithm>
#include <string>

#include "kvc/error.hpp"
#include "kvc/mask.hpp"

namespace kvc {

std::size_t cache_size_bytes(const CacheShape& shape) {
    return shape.n_layers * 2 * shape.batch * shape.n_heads * shape.length * shape.d_head * kCacheElementBytes;
}

KVCache::KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head)
    : n_layers_(n_layers), n_heads_(n_heads), d_head_(d_head), keys_(n_layers), values_(n_layers) {
    if (n_layers == 0 || n_heads == 0 || d_head == 0) {
        throw ConfigError("KVCache dimensions must be positive");
    }
}

KVCache::EntryState KVCache::state(std::size_t index) const noexcept {
    return index < states_.size() ? states_[index] : EntryState::Absent;
}

std::size_t KVCache::bytes_per_entry() const noexcept {
    return cache_size_bytes({n_layers_, 1, n_heads_, 1, d_head_});
}

std::size_t KVCache::bytes() const noexcept { return bytes_per_entry() * indices_.size(); }

std::size_t KVCache::slot_of(std::size_t index) const {
    if (!is_alive(index)) {
        throw StaleIndexError("cache index " + std::to_string(index) +
                              (state(index) == EntryState::Evicted ? " was evicted" : " was never written"));
    }
    const auto it = std::lower_bound(indices_.begin(), indices_.end(), index);
    return static_cast<std::size_t>(it - indices_.begin());
}

std::span<const float> KVCache::read_key(std::size_t layer, std::size_t index) const {
    return {keys_.at(layer).data() + slot_of(index) * width(), width()};
}

std::span<const float> KVCache::read_value(std::size_t layer, std::size_t index) const {
    return {values_.at(layer).data() + slot_of(index) * width(), width()};
}

void KVCache::append(std::size_t count, std::span<const float> keys, std::span<const float> values) {
    const std::size_t block = count * width();
    if (keys.size() != n_layers_ * block || values.size() != n_layers_ * block) {
        throw DimensionError("KVCache::append: expected " + std::to_string(n_layers_ * block) + " floats per buffer");
    }
    for (std::size_t l = 0; l < n_layers_; ++l) {
        keys_[l].insert(keys_[l].end(), keys.begin() + static_cast<std::ptrdiff_t>(l * block),
                        keys.begin() + static_cast<std::ptrdiff_t>((l + 1) * block));
        values_[l].insert(values_[l].end(), values.begin() + static_cast<std::ptrdiff_t>(l * block),
                          values.begin() + static_cast<std::ptrdiff_t>((l + 1) * block));
    }
    for (std::size_t i = 0; i < count; ++i) {
        indices_.push_back(states_.size());
        states_.push_back(EntryState::Alive);
    }
    peak_bytes_ = std::max(peak_bytes_, bytes());
    if (meter_) {
        meter_->add(count * bytes_per_entry());
    }
}

void KVCache::evict(std::span<const std::size_t> indices) {
    if (indices.empty()) {
        return;
    }
    std::vector<std::size_t> sorted(indices.begin(), indices.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw StaleIndexError("KVCache::evict: index listed twice");
    }
    for (std::size_t index : sorted) {
        slot_of(index);  // throws on stale
    }
    const std::size_t w = width();
    std::size_t write = 0;
    std::size_t next_dead = 0;
    for (std::size_t read = 0; read < indices_.size(); ++read) {
        if (next_dead < sorted.size() && indices_[read] == sorted[next_dead]) {
            ++next_dead;
            continue;
        }
        if (write != read) {
            indices_[write] = indices_[read];
            for (std::size_t l = 0; l < n_layers_; ++l) {
                std::copy_n(keys_[l].begin() + static_cast<std::ptrdiff_t>(read * w), w,
                            keys_[l].begin() + static_cast<std::ptrdiff_t>(write * w));
                std::copy_n(values_[l].begin() + static_cast<std::ptrdiff_t>(read * w), w,
                            values_[l].begin() + static_cast<std::ptrdiff_t>(write * w));
            }
        }
        ++write;
    }
    indices_.resize(write);
    for (std::size_t l = 0; l < n_layers_; ++l) {
        keys_[l].resize(write * w);
        values_[l].resize(write * w);
        keys_[l].shrink_to_fit();
        values_[l].shrink_to_fit();
    }
    for (std::size_t index : sorted) {
        states_[index] = EntryState::Evicted;
    }
    if (meter_) {
        meter_->remove(sorted.size() * bytes_per_entry());
    }
}

void KVCache::attach_meter(std::shared_ptr<ByteMeter> meter) {
    meter_ = std::move(meter);
    if (meter_) {
        meter_->add(bytes());
    }
}

std::vector<std::size_t> local_fifo_step(KVCache& cache, std::size_t t, double r) {
    const std::size_t start = local_window_start(t, r);
    std::vector<std::size_t> dropped;
    for (std::size_t index : cache.alive_indices()) {
        if (index >= start) {
            break;
        }
        dropped.push_back(index);
    }
    cache.evict(dropped);
    return dropped;
}

}  // namespace kvc
