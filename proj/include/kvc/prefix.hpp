#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "kvc/compress.hpp"
#include "kvc/kvcache.hpp"
#include "kvc/model.hpp"

namespace kvc {

enum class PrefillMode : std::uint8_t { OneGo, Progressive };

struct PrefillOptions {
    PrefillMode mode = PrefillMode::OneGo;
    std::size_t block = 0;  // PROGRESSIVE only
    std::shared_ptr<ByteMeter> meter;
};

struct PrefixCache {
    KVCache cache;
    std::vector<std::size_t> visible;  // alive indices once the prefix is in
    std::size_t peak_bytes = 0;
    Tensor logits;                     // [prefix × V], row per transformed position
    std::size_t last_normal = 0;       // transformed index of the final NORMAL token
};

// Feeds a transformed prefix through the model under the compression mask and
// frees the <CL> and interior entries of every closed span.
//  ONE_GO: whole prefix, then evict.
//  PROGRESSIVE: blocks of `block` positions, evicting spans whose <CR> has
//  been processed after each block.
PrefixCache compress_prefix(const ModelParams& params, const TransformedSeq& prefix, const PrefillOptions& options);

// Plain causal prefill (no spans).
PrefixCache prefill_causal(const ModelParams& params, std::span<const std::int32_t> tokens,
                           std::shared_ptr<ByteMeter> meter = nullptr);

// Local Attention prefill: forward under the local mask, then trim the cache
// to the window of the next position.
PrefixCache prefill_local(const ModelParams& params, std::span<const std::int32_t> tokens, double ratio,
                          std::shared_ptr<ByteMeter> meter = nullptr);

}  // namespace kvc
