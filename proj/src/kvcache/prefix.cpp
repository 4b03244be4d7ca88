#include "kvc/prefix.hpp"

#include <algorithm>

#include "kvc/error.hpp"

namespace kvc {

namespace {

void copy_rows(const Tensor& src, Tensor& dst, std::size_t row_begin) {
    std::copy(src.data().begin(), src.data().end(), dst.raw() + row_begin * dst.cols());
}

}  // namespace

PrefixCache compress_prefix(const ModelParams& params, const TransformedSeq& prefix, const PrefillOptions& options) {
    const ModelConfig& cfg = params.config();
    if (prefix.size() == 0) {
        throw ContractError("compress_prefix: empty prefix");
    }
    if (options.mode == PrefillMode::Progressive && options.block == 0) {
        throw ConfigError("progressive prefill needs block >= 1");
    }
    PrefixCache out{make_cache(cfg), {}, 0, Tensor({prefix.size(), cfg.vocab_size}), 0};
    if (options.meter) {
        out.cache.attach_meter(options.meter);
    }
    const AttentionMask mask = build_compression_mask(prefix);
    const VisibilityFn visible = [&mask](std::size_t q, std::size_t k) { return mask.allowed(q, k); };
    const std::size_t block = options.mode == PrefillMode::OneGo ? prefix.size() : options.block;

    std::size_t next_span = 0;
    for (std::size_t begin = 0; begin < prefix.size(); begin += block) {
        const std::size_t count = std::min(block, prefix.size() - begin);
        const auto tokens = std::span(prefix.tokens).subspan(begin, count);
        const auto pos = std::span(prefix.pos_ids).subspan(begin, count);
        StepOutput step = forward_cached(params, tokens, pos, out.cache, visible);
        copy_rows(step.logits, out.logits, begin);
        std::vector<std::size_t> dead;
        while (next_span < prefix.span_table.size() && prefix.span_table[next_span].cr < begin + count) {
            const auto ids = evictable_indices(prefix.span_table[next_span]);
            dead.insert(dead.end(), ids.begin(), ids.end());
            ++next_span;
        }
        out.cache.evict(dead);
    }
    const auto alive = out.cache.alive_indices();
    out.visible.assign(alive.begin(), alive.end());
    out.peak_bytes = out.cache.peak_bytes();
    for (std::size_t i = prefix.size(); i-- > 0;) {
        if (prefix.roles[i] == Role::Normal) {
            out.last_normal = i;
            break;
        }
    }
    return out;
}

PrefixCache prefill_causal(const ModelParams& params, std::span<const std::int32_t> tokens,
                           std::shared_ptr<ByteMeter> meter) {
    const TransformedSeq seq = identity_transform(tokens);
    return compress_prefix(params, seq, {PrefillMode::OneGo, 0, std::move(meter)});
}

PrefixCache prefill_local(const ModelParams& params, std::span<const std::int32_t> tokens, double ratio,
                          std::shared_ptr<ByteMeter> meter) {
    const ModelConfig& cfg = params.config();
    if (tokens.empty()) {
        throw ContractError("prefill_local: empty prefix");
    }
    PrefixCache out{make_cache(cfg), {}, 0, Tensor(), tokens.size() - 1};
    if (meter) {
        out.cache.attach_meter(meter);
    }
    std::vector<std::int32_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        pos[i] = static_cast<std::int32_t>(i);
    }
    const VisibilityFn visible = [ratio](std::size_t q, std::size_t k) { return k >= local_window_start(q, ratio); };
    StepOutput step = forward_cached(params, tokens, pos, out.cache, visible);
    out.logits = std::move(step.logits);
    local_fifo_step(out.cache, tokens.size(), ratio);
    const auto alive = out.cache.alive_indices();
    out.visible.assign(alive.begin(), alive.end());
    out.peak_bytes = out.cache.peak_bytes();
    return out;
}

}  // namespace kvc
