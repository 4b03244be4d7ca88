#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvc/mask.hpp"
#include "kvc/rng.hpp"
#include "json.hpp"

namespace kvc {

enum class Role : std::uint8_t { Normal, CL, CR };

std::string to_string(Role role);

struct CompressionConfig {
    double ratio = 0.0;
    std::size_t max_span_len = 25;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Span {
    std::size_t start = 0;
    std::size_t len = 0;

    std::size_t end() const noexcept { return start + len; }
    friend bool operator==(const Span&, const Span&) = default;
};

struct SpanSample {
    std::vector<Span> spans;  // sorted by start
    std::size_t target = 0;   // floor(r * L)
    std::size_t covered = 0;
    bool exhausted = false;   // target not reachable, coverage is the best placement found
};

SpanSample sample_spans(std::size_t length, const CompressionConfig& cfg);
SpanSample sample_spans(std::size_t length, double ratio, std::size_t max_span_len, Rng& rng);

inline constexpr std::size_t kSentinelOrigin = std::numeric_limits<std::size_t>::max();

struct SpanEntry {
    std::size_t cl = 0;
    std::vector<std::size_t> interior;
    std::size_t cr = 0;
};

struct TransformedSeq {
    std::vector<std::int32_t> tokens;
    std::vector<Role> roles;
    std::vector<std::int32_t> pos_ids;
    std::vector<SpanEntry> span_table;
    std::vector<std::size_t> origin_map;  // original index, kSentinelOrigin for <CL>/<CR>

    std::size_t size() const noexcept { return tokens.size(); }
    std::size_t normal_count() const noexcept;
};

TransformedSeq identity_transform(std::span<const std::int32_t> tokens);
TransformedSeq transform(std::span<const std::int32_t> tokens, std::span<const Span> spans, std::int32_t cl_id,
                         std::int32_t cr_id);
std::vector<std::int32_t> strip_sentinels(const TransformedSeq& seq);

// Indices still needed once every span is closed: normals outside spans and
// every <CR>.
std::vector<std::size_t> retained_indices(const TransformedSeq& seq);
// <CL> and interior indices of span s.
std::vector<std::size_t> evictable_indices(const SpanEntry& span);

AttentionMask build_compression_mask(const TransformedSeq& seq);
AttentionMask build_local_mask(std::size_t length, double ratio);
AttentionMask build_scattered_mask(std::size_t length, double ratio, std::uint64_t seed);
AttentionMask build_scattered_mask(std::size_t length, double ratio, Rng& rng);

nlohmann::json to_json(const TransformedSeq& seq);
nlohmann::json to_json(const AttentionMask& mask);
TransformedSeq transformed_from_json(const nlohmann::json& j);

}  // namespace kvc
