#include "kvc/compress.hpp"

#include <algorithm>
#include <cmath>

#include "kvc/error.hpp"

namespace kvc {

std::string to_string(Role role) {
    switch (role) {
        case Role::Normal: return "NORMAL";
        case Role::CL: return "CL";
        case Role::CR: return "CR";
    }
    return "?";
}

void CompressionConfig::validate() const {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ConfigError("compression ratio must satisfy 0 <= r < 1, got " + std::to_string(ratio));
    }
    if (max_span_len < 2) {
        throw ConfigError("max span length must be at least 2");
    }
}

namespace {

struct Gap {
    std::size_t begin;
    std::size_t size;
};

// Most tokens spans of length 2..l can cover inside a free run of g tokens.
std::size_t max_cover(std::size_t g, std::size_t l) {
    if (g < 2) {
        return 0;
    }
    return l == 2 ? g - g % 2 : g;
}

struct Placement {
    std::size_t gap;
    std::size_t start;
    std::size_t len;
};

class Sampler {
public:
    Sampler(std::size_t length, std::size_t l, std::size_t target) : l_(l), target_(target) {
        if (length > 1) {
            gaps_.push_back({1, length - 1});
        }
    }

    std::size_t capacity() const {
        std::size_t total = 0;
        for (const Gap& g : gaps_) {
            total += max_cover(g.size, l_);
        }
        return total;
    }

    std::size_t largest_gap() const {
        std::size_t m = 0;
        for (const Gap& g : gaps_) {
            m = std::max(m, g.size);
        }
        return m;
    }

    // Placements of `len` after which the target is still reachable.
    std::vector<Placement> feasible(std::size_t len, std::size_t covered, std::size_t cap) const {
        std::vector<Placement> out;
        for (std::size_t gi = 0; gi < gaps_.size(); ++gi) {
            const Gap& g = gaps_[gi];
            if (g.size < len) {
                continue;
            }
            const std::size_t rest = cap - max_cover(g.size, l_);
            for (std::size_t off = 0; off + len <= g.size; ++off) {
                const std::size_t reach =
                    covered + len + rest + max_cover(off, l_) + max_cover(g.size - off - len, l_);
                if (reach >= target_) {
                    out.push_back({gi, g.begin + off, len});
                }
            }
        }
        return out;
    }

    void place(const Placement& p) {
        const Gap g = gaps_[p.gap];
        std::vector<Gap> pieces;
        if (p.start > g.begin) {
            pieces.push_back({g.begin, p.start - g.begin});
        }
        const std::size_t tail = g.begin + g.size - (p.start + p.len);
        if (tail > 0) {
            pieces.push_back({p.start + p.len, tail});
        }
        gaps_.erase(gaps_.begin() + static_cast<std::ptrdiff_t>(p.gap));
        gaps_.insert(gaps_.begin() + static_cast<std::ptrdiff_t>(p.gap), pieces.begin(), pieces.end());
    }

private:
    std::size_t l_;
    std::size_t target_;
    std::vector<Gap> gaps_;
};

constexpr int kLengthRetries = 16;

}  // namespace

SpanSample sample_spans(std::size_t length, double ratio, std::size_t max_span_len, Rng& rng) {
    CompressionConfig{ratio, max_span_len, 0}.validate();
    SpanSample out;
    out.target = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(length)));
    if (out.target == 0 || length < 2) {
        return out;
    }
    std::size_t goal = out.target;
    if (max_cover(length - 1, max_span_len) < goal) {
        goal = max_cover(length - 1, max_span_len);
        out.exhausted = true;
    }
    Sampler sampler(length, max_span_len, goal);
    while (out.covered < goal) {
        const std::size_t cap = sampler.capacity();
        std::vector<Placement> options;
        for (int attempt = 0; attempt < kLengthRetries && options.empty(); ++attempt) {
            std::size_t len = static_cast<std::size_t>(rng.range(2, static_cast<std::int64_t>(max_span_len)));
            len = std::min(len, sampler.largest_gap());
            if (len >= 2) {
                options = sampler.feasible(len, out.covered, cap);
            }
        }
        if (options.empty()) {
            for (std::size_t len = 2; len <= std::min(max_span_len, sampler.largest_gap()); ++len) {
                auto more = sampler.feasible(len, out.covered, cap);
                options.insert(options.end(), more.begin(), more.end());
            }
        }
        if (options.empty()) {
            out.exhausted = true;
            break;
        }
        const Placement pick = options[rng.below(options.size())];
        out.spans.push_back({pick.start, pick.len});
        out.covered += pick.len;
        sampler.place(pick);
    }
    std::sort(out.spans.begin(), out.spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    return out;
}

SpanSample sample_spans(std::size_t length, const CompressionConfig& cfg) {
    Rng rng(cfg.seed);
    return sample_spans(length, cfg.ratio, cfg.max_span_len, rng);
}

std::size_t TransformedSeq::normal_count() const noexcept {
    return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), Role::Normal));
}

TransformedSeq identity_transform(std::span<const std::int32_t> tokens) {
    TransformedSeq seq;
    seq.tokens.assign(tokens.begin(), tokens.end());
    seq.roles.assign(tokens.size(), Role::Normal);
    seq.pos_ids.resize(tokens.size());
    seq.origin_map.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        seq.pos_ids[i] = static_cast<std::int32_t>(i);
        seq.origin_map[i] = i;
    }
    return seq;
}

TransformedSeq transform(std::span<const std::int32_t> tokens, std::span<const Span> spans, std::int32_t cl_id,
                         std::int32_t cr_id) {
    std::vector<Span> sorted(spans.begin(), spans.end());
    std::sort(sorted.begin(), sorted.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const Span& s = sorted[i];
        if (s.len < 2 || s.start < 1 || s.end() > tokens.size()) {
            throw ContractError("span [" + std::to_string(s.start) + ", +" + std::to_string(s.len) +
                                ") invalid for sequence of length " + std::to_string(tokens.size()));
        }
        if (i > 0 && sorted[i - 1].end() > s.start) {
            throw ContractError("spans overlap at original index " + std::to_string(s.start));
        }
    }
    TransformedSeq seq;
    const std::size_t n = tokens.size() + 2 * sorted.size();
    seq.tokens.reserve(n);
    seq.roles.reserve(n);
    seq.pos_ids.reserve(n);
    seq.origin_map.reserve(n);
    std::int32_t next_pos = 0;
    auto push = [&](std::int32_t tok, Role role, std::size_t origin) {
        seq.tokens.push_back(tok);
        seq.roles.push_back(role);
        seq.pos_ids.push_back(role == Role::Normal ? next_pos++ : seq.pos_ids.back());
        seq.origin_map.push_back(origin);
    };
    std::size_t si = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const bool inside = si < sorted.size() && i >= sorted[si].start;
        if (inside && i == sorted[si].start) {
            seq.span_table.push_back({seq.size(), {}, 0});
            push(cl_id, Role::CL, kSentinelOrigin);
        }
        push(tokens[i], Role::Normal, i);
        if (inside) {
            seq.span_table.back().interior.push_back(seq.size() - 1);
            if (i + 1 == sorted[si].end()) {
                seq.span_table.back().cr = seq.size();
                push(cr_id, Role::CR, kSentinelOrigin);
                ++si;
            }
        }
    }
    return seq;
}

std::vector<std::int32_t> strip_sentinels(const TransformedSeq& seq) {
    std::vector<std::int32_t> out(seq.normal_count());
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.roles[i] == Role::Normal) {
            out.at(seq.origin_map[i]) = seq.tokens[i];
        }
    }
    return out;
}

std::vector<std::size_t> evictable_indices(const SpanEntry& span) {
    std::vector<std::size_t> out;
    out.reserve(span.interior.size() + 1);
    out.push_back(span.cl);
    out.insert(out.end(), span.interior.begin(), span.interior.end());
    return out;
}

namespace {

// Span id of every position (CL, interiors, CR), -1 outside spans.
std::vector<std::ptrdiff_t> span_membership(const TransformedSeq& seq) {
    std::vector<std::ptrdiff_t> member(seq.size(), -1);
    for (std::size_t s = 0; s < seq.span_table.size(); ++s) {
        const SpanEntry& e = seq.span_table[s];
        member[e.cl] = static_cast<std::ptrdiff_t>(s);
        member[e.cr] = static_cast<std::ptrdiff_t>(s);
        for (std::size_t i : e.interior) {
            member[i] = static_cast<std::ptrdiff_t>(s);
        }
    }
    return member;
}

}  // namespace

std::vector<std::size_t> retained_indices(const TransformedSeq& seq) {
    const auto member = span_membership(seq);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.roles[i] == Role::CR || member[i] < 0) {
            out.push_back(i);
        }
    }
    return out;
}

AttentionMask build_compression_mask(const TransformedSeq& seq) {
    const std::size_t n = seq.size();
    const auto member = span_membership(seq);
    AttentionMask mask(n);
    for (std::size_t q = 0; q < n; ++q) {
        mask.set(q, q, true);
        if (seq.roles[q] == Role::CL) {
            continue;
        }
        for (std::size_t k = 0; k < q; ++k) {
            const bool own_span = member[q] >= 0 && member[k] == member[q];
            const bool open_context = seq.roles[k] == Role::CR || member[k] < 0;
            mask.set(q, k, own_span || open_context);
        }
    }
    return mask;
}

AttentionMask build_local_mask(std::size_t length, double ratio) {
    CompressionConfig{ratio, 2, 0}.validate();
    AttentionMask mask(length);
    for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t k = local_window_start(t, ratio); k <= t; ++k) {
            mask.set(t, k, true);
        }
    }
    return mask;
}

AttentionMask build_scattered_mask(std::size_t length, double ratio, Rng& rng) {
    CompressionConfig{ratio, 2, 0}.validate();
    std::vector<bool> keep(length);
    for (std::size_t k = 0; k < length; ++k) {
        keep[k] = rng.bernoulli(1.0 - ratio);
    }
    AttentionMask mask(length);
    for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t k = 0; k < t; ++k) {
            mask.set(t, k, keep[k]);
        }
        mask.set(t, t, true);
    }
    return mask;
}

AttentionMask build_scattered_mask(std::size_t length, double ratio, std::uint64_t seed) {
    Rng rng(seed);
    return build_scattered_mask(length, ratio, rng);
}

nlohmann::json to_json(const TransformedSeq& seq) {
    nlohmann::json j;
    j["tokens"] = seq.tokens;
    std::vector<std::string> roles;
    for (Role r : seq.roles) {
        roles.push_back(to_string(r));
    }
    j["roles"] = roles;
    j["pos_ids"] = seq.pos_ids;
    nlohmann::json spans = nlohmann::json::array();
    for (const SpanEntry& e : seq.span_table) {
        spans.push_back({{"cl", e.cl}, {"interior", e.interior}, {"cr", e.cr}});
    }
    j["span_table"] = spans;
    nlohmann::json origin = nlohmann::json::array();
    for (std::size_t o : seq.origin_map) {
        if (o == kSentinelOrigin) {
            origin.push_back("SENTINEL");
        } else {
            origin.push_back(o);
        }
    }
    j["origin_map"] = origin;
    return j;
}

nlohmann::json to_json(const AttentionMask& mask) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t q = 0; q < mask.size(); ++q) {
        std::vector<int> row(mask.size());
        for (std::size_t k = 0; k < mask.size(); ++k) {
            row[k] = mask.allowed(q, k) ? 1 : 0;
        }
        rows.push_back(row);
    }
    return {{"size", mask.size()}, {"allow", rows}};
}

TransformedSeq transformed_from_json(const nlohmann::json& j) {
    try {
        TransformedSeq seq;
        seq.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
        for (const auto& r : j.at("roles")) {
            const auto s = r.get<std::string>();
            if (s == "NORMAL") {
                seq.roles.push_back(Role::Normal);
            } else if (s == "CL") {
                seq.roles.push_back(Role::CL);
            } else if (s == "CR") {
                seq.roles.push_back(Role::CR);
            } else {
                throw SchemaError("unknown role " + s);
            }
        }
        seq.pos_ids = j.at("pos_ids").get<std::vector<std::int32_t>>();
        for (const auto& e : j.at("span_table")) {
            seq.span_table.push_back({e.at("cl").get<std::size_t>(), e.at("interior").get<std::vector<std::size_t>>(),
                                      e.at("cr").get<std::size_t>()});
        }
        for (const auto& o : j.at("origin_map")) {
            seq.origin_map.push_back(o.is_string() ? kSentinelOrigin : o.get<std::size_t>());
        }
        if (seq.roles.size() != seq.tokens.size() || seq.pos_ids.size() != seq.tokens.size() ||
            seq.origin_map.size() != seq.tokens.size()) {
            throw SchemaError("transformed sequence fields differ in length");
        }
        return seq;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("bad transformed sequence JSON: ") + e.what());
    }
}

}  // namespace kvc
