#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "kvc/compress.hpp"
#include "kvc/error.hpp"

using namespace kvc;

namespace {

constexpr std::int32_t CL = 98, CR = 99;

std::vector<std::int32_t> seq_tokens(std::size_t n) {
    std::vector<std::int32_t> t(n);
    std::iota(t.begin(), t.end(), 10);
    return t;
}

// Exhaustive constraint checker over a sampler result.
void check_spans(const SpanSample& s, std::size_t L, std::size_t l) {
    std::size_t covered = 0;
    for (std::size_t i = 0; i < s.spans.size(); ++i) {
        const Span& sp = s.spans[i];
        EXPECT_GE(sp.start, 1u);
        EXPECT_GE(sp.len, 2u);
        EXPECT_LE(sp.len, l);
        EXPECT_LE(sp.end(), L);
        if (i > 0) {
            EXPECT_LE(s.spans[i - 1].end(), sp.start);
        }
        covered += sp.len;
    }
    EXPECT_EQ(covered, s.covered);
}

// Largest coverage any set of valid spans can reach, by dynamic programming
// over prefixes of the sequence.
std::size_t best_coverage(std::size_t L, std::size_t l) {
    std::vector<std::size_t> best(L + 1, 0);
    for (std::size_t i = 2; i <= L; ++i) {
        best[i] = best[i - 1];
        for (std::size_t len = 2; len <= l && len + 1 <= i; ++len) {
            best[i] = std::max(best[i], best[i - len] + len);
        }
    }
    return best[L];
}

// Visibility worked out by replaying the sequence: tokens join a "context"
// list as they arrive; closing a span removes its <CL> and interiors from
// that list; a span's own members additionally see the open span so far.
std::vector<std::set<std::size_t>> replay_visibility(const std::vector<Role>& roles) {
    std::vector<std::set<std::size_t>> rows(roles.size());
    std::set<std::size_t> context;
    std::vector<std::size_t> open;
    bool in_span = false;
    for (std::size_t q = 0; q < roles.size(); ++q) {
        if (roles[q] == Role::CL) {
            in_span = true;
            open = {q};
            rows[q] = {q};
            continue;
        }
        std::set<std::size_t> vis = context;
        if (in_span) {
            vis.insert(open.begin(), open.end());
        }
        vis.insert(q);
        rows[q] = vis;
        if (roles[q] == Role::CR) {
            in_span = false;
            context.insert(q);
            open.clear();
        } else if (in_span) {
            open.push_back(q);
        } else {
            context.insert(q);
        }
    }
    return rows;
}

}  // namespace

TEST(SampleSpans, ZeroRatioIsEmpty) {
    auto s = sample_spans(100, CompressionConfig{0.0, 25, 1});
    EXPECT_TRUE(s.spans.empty());
    EXPECT_FALSE(s.exhausted);
}

TEST(SampleSpans, ReachesTargetWithValidSpans) {
    auto s = sample_spans(20, CompressionConfig{0.5, 5, 42});
    check_spans(s, 20, 5);
    EXPECT_GE(s.covered, 10u);
}

TEST(SampleSpans, HighRatioShortSequence) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto s = sample_spans(10, CompressionConfig{0.9, 25, seed});
        check_spans(s, 10, 25);
        if (best_coverage(10, 25) >= 9) {
            EXPECT_GE(s.covered, 9u);
        }
    }
}

TEST(SampleSpans, CoverageWheneverFeasible) {
    Rng meta(5);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t L = 2 + meta.below(40);
        const std::size_t l = 2 + meta.below(8);
        const double r = static_cast<double>(meta.below(100)) / 100.0;
        Rng rng(meta.next_u64());
        auto s = sample_spans(L, r, l, rng);
        check_spans(s, L, l);
        const auto target = static_cast<std::size_t>(std::floor(r * static_cast<double>(L)));
        if (best_coverage(L, l) >= target) {
            EXPECT_GE(s.covered, target) << "L=" << L << " l=" << l << " r=" << r;
            EXPECT_FALSE(s.exhausted);
        } else {
            EXPECT_TRUE(s.exhausted);
            EXPECT_EQ(s.covered, best_coverage(L, l));
        }
    }
}

TEST(SampleSpans, Deterministic) {
    auto a = sample_spans(256, CompressionConfig{0.8, 25, 77});
    auto b = sample_spans(256, CompressionConfig{0.8, 25, 77});
    EXPECT_EQ(a.spans, b.spans);
}

TEST(SampleSpans, LengthsSpreadOverRange) {
    std::vector<int> hist(26, 0);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        for (const Span& s : sample_spans(256, CompressionConfig{0.3, 25, seed}).spans) {
            hist[s.len]++;
        }
    }
    for (std::size_t len = 2; len <= 25; ++len) {
        EXPECT_GT(hist[len], 0) << len;
    }
}

TEST(SampleSpans, RejectsBadConfig) {
    EXPECT_THROW(sample_spans(10, CompressionConfig{1.0, 25, 0}), ConfigError);
    EXPECT_THROW(sample_spans(10, CompressionConfig{0.5, 1, 0}), ConfigError);
}

TEST(Transform, WorkedExample) {
    const std::vector<std::int32_t> t{0, 1, 2, 3, 4, 5};
    const std::vector<Span> spans{{2, 2}};
    auto seq = transform(t, spans, CL, CR);
    EXPECT_EQ(seq.tokens, (std::vector<std::int32_t>{0, 1, CL, 2, 3, CR, 4, 5}));
    EXPECT_EQ(seq.pos_ids, (std::vector<std::int32_t>{0, 1, 1, 2, 3, 3, 4, 5}));
    ASSERT_EQ(seq.span_table.size(), 1u);
    EXPECT_EQ(seq.span_table[0].cl, 2u);
    EXPECT_EQ(seq.span_table[0].interior, (std::vector<std::size_t>{3, 4}));
    EXPECT_EQ(seq.span_table[0].cr, 5u);
    EXPECT_EQ(seq.origin_map[2], kSentinelOrigin);
    EXPECT_EQ(seq.origin_map[3], 2u);
}

TEST(Transform, NoSpansIsIdentity) {
    const auto t = seq_tokens(7);
    auto seq = transform(t, std::vector<Span>{}, CL, CR);
    EXPECT_EQ(seq.tokens, t);
    for (std::size_t i = 0; i < 7; ++i) {
        EXPECT_EQ(seq.pos_ids[i], static_cast<std::int32_t>(i));
        EXPECT_EQ(seq.roles[i], Role::Normal);
    }
}

TEST(Transform, RejectsOverlapAndBadStart) {
    const auto t = seq_tokens(10);
    EXPECT_THROW(transform(t, std::vector<Span>{{1, 3}, {3, 2}}, CL, CR), ContractError);
    EXPECT_THROW(transform(t, std::vector<Span>{{0, 3}}, CL, CR), ContractError);
    EXPECT_THROW(transform(t, std::vector<Span>{{8, 3}}, CL, CR), ContractError);
}

TEST(Transform, RandomInvariants) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto t = seq_tokens(60);
        auto s = sample_spans(60, CompressionConfig{0.6, 7, seed});
        auto seq = transform(t, s.spans, CL, CR);
        EXPECT_EQ(strip_sentinels(seq), t);
        // sentinels alternate CL, CR
        Role last = Role::CR;
        std::int32_t expect_pos = 0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq.roles[i] == Role::Normal) {
                EXPECT_EQ(seq.pos_ids[i], expect_pos++);
                continue;
            }
            EXPECT_NE(seq.roles[i], last);
            last = seq.roles[i];
            EXPECT_EQ(seq.pos_ids[i], seq.pos_ids[i - 1]);
        }
        EXPECT_EQ(last, Role::CR);
        ASSERT_EQ(seq.span_table.size(), s.spans.size());
        for (const SpanEntry& e : seq.span_table) {
            EXPECT_EQ(seq.roles[e.cl], Role::CL);
            EXPECT_EQ(seq.roles[e.cr], Role::CR);
            EXPECT_EQ(e.cr, e.cl + e.interior.size() + 1);
        }
        EXPECT_EQ(*std::max_element(seq.pos_ids.begin(), seq.pos_ids.end()), 59);
    }
}

TEST(CompressionMask, WorkedExample) {
    TransformedSeq seq = transform(seq_tokens(5), std::vector<Span>{{2, 2}}, CL, CR);
    ASSERT_EQ(seq.roles,
              (std::vector<Role>{Role::Normal, Role::Normal, Role::CL, Role::Normal, Role::Normal, Role::CR, Role::Normal}));
    auto mask = build_compression_mask(seq);
    const std::vector<std::vector<std::size_t>> expected{{0}, {0, 1}, {2}, {0, 1, 2, 3}, {0, 1, 2, 3, 4},
                                                         {0, 1, 2, 3, 4, 5}, {0, 1, 5, 6}};
    for (std::size_t q = 0; q < 7; ++q) {
        EXPECT_EQ(mask.visible(q), expected[q]) << q;
    }
}

TEST(CompressionMask, NoSpansIsCausal) {
    auto seq = identity_transform(seq_tokens(9));
    EXPECT_EQ(build_compression_mask(seq), AttentionMask::causal(9));
}

TEST(CompressionMask, MatchesReplayOracleAndHidesClosedSpans) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto s = sample_spans(48, CompressionConfig{0.5, 6, seed});
        auto seq = transform(seq_tokens(48), s.spans, CL, CR);
        auto mask = build_compression_mask(seq);
        const auto oracle = replay_visibility(seq.roles);
        EXPECT_TRUE(mask.is_causal_compatible());
        for (std::size_t q = 0; q < seq.size(); ++q) {
            EXPECT_TRUE(mask.allowed(q, q));
            const auto vis = mask.visible(q);
            EXPECT_EQ(std::set<std::size_t>(vis.begin(), vis.end()), oracle[q]) << "seed " << seed << " row " << q;
        }
        for (const SpanEntry& e : seq.span_table) {
            for (std::size_t q = e.cr + 1; q < seq.size(); ++q) {
                if (seq.roles[q] != Role::Normal) {
                    continue;
                }
                for (std::size_t k : evictable_indices(e)) {
                    EXPECT_FALSE(mask.allowed(q, k));
                }
            }
        }
    }
}

TEST(LocalMask, Formula) {
    auto m = build_local_mask(12, 0.5);
    EXPECT_EQ(m.visible(10), (std::vector<std::size_t>{5, 6, 7, 8, 9, 10}));
    EXPECT_EQ(m.visible(0), (std::vector<std::size_t>{0}));
    EXPECT_EQ(build_local_mask(12, 0.0), AttentionMask::causal(12));
    EXPECT_EQ(build_local_mask(5, 0.9).visible(0), (std::vector<std::size_t>{0}));
}

TEST(ScatteredMask, ZeroRatioIsCausal) {
    EXPECT_EQ(build_scattered_mask(16, 0.0, 3), AttentionMask::causal(16));
}

TEST(ScatteredMask, KeptFractionAndSelf) {
    double kept_fraction_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        auto m = build_scattered_mask(16, 0.5, seed);
        std::size_t kept = 0;
        // key k < 15 is kept iff the last row sees it
        for (std::size_t k = 0; k < 15; ++k) {
            kept += m.allowed(15, k) ? 1 : 0;
        }
        kept_fraction_sum += static_cast<double>(kept) / 15.0;
        for (std::size_t q = 0; q < 16; ++q) {
            EXPECT_TRUE(m.allowed(q, q));
            for (std::size_t k = 0; k < q; ++k) {
                EXPECT_EQ(m.allowed(q, k), m.allowed(15, k));  // per-key draw
            }
        }
    }
    EXPECT_NEAR(kept_fraction_sum / 1000.0, 0.5, 0.05);
    EXPECT_EQ(build_scattered_mask(32, 0.4, 9), build_scattered_mask(32, 0.4, 9));
}

TEST(RetainedIndices, WorkedExample) {
    auto seq = transform(seq_tokens(5), std::vector<Span>{{2, 2}}, CL, CR);
    EXPECT_EQ(retained_indices(seq), (std::vector<std::size_t>{0, 1, 5, 6}));
}

TEST(DebugJson, RoundTrip) {
    auto s = sample_spans(30, CompressionConfig{0.5, 5, 3});
    auto seq = transform(seq_tokens(30), s.spans, CL, CR);
    auto back = transformed_from_json(to_json(seq));
    EXPECT_EQ(back.tokens, seq.tokens);
    EXPECT_EQ(back.roles, seq.roles);
    EXPECT_EQ(back.pos_ids, seq.pos_ids);
    EXPECT_EQ(back.origin_map, seq.origin_map);
    auto mj = to_json(build_compression_mask(seq));
    EXPECT_EQ(mj["allow"].size(), seq.size());
    EXPECT_EQ(to_json(seq)["roles"][s.spans[0].start], "CL");
    EXPECT_THROW(transformed_from_json(nlohmann::json{{"tokens", {1}}}), SchemaError);
}
