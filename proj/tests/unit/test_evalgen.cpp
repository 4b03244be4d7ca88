#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "kvc/error.hpp"
#include "kvc/evalgen.hpp"

using namespace kvc;

namespace {

ModelConfig tiny() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_head = 8;
    cfg.d_model = 16;
    cfg.vocab_size = 258;
    cfg.max_positions = 1024;
    cfg.lora_rank = 4;
    return cfg;
}

std::vector<std::int32_t> text_tokens(std::size_t n) {
    const std::string text = read_text_file(std::filesystem::path(KVC_DATA_DIR) / "shakespeare_tragedies.txt");
    return Tokenizer::byte_level().encode(std::string_view(text).substr(5000, n));
}

// exponential: every subsequence of a checked against b
std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::size_t best = 0;
    for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
        std::size_t j = 0, n = 0;
        bool ok = true;
        for (std::size_t i = 0; i < a.size() && ok; ++i) {
            if (!(mask >> i & 1)) continue;
            while (j < b.size() && b[j] != a[i]) ++j;
            if (j == b.size()) ok = false;
            else { ++j; ++n; }
        }
        if (ok) best = std::max(best, n);
    }
    return best;
}

std::vector<std::string> random_words(Rng& rng, std::size_t max_len, std::size_t alphabet) {
    std::vector<std::string> w(rng.below(max_len + 1));
    for (auto& s : w) s = std::string(1, static_cast<char>('a' + rng.below(alphabet)));
    return w;
}

}  // namespace

TEST(Perplexity, UniformLogitsGiveVocabSize) {
    auto p = ModelParams::init(tiny(), 0);
    p.at(p.token_embedding()).value.fill(0.0f);
    p.at(p.sentinel_embedding()).value.fill(0.0f);
    const auto toks = text_tokens(600);
    const auto res = eval_perplexity(p, toks, Method::None, 0.0, 0, 64, 25);
    EXPECT_NEAR(res.ppl, 258.0, 1e-6);
    EXPECT_EQ(res.windows, 9u);
    EXPECT_EQ(res.scored, 9u * 63u);
}

TEST(Perplexity, ZeroRatioBitIdenticalAcrossMethods) {
    const auto p = ModelParams::init(tiny(), 1);
    const auto toks = text_tokens(1000);
    const double none = eval_perplexity(p, toks, Method::None, 0.0, 3, 100, 25).ppl;
    EXPECT_EQ(eval_perplexity(p, toks, Method::KvCompression, 0.0, 3, 100, 25).ppl, none);
    EXPECT_EQ(eval_perplexity(p, toks, Method::Local, 0.0, 3, 100, 25).ppl, none);
    EXPECT_EQ(eval_perplexity(p, toks, Method::Scattered, 0.0, 3, 100, 25).ppl, none);
    EXPECT_TRUE(std::isfinite(eval_perplexity(p, toks, Method::KvCompression, 0.5, 3, 100, 25).ppl));
}

TEST(Perplexity, EmptyTextIsDataError) {
    const auto p = ModelParams::init(tiny(), 1);
    const std::vector<std::int32_t> few(10, 65);
    EXPECT_THROW(eval_perplexity(p, few, Method::None, 0.0, 0, 64, 25), DataError);
    EXPECT_THROW(eval_perplexity(p, few, Method::None, 1.0, 0, 4, 25), ConfigError);
}

TEST(Nucleus, WorkedExample) {
    const std::vector<float> probs{0.5f, 0.3f, 0.15f, 0.05f};
    EXPECT_EQ(nucleus_support(probs, 0.9), (std::vector<std::int32_t>{0, 1, 2}));
    EXPECT_EQ(nucleus_support(probs, 1.0).size(), 4u);
    EXPECT_EQ(nucleus_support(probs, 1e-9), (std::vector<std::int32_t>{0}));
    Rng rng(1);
    for (int i = 0; i < 200; ++i) EXPECT_EQ(nucleus_sample(probs, 1e-9, rng), 0);
}

TEST(Nucleus, TiesBreakOnLowerId) {
    const std::vector<float> probs{0.2f, 0.4f, 0.4f};
    EXPECT_EQ(nucleus_support(probs, 0.3), (std::vector<std::int32_t>{1}));
    EXPECT_EQ(nucleus_support(probs, 0.5), (std::vector<std::int32_t>{1, 2}));
}

TEST(Nucleus, MinimalSupportAndSamplesInside) {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<float> probs(n);
        double total = 0;
        for (auto& x : probs) total += (x = static_cast<float>(rng.uniform()));
        for (auto& x : probs) x = static_cast<float>(x / total);
        const double p = 0.05 + 0.9 * rng.uniform();
        const auto sup = nucleus_support(probs, p);
        double mass = 0;
        for (auto id : sup) mass += probs[id];
        EXPECT_GE(mass, p);
        EXPECT_LT(mass - probs[sup.back()], p);
        for (std::size_t i = 1; i < sup.size(); ++i) EXPECT_GE(probs[sup[i - 1]], probs[sup[i]]);
        const std::set<std::int32_t> in(sup.begin(), sup.end());
        for (int s = 0; s < 5; ++s) EXPECT_TRUE(in.count(nucleus_sample(probs, p, rng)));
    }
}

TEST(Rouge, WorkedExample) {
    const auto s = rouge_l(split_words("a b c"), split_words("a c"));
    EXPECT_NEAR(s.precision, 2.0 / 3.0, 1e-12);
    EXPECT_DOUBLE_EQ(s.recall, 1.0);
    EXPECT_NEAR(s.f1, 0.8, 1e-12);
    EXPECT_DOUBLE_EQ(rouge_l(split_words("x y z"), split_words("x y z")).f1, 1.0);
    EXPECT_DOUBLE_EQ(rouge_l(split_words("x y"), split_words("p q")).f1, 0.0);
    EXPECT_DOUBLE_EQ(rouge_l({}, {}).f1, 0.0);
}

TEST(Rouge, LcsMatchesBruteForce) {
    Rng rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto a = random_words(rng, 10, 4);
        const auto b = random_words(rng, 12, 4);
        ASSERT_EQ(lcs_length(a, b), lcs_brute(a, b));
    }
}

TEST(Generate, ZeroLengthIsEmpty) {
    const auto p = ModelParams::init(tiny(), 2);
    const auto prefix = text_tokens(40);
    Rng rng(0);
    EXPECT_TRUE(generate(p, prefix, Method::KvCompression, 0.5, 0, EvalConfig{}, rng).tokens.empty());
}

TEST(Generate, DeterministicAndZeroRatioMatchesNone) {
    const auto p = ModelParams::init(tiny(), 2);
    const auto prefix = text_tokens(64);
    EvalConfig cfg;
    cfg.max_span_len = 6;
    auto run = [&](Method m, double r) {
        Rng rng(99);
        return generate(p, prefix, m, r, 24, cfg, rng).tokens;
    };
    EXPECT_EQ(run(Method::KvCompression, 0.5), run(Method::KvCompression, 0.5));
    EXPECT_EQ(run(Method::Local, 0.5), run(Method::Local, 0.5));
    EXPECT_EQ(run(Method::KvCompression, 0.0), run(Method::None, 0.0));
    EXPECT_EQ(run(Method::Local, 0.0), run(Method::None, 0.0));
    for (std::int32_t t : run(Method::KvCompression, 0.7)) EXPECT_LT(t, 256);
}

TEST(Generate, AliveCountAfterPrefix) {
    const auto p = ModelParams::init(tiny(), 2);
    const auto prefix = text_tokens(128);
    EvalConfig cfg;
    for (std::uint64_t s = 0; s < 5; ++s) {
        Rng rng(s);
        const auto g = generate(p, prefix, Method::KvCompression, 0.5, 3, cfg, rng);
        EXPECT_GE(g.covered, 64u);
        EXPECT_EQ(g.cache_alive_after_prefix, 128 - g.covered + g.spans);
    }
}

TEST(Generate, ScatteredUnsupported) {
    const auto p = ModelParams::init(tiny(), 2);
    const auto prefix = text_tokens(16);
    Rng rng(0);
    EXPECT_THROW(generate(p, prefix, Method::Scattered, 0.5, 4, EvalConfig{}, rng), UnsupportedMethodError);
    EXPECT_THROW(generate(p, {}, Method::None, 0.0, 4, EvalConfig{}, rng), ContractError);
}

TEST(EvalConfig, Validation) {
    EvalConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.top_p = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.top_p = 1.0;
    cfg.ratios = {0.2, 1.0};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Budget, BoundaryAndMonotone) {
    const ModelConfig mc = tiny();
    const std::size_t one = cache_size_bytes({mc.n_layers, 1, mc.n_heads, 200, mc.d_head});
    EXPECT_EQ(max_batch({1000 + one, 1000}, mc, 200), 1u);
    EXPECT_EQ(max_batch({999 + one, 1000}, mc, 200), 0u);
    EXPECT_EQ(max_batch({500, 1000}, mc, 200), 0u);
    EXPECT_EQ(max_batch({1000 + 5 * one, 1000}, mc, 200), 5u);
    const auto p = ModelParams::init(mc, 0);
    EvalConfig cfg;
    std::size_t prev = 0;
    for (double r : {0.0, 0.3, 0.5, 0.8}) {
        Rng rng(1);
        const auto plan = plan_cache(p, 800, 100, Method::KvCompression, r, cfg, rng);
        const std::size_t b = max_batch({1000 + 4 * one * 5, 1000}, mc, plan.peak_len);
        EXPECT_GE(b, prev);
        prev = b;
    }
}

TEST(Profile, PeakMatchesMeterAndPlan) {
    const auto p = ModelParams::init(tiny(), 0);
    EvalConfig cfg;
    cfg.max_span_len = 10;
    const std::size_t overhead = default_overhead(p);
    for (Method m : {Method::None, Method::KvCompression, Method::Local}) {
        const double r = m == Method::None ? 0.0 : 0.6;
        Rng rng = Rng::stream(cfg.seed, 0x5a5a);
        const auto plan = plan_cache(p, 120, 10, m, r, cfg, rng);
        const ModelConfig& mc = p.config();
        const std::size_t per = cache_size_bytes({mc.n_layers, 1, mc.n_heads, plan.peak_len, mc.d_head});
        const auto res = profile_throughput(p, 120, 10, m, r, {overhead + 3 * per, overhead}, cfg);
        EXPECT_EQ(res.max_batch, 3u);
        EXPECT_EQ(res.peak_len, plan.peak_len);
        EXPECT_LE(res.peak_cache_bytes, 3 * per);
        EXPECT_GT(res.tokens_per_second, 0.0);
        if (m == Method::None) EXPECT_EQ(res.peak_cache_bytes, 3 * per);
    }
    EXPECT_THROW(profile_throughput(p, 120, 10, Method::None, 0.0, {overhead, overhead}, cfg), InfeasibleBudgetError);
    EXPECT_THROW(profile_throughput(p, 120, 10, Method::Scattered, 0.5, {overhead * 10, overhead}, cfg),
                 UnsupportedMethodError);
}

TEST(Sweep, ShapeAndBounds) {
    const auto toks = text_tokens(800);
    EvalConfig cfg;
    cfg.seq_len = 100;
    int trained = 0;
    const std::vector<double> train_r{0.1, 0.5};
    const std::vector<double> test_r{0.0, 0.3, 0.9};
    const auto sw = sweep_generalization(train_r, test_r, [&](double) { return ModelParams::init(tiny(), trained++); }, toks, cfg);
    EXPECT_EQ(trained, 2);
    ASSERT_EQ(sw.ppl.size(), 2u);
    for (const auto& row : sw.ppl) {
        ASSERT_EQ(row.size(), 3u);
        for (double v : row) EXPECT_GE(v, 1.0);
    }
    const auto j = to_json(sw);
    EXPECT_EQ(j["ppl"].size(), 2u);
    EXPECT_NE(to_csv(sw).find("train_r"), std::string::npos);
    EXPECT_THROW(sweep_generalization(std::vector<double>{0.1}, test_r, {}, toks, cfg), ConfigError);
}

TEST(Report, JsonSchema) {
    ReportRow row;
    row.method = Method::KvCompression;
    row.r = 0.5;
    row.ppl = 12.5;
    row.rouge = RougeScore{0.5, 0.25, 1.0 / 3.0};
    const auto j = to_json(row);
    for (const char* key : {"method", "r", "ppl", "rouge", "throughput_tps", "peak_cache_bytes", "max_batch"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["method"], "kv_compression");
    EXPECT_DOUBLE_EQ(j["rouge"]["r"].get<double>(), 0.25);
    EXPECT_TRUE(j["max_batch"].is_null());
    const std::vector<ReportRow> rows{row, row};
    const std::string csv = report_csv(rows);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_NE(report_table(rows).find("kv_compression"), std::string::npos);
}
