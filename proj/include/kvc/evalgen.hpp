#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvc/model.hpp"
#include "kvc/prefix.hpp"
#include "kvc/rng.hpp"
#include "kvc/train.hpp"

namespace kvc {

struct EvalConfig {
    Method method = Method::KvCompression;
    std::vector<double> ratios{0.0};
    std::uint64_t seed = 0;
    double top_p = 0.9;
    std::size_t n_samples = 8;
    std::size_t prefix_len = 128;
    std::size_t gen_len = 64;
    std::size_t seq_len = 256;       // perplexity window
    std::size_t max_span_len = 25;
    std::size_t max_windows = 0;     // 0 = every window of the held-out stream
    std::size_t prefill_block = 32;  // PROGRESSIVE block; 0 means ONE_GO

    void validate() const;
};

// ---- perplexity -----------------------------------------------------------

struct PerplexityResult {
    double ppl = 0.0;
    double mean_nll = 0.0;
    std::size_t scored = 0;
    std::size_t windows = 0;
};

// Consecutive non-overlapping windows of seq_len tokens, each prepared for
// `method` at ratio r (window w draws from Rng::stream(seed, w)).
PerplexityResult eval_perplexity(const ModelParams& params, std::span<const std::int32_t> tokens, Method method,
                                 double ratio, std::uint64_t seed, std::size_t seq_len, std::size_t max_span_len,
                                 std::size_t max_windows = 0);

// ---- sampling -------------------------------------------------------------

// Token ids of the nucleus: probability-descending (ties by lower id), the
// shortest prefix whose mass reaches p.
std::vector<std::int32_t> nucleus_support(std::span<const float> probs, double p);
std::int32_t nucleus_sample(std::span<const float> probs, double p, Rng& rng);

// Softmax over the real vocabulary; sentinel ids get probability 0.
std::vector<float> next_token_probs(const ModelParams& params, std::span<const float> logits);

// ---- generation -----------------------------------------------------------

struct Generation {
    std::vector<std::int32_t> tokens;
    std::size_t cache_alive_after_prefix = 0;
    std::size_t peak_cache_bytes = 0;
    std::size_t covered = 0;  // interior tokens compressed in the prefix
    std::size_t spans = 0;
};

Generation generate(const ModelParams& params, std::span<const std::int32_t> prefix, Method method, double ratio,
                    std::size_t gen_len, const EvalConfig& cfg, Rng& rng);

// ---- ROUGE-L --------------------------------------------------------------

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
std::vector<std::string> split_words(std::string_view text);

// ---- throughput -----------------------------------------------------------

struct MemoryBudget {
    std::size_t budget_bytes = 0;
    std::size_t overhead_bytes = 0;
};

// Activation bytes of one decoding sequence (hidden states, MLP, logits).
std::size_t activation_estimate(const ModelConfig& cfg);
// weight bytes + 2 x one-sequence activation estimate
std::size_t default_overhead(const ModelParams& params);

// Largest b with overhead + cache_size_bytes(b, peak_len) <= budget (0 if none).
std::size_t max_batch(const MemoryBudget& budget, const ModelConfig& cfg, std::size_t peak_len);

struct CachePlan {
    std::size_t retained = 0;  // alive entries once the prefix is processed
    std::size_t peak_len = 0;  // most entries alive at once over prefill + decode
};

CachePlan plan_cache(const ModelParams& params, std::size_t prefix_len, std::size_t gen_len, Method method,
                     double ratio, const EvalConfig& cfg, Rng& rng);

struct ThroughputResult {
    std::size_t max_batch = 0;
    double tokens_per_second = 0.0;
    double decode_seconds = 0.0;
    double prefill_seconds = 0.0;
    std::size_t peak_cache_bytes = 0;
    std::size_t retained = 0;
    std::size_t peak_len = 0;
};

// b* sequences share one dummy prefix; every row is prefilled, then all rows
// decode gen_len tokens together. Throughput counts the decode phase only.
ThroughputResult profile_throughput(const ModelParams& params, std::size_t prefix_len, std::size_t gen_len,
                                    Method method, double ratio, const MemoryBudget& budget, const EvalConfig& cfg);

// ---- sweep ----------------------------------------------------------------

struct SweepResult {
    std::vector<double> train_ratios;
    std::vector<double> test_ratios;
    std::vector<std::vector<double>> ppl;  // [train][test]
};

using TrainFn = std::function<ModelParams(double train_ratio)>;

SweepResult sweep_generalization(std::span<const double> train_ratios, std::span<const double> test_ratios,
                                 const TrainFn& train, std::span<const std::int32_t> heldout, const EvalConfig& cfg);

nlohmann::json to_json(const SweepResult& sweep);
std::string to_csv(const SweepResult& sweep);

// ---- reports --------------------------------------------------------------

struct ReportRow {
    Method method = Method::None;
    double r = 0.0;
    std::optional<double> ppl;
    std::optional<RougeScore> rouge;
    std::optional<double> throughput_tps;
    std::optional<std::size_t> peak_cache_bytes;
    std::optional<std::size_t> max_batch;
    std::optional<std::size_t> budget_bytes;
    std::optional<std::string> note;
};

nlohmann::json to_json(const ReportRow& row);
std::string report_csv(std::span<const ReportRow> rows);
std::string report_table(std::span<const ReportRow> rows);

}  // namespace kvc
