#include "kvc/evalgen.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "kvc/error.hpp"
#include "kvc/ops.hpp"

namespace kvc {

void EvalConfig::validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ConfigError("top_p must satisfy 0 < p <= 1");
    }
    for (double r : ratios) {
        CompressionConfig{r, max_span_len, 0}.validate();
    }
    if (seq_len < 2) {
        throw ConfigError("evaluation window must hold at least 2 tokens");
    }
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kEvalBatch = 8;

// Summed negative log-likelihood (double) of a packed group of examples.
std::pair<double, std::size_t> score_group(const ModelParams& params, std::span<const Example> group) {
    Graph graph(false);
    const std::vector<Var> bound = bind_parameters(graph, params);
    PackedBatch packed;
    std::vector<std::int32_t> labels;
    for (const Example& ex : group) {
        packed.add_sequence(ex.seq.tokens, ex.seq.pos_ids, ex.mask);
        for (std::size_t i = 0; i < ex.labels.size(); ++i) {
            labels.push_back(ex.seq.roles[i] == Role::Normal ? ex.labels[i] : kIgnore);
        }
    }
    const ForwardTrace trace = forward_graph(graph, params, bound, packed);
    const Tensor& logits = trace.logits.value();
    double nll = 0.0;
    std::size_t scored = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] == kIgnore) {
            continue;
        }
        nll += log_sum_exp(logits.row(r)) - static_cast<double>(logits.at(r, static_cast<std::size_t>(labels[r])));
        ++scored;
    }
    return {nll, scored};
}

}  // namespace

PerplexityResult eval_perplexity(const ModelParams& params, std::span<const std::int32_t> tokens, Method method,
                                 double ratio, std::uint64_t seed, std::size_t seq_len, std::size_t max_span_len,
                                 std::size_t max_windows) {
    CompressionConfig{ratio, max_span_len, 0}.validate();
    if (seq_len < 2) {
        throw ConfigError("evaluation window must hold at least 2 tokens");
    }
    std::size_t windows = tokens.size() / seq_len;
    if (max_windows > 0) {
        windows = std::min(windows, max_windows);
    }
    if (windows == 0) {
        throw DataError("evaluation text has fewer tokens than one window of " + std::to_string(seq_len));
    }
    const ModelConfig& mc = params.config();
    double nll = 0.0;
    std::size_t scored = 0;
    std::vector<Example> group;
    for (std::size_t w = 0; w < windows; ++w) {
        Rng rng = Rng::stream(seed, w);
        group.push_back(prepare_example(tokens.subspan(w * seq_len, seq_len), method, ratio, max_span_len, mc.cl_id(),
                                        mc.cr_id(), rng));
        if (group.size() == kEvalBatch || w + 1 == windows) {
            const auto [part, count] = score_group(params, group);
            nll += part;
            scored += count;
            group.clear();
        }
    }
    if (scored == 0) {
        throw DataError("no scored positions in evaluation text");
    }
    PerplexityResult res;
    res.mean_nll = nll / static_cast<double>(scored);
    res.ppl = std::exp(res.mean_nll);
    res.scored = scored;
    res.windows = windows;
    return res;
}

// ---------------------------------------------------------------------------

std::vector<std::int32_t> nucleus_support(std::span<const float> probs, double p) {
    std::vector<std::int32_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) { return probs[a] > probs[b]; });
    if (p >= 1.0) {
        return order;
    }
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
        mass += probs[static_cast<std::size_t>(order[keep])];
        ++keep;
        if (mass >= p) {
            break;
        }
    }
    order.resize(std::max<std::size_t>(keep, 1));
    return order;
}

std::int32_t nucleus_sample(std::span<const float> probs, double p, Rng& rng) {
    if (probs.empty()) {
        throw ContractError("nucleus_sample: empty distribution");
    }
    const auto support = nucleus_support(probs, p);
    double mass = 0.0;
    for (std::int32_t id : support) {
        mass += probs[static_cast<std::size_t>(id)];
    }
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    for (std::int32_t id : support) {
        acc += probs[static_cast<std::size_t>(id)];
        if (u < acc) {
            return id;
        }
    }
    return support.back();
}

std::vector<float> next_token_probs(const ModelParams& params, std::span<const float> logits) {
    const std::size_t real = params.config().real_vocab();
    std::vector<std::uint8_t> keep(logits.size(), 0);
    std::fill(keep.begin(), keep.begin() + static_cast<std::ptrdiff_t>(real), 1);
    const Tensor p = softmax_masked(logits, keep);
    return {p.data().begin(), p.data().end()};
}

// ---------------------------------------------------------------------------

Generation generate(const ModelParams& params, std::span<const std::int32_t> prefix, Method method, double ratio,
                    std::size_t gen_len, const EvalConfig& cfg, Rng& rng) {
    if (prefix.empty()) {
        throw ContractError("generate: prefix must not be empty");
    }
    CompressionConfig{ratio, cfg.max_span_len, 0}.validate();
    const ModelConfig& mc = params.config();
    Generation out;
    if (gen_len == 0) {
        return out;
    }
    PrefixCache state{make_cache(mc), {}, 0, Tensor(), 0};
    switch (method) {
        case Method::Scattered:
            throw UnsupportedMethodError("scattered attention has no cache policy for generation");
        case Method::None:
            state = prefill_causal(params, prefix);
            break;
        case Method::Local:
            state = prefill_local(params, prefix, ratio);
            break;
        case Method::KvCompression: {
            const SpanSample spans = sample_spans(prefix.size(), ratio, cfg.max_span_len, rng);
            const TransformedSeq seq = transform(prefix, spans.spans, mc.cl_id(), mc.cr_id());
            PrefillOptions opt;
            if (cfg.prefill_block > 0) {
                opt.mode = PrefillMode::Progressive;
                opt.block = cfg.prefill_block;
            }
            state = compress_prefix(params, seq, opt);
            out.covered = spans.covered;
            out.spans = spans.spans.size();
            break;
        }
    }
    out.cache_alive_after_prefix = state.cache.alive_count();
    std::vector<float> probs = next_token_probs(params, state.logits.row(state.last_normal));
    for (std::size_t i = 0; i < gen_len; ++i) {
        const std::int32_t tok = nucleus_sample(probs, cfg.top_p, rng);
        out.tokens.push_back(tok);
        if (i + 1 == gen_len) {
            break;
        }
        const std::size_t t = prefix.size() + i;
        if (method == Method::Local) {
            local_fifo_step(state.cache, t, ratio);
        }
        const StepOutput step = forward_step(params, tok, static_cast<std::int32_t>(t), state.cache);
        probs = next_token_probs(params, step.logits.row(0));
    }
    out.peak_cache_bytes = state.cache.peak_bytes();
    return out;
}

// ---------------------------------------------------------------------------

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
    RougeScore s;
    if (candidate.empty() || reference.empty()) {
        return s;
    }
    const auto lcs = static_cast<double>(lcs_length(candidate, reference));
    s.precision = lcs / static_cast<double>(candidate.size());
    s.recall = lcs / static_cast<double>(reference.size());
    s.f1 = lcs == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) {
        words.push_back(w);
    }
    return words;
}

// ---------------------------------------------------------------------------

std::size_t activation_estimate(const ModelConfig& cfg) {
    return sizeof(float) * (cfg.n_layers * 10 * cfg.d_model + cfg.vocab_size);
}

std::size_t default_overhead(const ModelParams& params) {
    return params.weight_bytes() + 2 * activation_estimate(params.config());
}

std::size_t max_batch(const MemoryBudget& budget, const ModelConfig& cfg, std::size_t peak_len) {
    const std::size_t per = cache_size_bytes({cfg.n_layers, 1, cfg.n_heads, peak_len, cfg.d_head});
    if (budget.budget_bytes < budget.overhead_bytes) {
        return 0;
    }
    if (per == 0) {
        throw ContractError("max_batch: zero-length cache");
    }
    return (budget.budget_bytes - budget.overhead_bytes) / per;
}

namespace {

std::vector<std::int32_t> dummy_prefix(const ModelConfig& mc, std::size_t len, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, 0x5eed);
    std::vector<std::int32_t> t(len);
    for (auto& x : t) {
        x = static_cast<std::int32_t>(rng.below(mc.real_vocab()));
    }
    return t;
}

TransformedSeq profile_sequence(const ModelConfig& mc, std::span<const std::int32_t> prefix, double ratio,
                                const EvalConfig& cfg) {
    Rng rng = Rng::stream(cfg.seed, 0x5a5a);
    const SpanSample spans = sample_spans(prefix.size(), ratio, cfg.max_span_len, rng);
    return transform(prefix, spans.spans, mc.cl_id(), mc.cr_id());
}

}  // namespace

CachePlan plan_cache(const ModelParams& params, std::size_t prefix_len, std::size_t gen_len, Method method,
                     double ratio, const EvalConfig& cfg, Rng& rng) {
    const ModelConfig& mc = params.config();
    CachePlan plan;
    switch (method) {
        case Method::Scattered:
            throw UnsupportedMethodError("scattered attention has no cache policy for generation");
        case Method::None:
            plan.retained = prefix_len;
            plan.peak_len = prefix_len + gen_len;
            break;
        case Method::Local: {
            plan.retained = prefix_len - local_window_start(prefix_len, ratio);
            plan.peak_len = prefix_len;
            for (std::size_t t = prefix_len; t < prefix_len + gen_len; ++t) {
                plan.peak_len = std::max(plan.peak_len, t + 1 - local_window_start(t, ratio));
            }
            break;
        }
        case Method::KvCompression: {
            const SpanSample spans = sample_spans(prefix_len, ratio, cfg.max_span_len, rng);
            const std::vector<std::int32_t> dummy(prefix_len, 0);
            const TransformedSeq seq = transform(dummy, spans.spans, mc.cl_id(), mc.cr_id());
            const std::size_t block = cfg.prefill_block > 0 ? cfg.prefill_block : seq.size();
            std::size_t alive = 0, peak = 0, next_span = 0;
            for (std::size_t begin = 0; begin < seq.size(); begin += block) {
                const std::size_t end = std::min(seq.size(), begin + block);
                alive += end - begin;
                peak = std::max(peak, alive);
                while (next_span < seq.span_table.size() && seq.span_table[next_span].cr < end) {
                    alive -= seq.span_table[next_span].interior.size() + 1;
                    ++next_span;
                }
            }
            plan.retained = alive;
            plan.peak_len = std::max(peak, alive + gen_len);
            break;
        }
    }
    return plan;
}

ThroughputResult profile_throughput(const ModelParams& params, std::size_t prefix_len, std::size_t gen_len,
                                    Method method, double ratio, const MemoryBudget& budget, const EvalConfig& cfg) {
    using clock = std::chrono::steady_clock;
    const ModelConfig& mc = params.config();
    if (prefix_len == 0 || gen_len == 0) {
        throw ConfigError("profiling needs a non-empty prefix and gen_len >= 1");
    }
    CompressionConfig{ratio, cfg.max_span_len, 0}.validate();
    const std::vector<std::int32_t> prefix = dummy_prefix(mc, prefix_len, cfg.seed);

    ThroughputResult res;
    std::optional<TransformedSeq> seq;
    if (method == Method::KvCompression) {
        seq = profile_sequence(mc, prefix, ratio, cfg);
        Rng plan_rng = Rng::stream(cfg.seed, 0x5a5a);
        const CachePlan plan = plan_cache(params, prefix_len, gen_len, method, ratio, cfg, plan_rng);
        res.retained = plan.retained;
        res.peak_len = plan.peak_len;
    } else {
        Rng unused(0);
        const CachePlan plan = plan_cache(params, prefix_len, gen_len, method, ratio, cfg, unused);
        res.retained = plan.retained;
        res.peak_len = plan.peak_len;
    }
    res.max_batch = max_batch(budget, mc, res.peak_len);
    if (res.max_batch == 0) {
        throw InfeasibleBudgetError("budget of " + std::to_string(budget.budget_bytes) + " bytes cannot hold one sequence (" +
                                    std::to_string(budget.overhead_bytes) + " overhead + " +
                                    std::to_string(cache_size_bytes({mc.n_layers, 1, mc.n_heads, res.peak_len, mc.d_head})) +
                                    " cache)");
    }

    auto meter = std::make_shared<ByteMeter>();
    std::vector<PrefixCache> rows;
    rows.reserve(res.max_batch);
    const auto t0 = clock::now();
    for (std::size_t b = 0; b < res.max_batch; ++b) {
        switch (method) {
            case Method::None:
                rows.push_back(prefill_causal(params, prefix, meter));
                break;
            case Method::Local:
                rows.push_back(prefill_local(params, prefix, ratio, meter));
                break;
            case Method::KvCompression: {
                PrefillOptions opt;
                if (cfg.prefill_block > 0) {
                    opt.mode = PrefillMode::Progressive;
                    opt.block = cfg.prefill_block;
                }
                opt.meter = meter;
                rows.push_back(compress_prefix(params, *seq, opt));
                break;
            }
            case Method::Scattered:
                throw UnsupportedMethodError("scattered attention has no cache policy for generation");
        }
    }
    const auto t1 = clock::now();

    Rng rng = Rng::stream(cfg.seed, 0xdec0de);
    std::vector<std::vector<float>> probs;
    for (const PrefixCache& row : rows) {
        probs.push_back(next_token_probs(params, row.logits.row(row.last_normal)));
    }
    std::vector<std::int32_t> tokens(rows.size());
    std::vector<std::int32_t> positions(rows.size());
    for (std::size_t i = 0; i < gen_len; ++i) {
        const std::size_t t = prefix_len + i;
        std::vector<CachedRequest> requests;
        for (std::size_t b = 0; b < rows.size(); ++b) {
            tokens[b] = nucleus_sample(probs[b], cfg.top_p, rng);
            positions[b] = static_cast<std::int32_t>(t);
            if (method == Method::Local) {
                local_fifo_step(rows[b].cache, t, ratio);
            }
            requests.push_back({std::span(tokens).subspan(b, 1), std::span(positions).subspan(b, 1), &rows[b].cache, {}});
        }
        const std::vector<StepOutput> outs = forward_cached(params, requests);
        for (std::size_t b = 0; b < rows.size(); ++b) {
            probs[b] = next_token_probs(params, outs[b].logits.row(0));
        }
    }
    const auto t2 = clock::now();
    res.prefill_seconds = std::chrono::duration<double>(t1 - t0).count();
    res.decode_seconds = std::chrono::duration<double>(t2 - t1).count();
    res.tokens_per_second = static_cast<double>(res.max_batch * gen_len) / res.decode_seconds;
    res.peak_cache_bytes = meter->peak;
    return res;
}

// ---------------------------------------------------------------------------

SweepResult sweep_generalization(std::span<const double> train_ratios, std::span<const double> test_ratios,
                                 const TrainFn& train, std::span<const std::int32_t> heldout, const EvalConfig& cfg) {
    if (train_ratios.size() < 2) {
        throw ConfigError("a sweep needs at least two train ratios");
    }
    SweepResult out;
    out.train_ratios.assign(train_ratios.begin(), train_ratios.end());
    out.test_ratios.assign(test_ratios.begin(), test_ratios.end());
    for (double tr : train_ratios) {
        const ModelParams model = train(tr);
        std::vector<double> row;
        for (double te : test_ratios) {
            row.push_back(eval_perplexity(model, heldout, Method::KvCompression, te, cfg.seed, cfg.seq_len,
                                          cfg.max_span_len, cfg.max_windows)
                              .ppl);
        }
        out.ppl.push_back(std::move(row));
    }
    return out;
}

nlohmann::json to_json(const SweepResult& sweep) {
    return {{"train_ratios", sweep.train_ratios}, {"test_ratios", sweep.test_ratios}, {"ppl", sweep.ppl}};
}

std::string to_csv(const SweepResult& sweep) {
    std::ostringstream out;
    out << "train_r";
    for (double te : sweep.test_ratios) {
        out << ",test_" << te;
    }
    out << '\n';
    for (std::size_t i = 0; i < sweep.train_ratios.size(); ++i) {
        out << sweep.train_ratios[i];
        for (double v : sweep.ppl[i]) {
            out << ',' << std::setprecision(8) << v;
        }
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const ReportRow& row) {
    nlohmann::json j;
    j["method"] = to_string(row.method);
    j["r"] = row.r;
    j["ppl"] = row.ppl ? nlohmann::json(*row.ppl) : nlohmann::json(nullptr);
    if (row.rouge) {
        j["rouge"] = {{"p", row.rouge->precision}, {"r", row.rouge->recall}, {"f1", row.rouge->f1}};
    } else {
        j["rouge"] = nullptr;
    }
    j["throughput_tps"] = row.throughput_tps ? nlohmann::json(*row.throughput_tps) : nlohmann::json(nullptr);
    j["peak_cache_bytes"] = row.peak_cache_bytes ? nlohmann::json(*row.peak_cache_bytes) : nlohmann::json(nullptr);
    j["max_batch"] = row.max_batch ? nlohmann::json(*row.max_batch) : nlohmann::json(nullptr);
    if (row.budget_bytes) {
        j["budget_bytes"] = *row.budget_bytes;
    }
    if (row.note) {
        j["note"] = *row.note;
    }
    return j;
}

namespace {

template <typename T>
std::string opt_str(const std::optional<T>& v, int precision = 6) {
    if (!v) {
        return "";
    }
    std::ostringstream s;
    s << std::setprecision(precision) << *v;
    return s.str();
}

}  // namespace

std::string report_csv(std::span<const ReportRow> rows) {
    std::ostringstream out;
    out << "method,r,ppl,rouge_p,rouge_r,rouge_f1,throughput_tps,peak_cache_bytes,max_batch,budget_bytes,note\n";
    for (const ReportRow& row : rows) {
        out << to_string(row.method) << ',' << row.r << ',' << opt_str(row.ppl, 10) << ',';
        if (row.rouge) {
            out << row.rouge->precision << ',' << row.rouge->recall << ',' << row.rouge->f1 << ',';
        } else {
            out << ",,,";
        }
        out << opt_str(row.throughput_tps) << ',' << opt_str(row.peak_cache_bytes) << ',' << opt_str(row.max_batch)
            << ',' << opt_str(row.budget_bytes) << ',' << row.note.value_or("") << '\n';
    }
    return out.str();
}

std::string report_table(std::span<const ReportRow> rows) {
    std::ostringstream out;
    out << std::left << std::setw(16) << "method" << std::setw(6) << "r" << std::setw(12) << "ppl" << std::setw(10)
        << "rougeL_f1" << std::setw(12) << "tok/s" << std::setw(14) << "peak_bytes" << std::setw(8) << "b*"
        << "note\n";
    for (const ReportRow& row : rows) {
        out << std::left << std::setw(16) << to_string(row.method) << std::setw(6) << row.r << std::setw(12)
            << opt_str(row.ppl) << std::setw(10) << (row.rouge ? opt_str(std::optional(row.rouge->f1), 4) : "")
            << std::setw(12) << opt_str(row.throughput_tps) << std::setw(14) << opt_str(row.peak_cache_bytes)
            << std::setw(8) << opt_str(row.max_batch) << row.note.value_or("") << '\n';
    }
    return out.str();
}

}  // namespace kvc
