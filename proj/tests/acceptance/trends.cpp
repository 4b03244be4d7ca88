// Desk-scale ordering checks (5 and 8). Each seed pretrains one base model with
// full attention, then every method fine-tunes from that base on the same budget.
#include "trends.hpp"

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "kvc/evalgen.hpp"
#include "kvc/train.hpp"

using namespace kvc;

namespace acceptance {
namespace {

constexpr std::size_t kSeeds = 3;
constexpr std::size_t kPretrainSteps = 2000;
constexpr std::size_t kFinetuneSteps = 3000;
constexpr std::size_t kSeqLen = 128;
constexpr std::size_t kSpanLen = 25;
constexpr std::size_t kWindows = 200;

const Corpus& corpus() {
    static const Corpus c = split_corpus(
        Tokenizer::byte_level().encode(read_text_file(std::filesystem::path(KVC_DATA_DIR) / "shakespeare_tragedies.txt")),
        0.1);
    return c;
}

ModelConfig desk_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_head = 16;
    cfg.d_model = 64;
    cfg.vocab_size = 258;
    cfg.max_positions = 1024;
    return cfg;
}

TrainConfig schedule(Method m, double r, std::size_t steps, double lr, std::uint64_t seed) {
    TrainConfig tc;
    tc.method = m;
    tc.ratio = r;
    tc.steps = steps;
    tc.batch_size = 8;
    tc.seq_len = kSeqLen;
    tc.max_span_len = kSpanLen;
    tc.scope = TrainScope::Full;
    tc.adamw.lr = lr;
    tc.seed = seed;
    return tc;
}

const ModelParams& base(std::uint64_t seed) {
    static std::map<std::uint64_t, ModelParams> cache;
    auto it = cache.find(seed);
    if (it == cache.end()) {
        ModelParams p = ModelParams::init(desk_config(), seed);
        train_loop(p, corpus().train, schedule(Method::None, 0.0, kPretrainSteps, 1e-3, seed));
        it = cache.emplace(seed, std::move(p)).first;
    }
    return it->second;
}

ModelParams finetune(std::uint64_t seed, Method m, double train_r) {
    ModelParams p = base(seed);
    train_loop(p, corpus().train, schedule(m, train_r, kFinetuneSteps, 3e-4, seed + 100));
    return p;
}

double ppl(const ModelParams& p, Method m, double r, std::uint64_t seed) {
    return eval_perplexity(p, corpus().heldout, m, r, seed, kSeqLen, kSpanLen, kWindows).ppl;
}

}  // namespace

TrendOutcome table_trend() {
    const double test_r[] = {0.3, 0.5, 0.8, 0.9};
    const Method methods[] = {Method::KvCompression, Method::Local, Method::Scattered};
    std::size_t kv_wins = 0;
    bool scattered_worst = true;
    std::ostringstream log;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        std::map<Method, std::map<double, double>> grid;
        for (Method m : methods) {
            const ModelParams p = finetune(seed, m, 0.8);
            for (double r : test_r) grid[m][r] = ppl(p, m, r, seed);
            std::fprintf(stderr, "  seed %llu %-15s r0.3=%.3f r0.5=%.3f r0.8=%.3f r0.9=%.3f\n",
                         static_cast<unsigned long long>(seed), to_string(m).c_str(), grid[m][0.3], grid[m][0.5],
                         grid[m][0.8], grid[m][0.9]);
        }
        const double kv = grid[Method::KvCompression][0.8];
        if (kv < grid[Method::Local][0.8] && kv < grid[Method::Scattered][0.8]) ++kv_wins;
        for (double r : test_r) {
            const double s = grid[Method::Scattered][r];
            if (!(s > grid[Method::KvCompression][r] && s > grid[Method::Local][r])) scattered_worst = false;
        }
        log << " s" << seed << "(kv " << kv << " local " << grid[Method::Local][0.8] << " scat "
            << grid[Method::Scattered][0.8] << ")";
    }
    std::ostringstream detail;
    detail << "kv best at r=0.8 in " << kv_wins << "/" << kSeeds << " seeds, scattered worst at all r>=0.3: "
           << (scattered_worst ? "yes" : "no") << ";" << log.str();
    return {kv_wins >= 2 && scattered_worst, detail.str()};
}

TrendOutcome sweep_trend() {
    std::size_t ok = 0;
    std::ostringstream log;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const double low = ppl(finetune(seed, Method::KvCompression, 0.1), Method::KvCompression, 0.9, seed);
        const double high = ppl(finetune(seed, Method::KvCompression, 0.9), Method::KvCompression, 0.9, seed);
        std::fprintf(stderr, "  seed %llu test r=0.9: train 0.1 -> %.3f, train 0.9 -> %.3f\n",
                     static_cast<unsigned long long>(seed), low, high);
        if (high <= low) ++ok;
        log << " s" << seed << "(" << low << " vs " << high << ")";
    }
    std::ostringstream detail;
    detail << "r=0.9-trained <= r=0.1-trained at test r=0.9 in " << ok << "/" << kSeeds << " seeds;" << log.str();
    return {ok >= 2, detail.str()};
}

}  // namespace acceptance
