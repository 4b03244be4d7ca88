#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "kvc/checkpoint.hpp"
#include "kvc/error.hpp"
#include "kvc/evalgen.hpp"
#include "kvc/ops.hpp"
#include "kvc/train.hpp"
#include "run_config.hpp"

using namespace kvc;
using kvc::cli::RunConfig;

namespace {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

fs::path out_dir(const RunConfig& cfg) {
    const fs::path dir = cfg.path("paths.out");
    fs::create_directories(dir);
    cfg.write_echo(dir);
    std::cerr << "seed " << cfg.seed() << ", config echoed to " << (dir / "config.txt").string() << '\n';
    return dir;
}

Tokenizer load_tokenizer(const RunConfig& cfg, const std::string* corpus_text = nullptr) {
    if (cfg.has_value("paths.tokenizer")) {
        return Tokenizer::load(cfg.path("paths.tokenizer"));
    }
    if (parse_tokenizer_mode(cfg.get("tokenizer.mode")) == TokenizerMode::Byte) {
        return Tokenizer::byte_level();
    }
    if (!corpus_text) {
        throw ConfigError("word tokenizer needs paths.tokenizer (see `kvc tokenize`)");
    }
    return Tokenizer::train_words(*corpus_text, cfg.count("tokenizer.max_vocab"), cfg.count("tokenizer.min_count"));
}

std::string corpus_text(const RunConfig& cfg) {
    if (!cfg.has_value("paths.corpus")) {
        throw ConfigError("paths.corpus is not set");
    }
    std::string text = read_text_file(cfg.path("paths.corpus"));
    if (text.empty()) {
        throw DataError("corpus " + cfg.get("paths.corpus") + " is empty");
    }
    return text;
}

Corpus load_corpus(const RunConfig& cfg, const Tokenizer& tok, const std::string& text) {
    return split_corpus(tok.encode(text), cfg.number("data.heldout_fraction"));
}

void check_vocab(const ModelParams& params, const Tokenizer& tok) {
    if (params.config().vocab_size != tok.vocab_size()) {
        throw SchemaError("checkpoint vocabulary " + std::to_string(params.config().vocab_size) +
                          " does not match tokenizer vocabulary " + std::to_string(tok.vocab_size()));
    }
}

ModelParams load_model(const RunConfig& cfg, const Tokenizer& tok) {
    if (!cfg.has_value("paths.checkpoint")) {
        throw ConfigError("paths.checkpoint is not set");
    }
    ModelParams params = load_checkpoint(cfg.path("paths.checkpoint"));
    check_vocab(params, tok);
    return params;
}

ModelParams initial_model(const RunConfig& cfg, const Tokenizer& tok) {
    if (cfg.has_value("paths.init")) {
        ModelParams p = load_checkpoint(cfg.path("paths.init"));
        check_vocab(p, tok);
        return p;
    }
    return ModelParams::init(cfg.model(tok.vocab_size()), cfg.seed());
}

void emit_report(const fs::path& dir, const std::vector<ReportRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ReportRow& r : rows) arr.push_back(to_json(r));
    write_file(dir / "report.json", arr.dump(2) + "\n");
    write_file(dir / "report.csv", report_csv(rows));
    std::cout << report_table(rows);
}

// ---- subcommands ----------------------------------------------------------

int cmd_tokenize(const RunConfig& cfg) {
    const std::string text = corpus_text(cfg);
    const Tokenizer tok = load_tokenizer(cfg, &text);
    const fs::path dir = out_dir(cfg);
    tok.save(dir / "tokenizer.json");
    const Corpus c = load_corpus(cfg, tok, text);
    const nlohmann::json stats{{"mode", to_string(tok.mode())},
                               {"vocab_size", tok.vocab_size()},
                               {"tokens", c.train.size() + c.heldout.size()},
                               {"train_tokens", c.train.size()},
                               {"heldout_tokens", c.heldout.size()},
                               {"bytes", text.size()}};
    write_file(dir / "stats.json", stats.dump(2) + "\n");
    std::cout << stats.dump(2) << '\n';
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const std::string text = corpus_text(cfg);
    const Tokenizer tok = load_tokenizer(cfg, &text);
    const Corpus corpus = load_corpus(cfg, tok, text);
    const TrainConfig tc = cfg.train();
    ModelParams params = initial_model(cfg, tok);
    const fs::path dir = out_dir(cfg);
    tok.save(dir / "tokenizer.json");
    params.set_scope(tc.scope);
    const std::string before = frozen_digest(params);
    const std::size_t every = std::max<std::size_t>(1, cfg.count("train.log_every"));
    const auto trace = train_loop(params, corpus.train, tc, [&](const LossRecord& rec) {
        if (rec.step % every == 0 || rec.step == 1 || rec.step == tc.steps) {
            std::cerr << "step " << rec.step << " loss " << rec.loss << '\n';
        }
    });
    save_checkpoint(dir / "model.ckpt", params);
    write_loss_trace(dir / "loss.jsonl", trace);
    const nlohmann::json summary{
        {"steps", trace.size()},
        {"final_loss", trace.empty() ? nlohmann::json(nullptr) : nlohmann::json(trace.back().loss)},
        {"trainable_params", params.trainable_count()},
        {"total_params", params.parameter_count()},
        {"trainable_fraction", static_cast<double>(params.trainable_count()) / static_cast<double>(params.parameter_count())},
        {"frozen_sha256_before", before},
        {"frozen_sha256_after", frozen_digest(params)},
        {"checkpoint", (dir / "model.ckpt").string()}};
    write_file(dir / "train_summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    const std::string text = corpus_text(cfg);
    const Tokenizer tok = load_tokenizer(cfg);
    const ModelParams params = load_model(cfg, tok);
    const Corpus corpus = load_corpus(cfg, tok, text);
    const EvalConfig ec = cfg.eval();
    const fs::path dir = out_dir(cfg);
    std::vector<ReportRow> rows;
    for (double r : ec.ratios) {
        const auto res = eval_perplexity(params, corpus.heldout, ec.method, r, ec.seed, ec.seq_len, ec.max_span_len,
                                         ec.max_windows);
        ReportRow row;
        row.method = ec.method;
        row.r = r;
        row.ppl = res.ppl;
        rows.push_back(row);
        std::cerr << to_string(ec.method) << " r=" << r << " ppl " << res.ppl << " over " << res.scored << " tokens\n";
    }
    emit_report(dir, rows);
    return 0;
}

// mean NLL of `completion` given `prefix`, full causal attention
double fluency_ppl(const ModelParams& params, std::span<const std::int32_t> prefix,
                   std::span<const std::int32_t> completion) {
    if (completion.empty()) return std::nan("");
    std::vector<std::int32_t> all(prefix.begin(), prefix.end());
    all.insert(all.end(), completion.begin(), completion.end());
    std::vector<std::int32_t> pos(all.size());
    std::iota(pos.begin(), pos.end(), 0);
    const StepOutput out = forward_full(params, all, AttentionMask::causal(all.size()), pos);
    const std::size_t real = params.config().real_vocab();
    double nll = 0.0;
    for (std::size_t i = prefix.size(); i < all.size(); ++i) {
        const auto row = out.logits.row(i - 1).subspan(0, real);
        nll += log_sum_exp(row) - static_cast<double>(row[static_cast<std::size_t>(all[i])]);
    }
    return std::exp(nll / static_cast<double>(completion.size()));
}

int cmd_generate(const RunConfig& cfg) {
    const Tokenizer tok = load_tokenizer(cfg);
    const ModelParams params = load_model(cfg, tok);
    const EvalConfig ec = cfg.eval();
    if (ec.method == Method::Scattered) {
        throw UnsupportedMethodError("scattered attention has no cache policy for generation");
    }
    std::vector<std::vector<std::int32_t>> prefixes;
    std::vector<std::vector<std::int32_t>> references;
    if (cfg.has_value("paths.prefix")) {
        std::istringstream lines(read_text_file(cfg.path("paths.prefix")));
        std::string line;
        while (std::getline(lines, line)) {
            if (!line.empty()) prefixes.push_back(tok.encode(line));
        }
    } else {
        const std::string text = corpus_text(cfg);
        const Corpus corpus = load_corpus(cfg, tok, text);
        const std::size_t need = ec.prefix_len + ec.gen_len;
        const std::size_t n = cfg.count("eval.n_prefixes");
        if (corpus.heldout.size() >= need && n > 0) {
            const std::size_t stride = std::max<std::size_t>(need, (corpus.heldout.size() - need) / n);
            for (std::size_t i = 0; i < n && i * stride + need <= corpus.heldout.size(); ++i) {
                const auto* base = corpus.heldout.data() + i * stride;
                prefixes.emplace_back(base, base + ec.prefix_len);
                references.emplace_back(base + ec.prefix_len, base + need);
            }
        }
    }
    if (prefixes.empty()) {
        throw DataError("no prefixes to continue");
    }
    const fs::path dir = out_dir(cfg);
    std::ofstream comp(dir / "completions.jsonl", std::ios::trunc);
    std::vector<ReportRow> rows;
    for (double r : ec.ratios) {
        RougeScore mean{};
        double fluency = 0.0;
        std::size_t n = 0, fluent = 0, peak = 0;
        for (std::size_t p = 0; p < prefixes.size(); ++p) {
            for (std::size_t s = 0; s < ec.n_samples; ++s) {
                Rng rng = Rng::stream(ec.seed, p, s);
                const Generation g = generate(params, prefixes[p], ec.method, r, ec.gen_len, ec, rng);
                const std::string text = tok.decode(g.tokens);
                nlohmann::json line{{"prefix", p},   {"sample", s},           {"method", to_string(ec.method)},
                                    {"r", r},        {"seed", ec.seed},       {"text", text},
                                    {"tokens", g.tokens}, {"cache_alive_after_prefix", g.cache_alive_after_prefix}};
                if (!references.empty()) {
                    const RougeScore sc = rouge_l(split_words(text), split_words(tok.decode(references[p])));
                    line["rouge"] = {{"p", sc.precision}, {"r", sc.recall}, {"f1", sc.f1}};
                    mean.precision += sc.precision;
                    mean.recall += sc.recall;
                    mean.f1 += sc.f1;
                }
                const double f = fluency_ppl(params, prefixes[p], g.tokens);
                if (std::isfinite(f)) {
                    fluency += std::log(f);
                    ++fluent;
                }
                peak = std::max(peak, g.peak_cache_bytes);
                comp << line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
                ++n;
            }
        }
        ReportRow row;
        row.method = ec.method;
        row.r = r;
        if (fluent > 0) row.ppl = std::exp(fluency / static_cast<double>(fluent));
        if (!references.empty() && n > 0) {
            row.rouge = RougeScore{mean.precision / n, mean.recall / n, mean.f1 / n};
        }
        row.peak_cache_bytes = peak;
        row.note = "ppl = self-scored fluency";
        rows.push_back(row);
    }
    emit_report(dir, rows);
    return 0;
}

int cmd_profile(const RunConfig& cfg) {
    const Tokenizer tok = load_tokenizer(cfg);
    const ModelParams params = cfg.has_value("paths.checkpoint")
                                   ? load_model(cfg, tok)
                                   : ModelParams::init(cfg.model(tok.vocab_size()), cfg.seed());
    const EvalConfig ec = cfg.eval();
    std::vector<std::size_t> budgets;
    {
        std::stringstream ss(cfg.get("profile.budgets"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.find_first_not_of(" \t") != std::string::npos) budgets.push_back(kvc::cli::parse_bytes(item));
        }
    }
    if (budgets.empty()) {
        throw ConfigError("profile.budgets is empty");
    }
    const std::size_t act = kvc::cli::parse_bytes(cfg.get("profile.activation_bytes"));
    const std::size_t overhead = act > 0 ? params.weight_bytes() + act : default_overhead(params);
    const std::size_t prefix_len = cfg.count("profile.prefix_len");
    const std::size_t gen_len = cfg.count("profile.gen_len");
    const fs::path dir = out_dir(cfg);
    std::vector<ReportRow> rows;
    std::size_t feasible = 0;
    for (std::size_t budget : budgets) {
        for (double r : ec.ratios) {
            ReportRow row;
            row.method = ec.method;
            row.r = r;
            row.budget_bytes = budget;
            try {
                const auto res = profile_throughput(params, prefix_len, gen_len, ec.method, r, {budget, overhead}, ec);
                row.throughput_tps = res.tokens_per_second;
                row.peak_cache_bytes = res.peak_cache_bytes;
                row.max_batch = res.max_batch;
                ++feasible;
                std::cerr << "budget " << budget << " r=" << r << " b*=" << res.max_batch << " tok/s "
                          << res.tokens_per_second << '\n';
            } catch (const InfeasibleBudgetError& e) {
                row.max_batch = 0;
                row.note = "infeasible";
                std::cerr << "budget " << budget << " r=" << r << ": " << e.what() << '\n';
            }
            rows.push_back(row);
        }
    }
    emit_report(dir, rows);
    if (feasible == 0) {
        throw InfeasibleBudgetError("no (budget, r) cell fits one sequence; overhead is " + std::to_string(overhead) +
                                    " bytes");
    }
    return 0;
}

int cmd_sweep(const RunConfig& cfg) {
    const std::string text = corpus_text(cfg);
    const Tokenizer tok = load_tokenizer(cfg, &text);
    const Corpus corpus = load_corpus(cfg, tok, text);
    TrainConfig tc = cfg.train();
    tc.method = Method::KvCompression;
    const EvalConfig ec = cfg.eval();
    const ModelParams base = initial_model(cfg, tok);
    const fs::path dir = out_dir(cfg);
    const auto train_r = cfg.numbers("sweep.train_ratios");
    const auto test_r = cfg.numbers("sweep.test_ratios");
    const SweepResult sw = sweep_generalization(
        train_r, test_r,
        [&](double r) {
            ModelParams p = base;
            TrainConfig run = tc;
            run.ratio = r;
            std::cerr << "training at r=" << r << '\n';
            train_loop(p, corpus.train, run);
            std::ostringstream name;
            name << "sweep_r" << r << ".ckpt";
            save_checkpoint(dir / name.str(), p);
            return p;
        },
        corpus.heldout, ec);
    write_file(dir / "sweep.json", to_json(sw).dump(2) + "\n");
    write_file(dir / "sweep.csv", to_csv(sw));
    std::cout << to_csv(sw);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sentinel-token KV-cache compression toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "flat key = value config file");
    std::map<std::string, std::string> flags;
    for (const auto& key : RunConfig::keys()) {
        app.add_option("--" + key.name, flags[key.name], key.help + (key.help.empty() ? "" : "; ") + "env " +
                                                             RunConfig::env_name(key.name));
    }
    using Cmd = int (*)(const RunConfig&);
    const std::vector<std::tuple<std::string, std::string, Cmd>> commands{
        {"tokenize", "build a tokenizer and report corpus statistics", cmd_tokenize},
        {"train", "train or adapt a model", cmd_train},
        {"eval", "held-out perplexity per test ratio", cmd_eval},
        {"generate", "nucleus-sampled continuations", cmd_generate},
        {"profile", "decode throughput under memory budgets", cmd_profile},
        {"sweep", "train-ratio x test-ratio perplexity matrix", cmd_sweep},
    };
    for (const auto& [name, help, fn] : commands) {
        app.add_subcommand(name, help);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        cfg.apply_env();
        for (const auto& key : RunConfig::keys()) {
            if (app.count("--" + key.name) > 0) cfg.set(key.name, flags[key.name], "flag");
        }
        cfg.validate();
        for (const auto& [name, help, fn] : commands) {
            if (app.got_subcommand(name)) return fn(cfg);
        }
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
