#include "run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "kvc/error.hpp"

namespace kvc::cli {

const std::vector<KeySpec>& RunConfig::keys() {
    static const std::vector<KeySpec> table{
        {"seed", "0", "run seed"},
        {"paths.corpus", "", "UTF-8 text file"},
        {"paths.checkpoint", "", "model checkpoint to read (eval/generate/profile)"},
        {"paths.init", "", "checkpoint to start training from"},
        {"paths.tokenizer", "", "tokenizer JSON (byte-level when empty)"},
        {"paths.prefix", "", "prefix file for generate, one prefix per line"},
        {"paths.out", "runs/latest", "output directory"},
        {"tokenizer.mode", "byte", "byte | word"},
        {"tokenizer.max_vocab", "8192", "word mode vocabulary cap"},
        {"tokenizer.min_count", "1", "word mode minimum frequency"},
        {"data.heldout_fraction", "0.1", "tail fraction held out"},
        {"model.n_layers", "4", ""},
        {"model.n_heads", "4", ""},
        {"model.d_head", "32", ""},
        {"model.d_model", "0", "0 = n_heads * d_head"},
        {"model.max_positions", "1024", ""},
        {"model.pos_scheme", "rotary", "rotary | absolute"},
        {"model.lora_rank", "16", ""},
        {"model.lora_alpha", "0", "0 = rank"},
        {"train.lr", "2e-5", ""},
        {"train.beta1", "0.9", ""},
        {"train.beta2", "0.999", ""},
        {"train.eps", "1e-8", ""},
        {"train.weight_decay", "0.01", ""},
        {"train.batch_size", "12", ""},
        {"train.seq_len", "256", ""},
        {"train.steps", "1000", ""},
        {"train.method", "kv_compression", "none | kv_compression | local | scattered"},
        {"train.scope", "adapt", "adapt | full"},
        {"train.grad_clip", "0", "0 disables"},
        {"train.log_every", "50", ""},
        {"compress.ratio", "0.5", "train-time ratio, 0 <= r < 1"},
        {"compress.max_span_len", "25", ""},
        {"eval.method", "kv_compression", ""},
        {"eval.ratios", "0.0", "comma separated test ratios"},
        {"eval.seq_len", "256", ""},
        {"eval.max_windows", "0", "0 = whole held-out text"},
        {"eval.top_p", "0.9", ""},
        {"eval.n_samples", "8", ""},
        {"eval.n_prefixes", "4", "held-out prefixes when no prefix file"},
        {"eval.prefix_len", "128", ""},
        {"eval.gen_len", "64", ""},
        {"eval.prefill_block", "32", "0 = one-go prefill"},
        {"profile.budgets", "", "comma separated byte budgets (K/M/G suffixes)"},
        {"profile.prefix_len", "800", ""},
        {"profile.gen_len", "100", ""},
        {"profile.activation_bytes", "0", "0 = weights + 2x activation estimate"},
        {"sweep.train_ratios", "0.1,0.5,0.9", ""},
        {"sweep.test_ratios", "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", ""},
    };
    return table;
}

std::string RunConfig::env_name(const std::string& key) {
    std::string out = "KVC_";
    for (char c : key) {
        out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

RunConfig::RunConfig() {
    for (const KeySpec& k : keys()) {
        values_[k.name] = k.fallback;
        sources_[k.name] = "default";
    }
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& source) {
    if (!values_.count(key)) {
        throw ConfigError("unknown config key '" + key + "' (" + source + ")");
    }
    values_[key] = value;
    sources_[key] = source;
}

static std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path.string());
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), path.string() + ":" + std::to_string(lineno));
    }
}

void RunConfig::apply_env() {
    for (const KeySpec& k : keys()) {
        const std::string env = env_name(k.name);
        if (const char* v = std::getenv(env.c_str())) {
            set(k.name, v, "env " + env);
        }
    }
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown config key '" + key + "'");
    }
    return it->second;
}

static double to_double(const std::string& key, const std::string& text) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
        throw ConfigError(key + ": '" + text + "' is not a number");
    }
    return v;
}

double RunConfig::number(const std::string& key) const { return to_double(key, trim(get(key))); }

std::size_t RunConfig::count(const std::string& key) const {
    const std::string text = trim(get(key));
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError(key + ": '" + text + "' is not a non-negative integer");
    }
    return v;
}

std::vector<double> RunConfig::numbers(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(to_double(key, item));
    }
    return out;
}

std::size_t parse_bytes(const std::string& raw) {
    std::string text = trim(raw);
    double scale = 1.0;
    if (!text.empty()) {
        switch (std::toupper(static_cast<unsigned char>(text.back()))) {
            case 'K': scale = 1024.0; break;
            case 'M': scale = 1024.0 * 1024.0; break;
            case 'G': scale = 1024.0 * 1024.0 * 1024.0; break;
            default: break;
        }
        if (scale != 1.0) text.pop_back();
    }
    const double v = to_double("budget", text) * scale;
    if (v < 0) throw ConfigError("budget must be non-negative");
    return static_cast<std::size_t>(v);
}

ModelConfig RunConfig::model(std::size_t vocab_size) const {
    ModelConfig m;
    m.n_layers = count("model.n_layers");
    m.n_heads = count("model.n_heads");
    m.d_head = count("model.d_head");
    m.d_model = count("model.d_model");
    if (m.d_model == 0) m.d_model = m.n_heads * m.d_head;
    m.vocab_size = vocab_size;
    m.max_positions = count("model.max_positions");
    m.pos_scheme = parse_pos_scheme(get("model.pos_scheme"));
    m.lora_rank = count("model.lora_rank");
    m.lora_alpha = static_cast<float>(number("model.lora_alpha"));
    m.validate();
    return m;
}

TrainConfig RunConfig::train() const {
    TrainConfig t;
    t.adamw.lr = number("train.lr");
    t.adamw.beta1 = number("train.beta1");
    t.adamw.beta2 = number("train.beta2");
    t.adamw.eps = number("train.eps");
    t.adamw.weight_decay = number("train.weight_decay");
    t.batch_size = count("train.batch_size");
    t.seq_len = count("train.seq_len");
    t.steps = count("train.steps");
    t.method = parse_method(get("train.method"));
    t.scope = parse_train_scope(get("train.scope"));
    t.grad_clip = number("train.grad_clip");
    t.ratio = number("compress.ratio");
    t.max_span_len = count("compress.max_span_len");
    t.seed = seed();
    t.validate();
    return t;
}

EvalConfig RunConfig::eval() const {
    EvalConfig e;
    e.method = eval_method();
    e.ratios = numbers("eval.ratios");
    e.seed = seed();
    e.top_p = number("eval.top_p");
    e.n_samples = count("eval.n_samples");
    e.prefix_len = count("eval.prefix_len");
    e.gen_len = count("eval.gen_len");
    e.seq_len = count("eval.seq_len");
    e.max_span_len = count("compress.max_span_len");
    e.max_windows = count("eval.max_windows");
    e.prefill_block = count("eval.prefill_block");
    e.validate();
    return e;
}

void RunConfig::validate() const {
    model(258);
    train();
    eval();
    parse_tokenizer_mode(get("tokenizer.mode"));
    count("tokenizer.max_vocab");
    count("tokenizer.min_count");
    count("train.log_every");
    const double held = number("data.heldout_fraction");
    if (!(held >= 0.0 && held < 1.0)) {
        throw ConfigError("data.heldout_fraction must be in [0, 1)");
    }
    std::stringstream ss(get("profile.budgets"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) parse_bytes(item);
    }
    count("profile.prefix_len");
    count("profile.gen_len");
    parse_bytes(get("profile.activation_bytes"));
    for (const char* key : {"sweep.train_ratios", "sweep.test_ratios"}) {
        for (double r : numbers(key)) {
            CompressionConfig{r, 2, 0}.validate();
        }
    }
}

std::string RunConfig::echo() const {
    std::ostringstream out;
    for (const auto& [key, value] : values_) {
        out << key << " = " << value << "  # " << sources_.at(key) << '\n';
    }
    return out.str();
}

void RunConfig::write_echo(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.txt");
    if (!out) {
        throw DataError("cannot write " + (dir / "config.txt").string());
    }
    out << echo();
}

}  // namespace kvc::cli
