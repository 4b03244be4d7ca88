#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kvc/evalgen.hpp"
#include "kvc/train.hpp"

namespace kvc::cli {

struct KeySpec {
    std::string name;
    std::string fallback;
    std::string help;
};

// Flat `section.key = value` settings. Later layers win:
// default < file < environment (KVC_SECTION_KEY) < command line.
class RunConfig {
public:
    static const std::vector<KeySpec>& keys();
    static std::string env_name(const std::string& key);

    RunConfig();

    void load_file(const std::filesystem::path& path);
    void apply_env();
    void set(const std::string& key, const std::string& value, const std::string& source);

    const std::string& get(const std::string& key) const;
    bool has_value(const std::string& key) const { return !get(key).empty(); }
    double number(const std::string& key) const;
    std::size_t count(const std::string& key) const;
    std::vector<double> numbers(const std::string& key) const;
    std::filesystem::path path(const std::string& key) const { return get(key); }
    std::uint64_t seed() const { return count("seed"); }

    ModelConfig model(std::size_t vocab_size) const;
    TrainConfig train() const;
    EvalConfig eval() const;
    Method eval_method() const { return parse_method(get("eval.method")); }

    // Parses every typed key once so bad values fail before any work starts.
    void validate() const;

    std::string echo() const;
    void write_echo(const std::filesystem::path& dir) const;

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> sources_;
};

// "64M", "1.5G", "4096" → bytes
std::size_t parse_bytes(const std::string& text);

}  // namespace kvc::cli
