#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kvc/compress.hpp"
#include "kvc/mask.hpp"
#include "kvc/model.hpp"
#include "kvc/rng.hpp"

namespace kvc {

// ---- tokenizer ------------------------------------------------------------

enum class TokenizerMode : std::uint8_t { Byte, Word };

std::string to_string(TokenizerMode mode);
TokenizerMode parse_tokenizer_mode(std::string_view text);

// BYTE: ids 0..255 are bytes. WORD: id 0 is <unk>, then pieces (runs of
// letters/digits/apostrophes, runs of whitespace, single other characters)
// by descending corpus frequency. In both modes <CL> and <CR> take the last
// two ids.
class Tokenizer {
public:
    static Tokenizer byte_level();
    static Tokenizer train_words(std::string_view corpus, std::size_t max_vocab, std::size_t min_count = 1);

    TokenizerMode mode() const noexcept { return mode_; }
    std::size_t vocab_size() const noexcept;
    std::int32_t cl_id() const noexcept { return static_cast<std::int32_t>(vocab_size() - 2); }
    std::int32_t cr_id() const noexcept { return static_cast<std::int32_t>(vocab_size() - 1); }
    std::int32_t unk_id() const noexcept { return 0; }

    std::vector<std::int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const std::int32_t> ids) const;
    std::string piece(std::int32_t id) const;

    nlohmann::json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    static std::vector<std::string_view> split_pieces(std::string_view text);

private:
    TokenizerMode mode_ = TokenizerMode::Byte;
    std::vector<std::string> pieces_;  // WORD only, pieces_[0] = "<unk>"
    std::unordered_map<std::string, std::int32_t> lookup_;
};

// ---- corpus ---------------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path);

struct Corpus {
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> heldout;
};

// Leading (1 - heldout_fraction) of the token stream trains, the tail is held out.
Corpus split_corpus(std::vector<std::int32_t> tokens, double heldout_fraction = 0.1);

// ---- sequence preparation -------------------------------------------------

enum class Method : std::uint8_t { None, KvCompression, Local, Scattered };

std::string to_string(Method method);
Method parse_method(std::string_view text);

std::vector<std::int32_t> build_labels(const TransformedSeq& seq);

struct Example {
    TransformedSeq seq;
    AttentionMask mask;
    std::vector<std::int32_t> labels;
    std::size_t covered = 0;  // interior tokens (KV compression)
};

// Turns a window of real tokens into model input for the given method at
// ratio r. Randomness (spans, Bernoulli keeps) comes from `rng`.
Example prepare_example(std::span<const std::int32_t> window, Method method, double ratio, std::size_t max_span_len,
                        std::int32_t cl_id, std::int32_t cr_id, Rng& rng);

// ---- optimizer ------------------------------------------------------------

struct AdamWConfig {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// One AdamW update of a single tensor; t is the 1-based step number.
void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, const AdamWConfig& cfg, std::size_t t);

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // grads[i] belongs to params[i]; std::nullopt means "no gradient". A
    // gradient for a frozen parameter or of the wrong shape is a ContractError.
    void step(std::vector<Parameter>& params, const std::vector<std::optional<Tensor>>& grads);
    std::size_t steps_taken() const noexcept { return t_; }
    const AdamWConfig& config() const noexcept { return cfg_; }

private:
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// ---- training loop --------------------------------------------------------

struct TrainConfig {
    AdamWConfig adamw;
    std::size_t batch_size = 12;
    std::size_t seq_len = 256;
    Method method = Method::KvCompression;
    double ratio = 0.5;
    std::size_t max_span_len = 25;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    TrainScope scope = TrainScope::Adapt;
    double grad_clip = 0.0;  // global L2 clip, 0 disables

    void validate() const;
};

struct LossRecord {
    std::size_t step = 0;
    double loss = 0.0;
    std::size_t tokens_seen = 0;
};

using StepCallback = std::function<void(const LossRecord&)>;

// Trains `params` in place and returns the per-step loss trace.
std::vector<LossRecord> train_loop(ModelParams& params, std::span<const std::int32_t> tokens, const TrainConfig& cfg,
                                   const StepCallback& on_step = {});

// Mean loss and gradients of one packed batch of examples.
struct BatchResult {
    double loss = 0.0;
    std::size_t scored = 0;
    std::vector<std::optional<Tensor>> grads;
};
BatchResult loss_and_grads(const ModelParams& params, std::span<const Example> batch, bool want_grads = true);

nlohmann::json to_json(const LossRecord& rec);
void write_loss_trace(const std::filesystem::path& path, std::span<const LossRecord> trace);

// SHA-256 (hex) over the names and bytes of every frozen parameter.
std::string frozen_digest(const ModelParams& params);

}  // namespace kvc
