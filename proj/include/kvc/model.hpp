#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kvc/autograd.hpp"
#include "kvc/kvcache.hpp"
#include "kvc/mask.hpp"
#include "kvc/tensor.hpp"

namespace kvc {

enum class PosScheme : std::uint8_t { Absolute, Rotary };

std::string to_string(PosScheme scheme);
PosScheme parse_pos_scheme(std::string_view text);

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_model = 128;
    std::size_t d_head = 32;
    // Includes the two sentinel ids, which always occupy the last two slots.
    std::size_t vocab_size = 258;
    std::size_t max_positions = 1024;
    PosScheme pos_scheme = PosScheme::Rotary;
    // 0 disables the adapters entirely.
    std::size_t lora_rank = 16;
    // 0 means "same as rank" (scale 1).
    float lora_alpha = 0.0f;
    double rotary_base = 10000.0;
    float norm_eps = 1e-5f;

    void validate() const;

    std::size_t mlp_width() const noexcept { return 4 * d_model; }
    std::size_t real_vocab() const noexcept { return vocab_size - 2; }
    std::int32_t cl_id() const noexcept { return static_cast<std::int32_t>(vocab_size - 2); }
    std::int32_t cr_id() const noexcept { return static_cast<std::int32_t>(vocab_size - 1); }
    float lora_scale() const noexcept {
        return lora_rank == 0 ? 0.0f : (lora_alpha > 0.0f ? lora_alpha : static_cast<float>(lora_rank)) /
                                           static_cast<float>(lora_rank);
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamGroup : std::uint8_t { TokenEmbedding, SentinelEmbedding, PositionEmbedding, Attention, Lora, Mlp, Norm };

// Which parameters an optimizer may touch.
//  Adapt: sentinel embedding rows and LoRA factors only.
//  Full:  every base parameter (LoRA factors stay frozen at their init).
enum class TrainScope : std::uint8_t { Adapt, Full };

std::string to_string(TrainScope scope);
TrainScope parse_train_scope(std::string_view text);

struct Parameter {
    std::string name;
    Tensor value;
    ParamGroup group;
    bool trainable = false;
};

struct Projection {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::optional<std::size_t> lora_a;  // [rank × d_in]
    std::optional<std::size_t> lora_b;  // [d_out × rank]
};

struct LayerIndex {
    std::size_t ln1_weight = 0, ln1_bias = 0;
    Projection q, k, v, o;
    std::size_t ln2_weight = 0, ln2_bias = 0;
    Projection fc, proj;
};

// Decoder-only transformer weights: pre-norm blocks, GELU MLP of width
// 4·d_model, LoRA on the q/k/v/o projections and an output head tied to the
// token embedding (real rows followed by the two sentinel rows).
class ModelParams {
public:
    ModelParams() = default;

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }
    Parameter& at(std::size_t i) { return params_.at(i); }
    const Parameter& at(std::size_t i) const { return params_.at(i); }
    std::optional<std::size_t> find(std::string_view name) const;
    const Parameter& get(std::string_view name) const;
    Parameter& get(std::string_view name);

    std::size_t token_embedding() const noexcept { return tok_embed_; }
    std::size_t sentinel_embedding() const noexcept { return sentinel_embed_; }
    std::optional<std::size_t> position_embedding() const noexcept { return pos_embed_; }
    std::size_t final_norm_weight() const noexcept { return lnf_weight_; }
    std::size_t final_norm_bias() const noexcept { return lnf_bias_; }
    const LayerIndex& layer(std::size_t l) const { return layers_.at(l); }

    void set_scope(TrainScope scope);
    std::size_t parameter_count() const noexcept;
    std::size_t trainable_count() const noexcept;

    // Bytes of all float payloads (the weight share of a memory budget).
    std::size_t weight_bytes() const noexcept;

    // Removes every LoRA factor (the model becomes the bare base model).
    ModelParams without_lora() const;

    // Rebuilds the index tables from parameter names (after loading).
    static ModelParams from_parameters(const ModelConfig& config, std::vector<Parameter> params);

private:
    std::size_t add(std::string name, Tensor value, ParamGroup group);
    void build_index();

    ModelConfig config_;
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> by_name_;
    std::size_t tok_embed_ = 0;
    std::size_t sentinel_embed_ = 0;
    std::optional<std::size_t> pos_embed_;
    std::size_t lnf_weight_ = 0, lnf_bias_ = 0;
    std::vector<LayerIndex> layers_;
};

// Logits for each query row plus the keys/values those rows contribute,
// one [rows × d_model] tensor per layer (keys after rotary encoding).
struct StepOutput {
    Tensor logits;
    std::vector<Tensor> keys;
    std::vector<Tensor> values;
};

// Packed multi-sequence input for the differentiable forward pass.
struct PackedBatch {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> pos_ids;
    std::shared_ptr<AttentionLayout> layout = std::make_shared<AttentionLayout>();

    void add_sequence(std::span<const std::int32_t> tokens, std::span<const std::int32_t> pos_ids,
                      AttentionMask mask);
    std::size_t rows() const noexcept { return tokens.size(); }
};

struct ForwardTrace {
    Var logits;
    std::vector<Var> keys;
    std::vector<Var> values;
};

// Binds every parameter as a graph leaf (requires_grad = trainable).
std::vector<Var> bind_parameters(Graph& graph, const ModelParams& params);

ForwardTrace forward_graph(Graph& graph, const ModelParams& params, std::span<const Var> bound,
                           const PackedBatch& batch);

// Whole-sequence forward with an explicit attention mask.
StepOutput forward_full(const ModelParams& params, std::span<const std::int32_t> tokens, const AttentionMask& mask,
                        std::span<const std::int32_t> pos_ids);

// Visibility rule for cached inference: may query (sequence index q) attend key
// index k? An empty function means every alive entry plus every earlier row of
// the chunk.
using VisibilityFn = std::function<bool(std::size_t query_index, std::size_t key_index)>;

struct CachedRequest {
    std::span<const std::int32_t> tokens;
    std::span<const std::int32_t> pos_ids;
    KVCache* cache = nullptr;
    VisibilityFn visible;
};

// Runs new rows against existing cache contents and appends their keys/values.
// Rows of all requests share the dense projections; attention runs per request.
std::vector<StepOutput> forward_cached(const ModelParams& params, std::span<CachedRequest> requests);
StepOutput forward_cached(const ModelParams& params, std::span<const std::int32_t> tokens,
                          std::span<const std::int32_t> pos_ids, KVCache& cache, const VisibilityFn& visible = {});

// One decode step. `visible` lists the cached indices the token may attend
// (the new token always sees itself); nullopt means all alive entries.
StepOutput forward_step(const ModelParams& params, std::int32_t token, std::int32_t pos_id, KVCache& cache,
                        const std::optional<std::vector<std::size_t>>& visible = std::nullopt);

KVCache make_cache(const ModelConfig& config);

// Standalone rotary rotation of one head vector (d_head values).
Tensor apply_rotary(const Tensor& vec, std::int64_t pos_id, double base = 10000.0);

}  // namespace kvc
