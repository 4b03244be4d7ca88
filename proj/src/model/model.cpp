#include "kvc/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "kvc/error.hpp"
#include "kvc/kernels.hpp"
#include "kvc/ops.hpp"
#include "kvc/rng.hpp"

namespace kvc {

namespace {

using kernels::Trans;

constexpr float kInitStd = 0.02f;

Tensor gaussian(Shape shape, float stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& v : t.data()) {
        v = static_cast<float>(rng.normal(0.0, stddev));
    }
    return t;
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

}  // namespace

std::string to_string(PosScheme scheme) { return scheme == PosScheme::Absolute ? "absolute" : "rotary"; }

PosScheme parse_pos_scheme(std::string_view text) {
    if (text == "absolute" || text == "ABSOLUTE") {
        return PosScheme::Absolute;
    }
    if (text == "rotary" || text == "ROTARY") {
        return PosScheme::Rotary;
    }
    throw ConfigError("unknown position scheme '" + std::string(text) + "' (expected absolute|rotary)");
}

std::string to_string(TrainScope scope) { return scope == TrainScope::Adapt ? "adapt" : "full"; }

TrainScope parse_train_scope(std::string_view text) {
    if (text == "adapt" || text == "ADAPT") {
        return TrainScope::Adapt;
    }
    if (text == "full" || text == "FULL") {
        return TrainScope::Full;
    }
    throw ConfigError("unknown training scope '" + std::string(text) + "' (expected adapt|full)");
}

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || d_head == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model != n_heads * d_head) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                          std::to_string(n_heads * d_head) + ")");
    }
    if (vocab_size < 4) {
        throw ConfigError("vocab_size must be at least 4 (two real tokens plus <CL>, <CR>)");
    }
    if (max_positions == 0) {
        throw ConfigError("max_positions must be positive");
    }
    if (pos_scheme == PosScheme::Rotary && d_head % 2 != 0) {
        throw ConfigError("rotary encoding needs an even d_head");
    }
    if (lora_alpha < 0.0f) {
        throw ConfigError("lora_alpha must be non-negative");
    }
}

std::size_t ModelParams::add(std::string name, Tensor value, ParamGroup group) {
    params_.push_back(Parameter{std::move(name), std::move(value), group, false});
    return params_.size() - 1;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelParams p;
    p.config_ = config;
    const std::size_t d = config.d_model;
    const float proj_std = kInitStd / std::sqrt(2.0f * static_cast<float>(config.n_layers));

    p.add("embed.tokens", gaussian({config.real_vocab(), d}, kInitStd, rng), ParamGroup::TokenEmbedding);
    p.add("embed.sentinels", gaussian({2, d}, kInitStd, rng), ParamGroup::SentinelEmbedding);
    if (config.pos_scheme == PosScheme::Absolute) {
        p.add("embed.positions", gaussian({config.max_positions, d}, kInitStd, rng), ParamGroup::PositionEmbedding);
    }
    auto projection = [&](const std::string& name, std::size_t d_out, std::size_t d_in, float stddev, bool lora,
                          ParamGroup group) {
        p.add(name + ".weight", gaussian({d_out, d_in}, stddev, rng), group);
        p.add(name + ".bias", Tensor({d_out}), group);
        if (lora && config.lora_rank > 0) {
            p.add(name + ".lora_a", gaussian({config.lora_rank, d_in}, kInitStd, rng), ParamGroup::Lora);
            p.add(name + ".lora_b", Tensor({d_out, config.lora_rank}), ParamGroup::Lora);
        }
    };
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string pre = layer_prefix(l);
        p.add(pre + "ln1.weight", Tensor({d}, 1.0f), ParamGroup::Norm);
        p.add(pre + "ln1.bias", Tensor({d}), ParamGroup::Norm);
        projection(pre + "attn.q", d, d, kInitStd, true, ParamGroup::Attention);
        projection(pre + "attn.k", d, d, kInitStd, true, ParamGroup::Attention);
        projection(pre + "attn.v", d, d, kInitStd, true, ParamGroup::Attention);
        projection(pre + "attn.o", d, d, proj_std, true, ParamGroup::Attention);
        p.add(pre + "ln2.weight", Tensor({d}, 1.0f), ParamGroup::Norm);
        p.add(pre + "ln2.bias", Tensor({d}), ParamGroup::Norm);
        projection(pre + "mlp.fc", config.mlp_width(), d, kInitStd, false, ParamGroup::Mlp);
        projection(pre + "mlp.proj", d, config.mlp_width(), proj_std, false, ParamGroup::Mlp);
    }
    p.add("final_ln.weight", Tensor({d}, 1.0f), ParamGroup::Norm);
    p.add("final_ln.bias", Tensor({d}), ParamGroup::Norm);
    p.build_index();
    p.set_scope(TrainScope::Adapt);
    return p;
}

ModelParams ModelParams::from_parameters(const ModelConfig& config, std::vector<Parameter> params) {
    config.validate();
    ModelParams p;
    p.config_ = config;
    p.params_ = std::move(params);
    p.build_index();
    return p;
}

void ModelParams::build_index() {
    by_name_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!by_name_.emplace(params_[i].name, i).second) {
            throw SchemaError("duplicate parameter name " + params_[i].name);
        }
    }
    auto need = [&](const std::string& name) {
        const auto it = by_name_.find(name);
        if (it == by_name_.end()) {
            throw SchemaError("missing parameter " + name);
        }
        return it->second;
    };
    auto maybe = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = by_name_.find(name);
        return it == by_name_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
    };
    auto projection = [&](const std::string& name) {
        Projection proj{need(name + ".weight"), need(name + ".bias"), maybe(name + ".lora_a"), maybe(name + ".lora_b")};
        if (proj.lora_a.has_value() != proj.lora_b.has_value()) {
            throw SchemaError("LoRA factors of " + name + " are incomplete");
        }
        return proj;
    };
    tok_embed_ = need("embed.tokens");
    sentinel_embed_ = need("embed.sentinels");
    pos_embed_ = maybe("embed.positions");
    if (config_.pos_scheme == PosScheme::Absolute && !pos_embed_) {
        throw SchemaError("absolute position scheme requires embed.positions");
    }
    lnf_weight_ = need("final_ln.weight");
    lnf_bias_ = need("final_ln.bias");
    layers_.clear();
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string pre = layer_prefix(l);
        LayerIndex li;
        li.ln1_weight = need(pre + "ln1.weight");
        li.ln1_bias = need(pre + "ln1.bias");
        li.q = projection(pre + "attn.q");
        li.k = projection(pre + "attn.k");
        li.v = projection(pre + "attn.v");
        li.o = projection(pre + "attn.o");
        li.ln2_weight = need(pre + "ln2.weight");
        li.ln2_bias = need(pre + "ln2.bias");
        li.fc = projection(pre + "mlp.fc");
        li.proj = projection(pre + "mlp.proj");
        layers_.push_back(li);
    }
}

std::optional<std::size_t> ModelParams::find(std::string_view name) const {
    const auto it = by_name_.find(std::string(name));
    return it == by_name_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
}

const Parameter& ModelParams::get(std::string_view name) const {
    const auto i = find(name);
    if (!i) {
        throw IndexError("no parameter named " + std::string(name));
    }
    return params_[*i];
}

Parameter& ModelParams::get(std::string_view name) {
    return const_cast<Parameter&>(static_cast<const ModelParams&>(*this).get(name));
}

void ModelParams::set_scope(TrainScope scope) {
    for (Parameter& p : params_) {
        if (scope == TrainScope::Adapt) {
            p.trainable = p.group == ParamGroup::SentinelEmbedding || p.group == ParamGroup::Lora;
        } else {
            p.trainable = p.group != ParamGroup::Lora;
        }
    }
}

std::size_t ModelParams::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const Parameter& p : params_) {
        n += p.value.numel();
    }
    return n;
}

std::size_t ModelParams::trainable_count() const noexcept {
    std::size_t n = 0;
    for (const Parameter& p : params_) {
        n += p.trainable ? p.value.numel() : 0;
    }
    return n;
}

std::size_t ModelParams::weight_bytes() const noexcept { return parameter_count() * sizeof(float); }

ModelParams ModelParams::without_lora() const {
    std::vector<Parameter> kept;
    for (const Parameter& p : params_) {
        if (p.group != ParamGroup::Lora) {
            kept.push_back(p);
        }
    }
    ModelConfig cfg = config_;
    cfg.lora_rank = 0;
    return from_parameters(cfg, std::move(kept));
}

void PackedBatch::add_sequence(std::span<const std::int32_t> seq_tokens, std::span<const std::int32_t> seq_pos,
                               AttentionMask mask) {
    if (seq_tokens.size() != seq_pos.size() || mask.size() != seq_tokens.size()) {
        throw DimensionError("PackedBatch: tokens, positions and mask must have the same length");
    }
    if (layout->offsets.empty()) {
        layout->offsets.push_back(0);
    }
    tokens.insert(tokens.end(), seq_tokens.begin(), seq_tokens.end());
    pos_ids.insert(pos_ids.end(), seq_pos.begin(), seq_pos.end());
    layout->masks.push_back(std::move(mask));
    layout->offsets.push_back(tokens.size());
}

std::vector<Var> bind_parameters(Graph& graph, const ModelParams& params) {
    std::vector<Var> bound;
    bound.reserve(params.parameters().size());
    for (const Parameter& p : params.parameters()) {
        bound.push_back(graph.parameter(p.value, p.trainable));
    }
    return bound;
}

namespace {

void check_inputs(const ModelConfig& cfg, std::span<const std::int32_t> tokens, std::span<const std::int32_t> pos_ids) {
    if (tokens.size() != pos_ids.size()) {
        throw DimensionError("one position id per token required");
    }
    for (std::int32_t t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw IndexError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
        }
    }
    for (std::int32_t p : pos_ids) {
        if (p < 0) {
            throw IndexError("negative position id");
        }
        if (cfg.pos_scheme == PosScheme::Absolute && static_cast<std::size_t>(p) >= cfg.max_positions) {
            throw PositionOverflowError("position id " + std::to_string(p) + " exceeds max_positions " +
                                        std::to_string(cfg.max_positions));
        }
    }
}

Var graph_projection(Var x, const Projection& proj, std::span<const Var> bound, float lora_scale) {
    Var y = ag::add_row(ag::matmul_nt(x, bound[proj.weight]), bound[proj.bias]);
    if (proj.lora_a) {
        Var delta = ag::matmul_nt(ag::matmul_nt(x, bound[*proj.lora_a]), bound[*proj.lora_b]);
        y = ag::add(y, ag::scale(delta, lora_scale));
    }
    return y;
}

}  // namespace

ForwardTrace forward_graph(Graph& /*graph*/, const ModelParams& params, std::span<const Var> bound,
                           const PackedBatch& batch) {
    const ModelConfig& cfg = params.config();
    check_inputs(cfg, batch.tokens, batch.pos_ids);
    if (bound.size() != params.parameters().size()) {
        throw ContractError("bound parameter list does not match the model");
    }
    for (const AttentionMask& mask : batch.layout->masks) {
        if (!mask.is_causal_compatible()) {
            throw InvalidMaskError("attention mask exposes future positions");
        }
        if (!mask.rows_nonempty()) {
            throw InvalidMaskError("attention mask has a row with no visible key");
        }
    }
    const float lora_scale = cfg.lora_scale();
    Var table = ag::concat_rows(bound[params.token_embedding()], bound[params.sentinel_embedding()]);
    Var x = ag::gather_rows(table, batch.tokens);
    if (cfg.pos_scheme == PosScheme::Absolute) {
        x = ag::add(x, ag::gather_rows(bound[*params.position_embedding()], batch.pos_ids));
    }
    ForwardTrace trace;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerIndex& li = params.layer(l);
        Var h = ag::layernorm(x, bound[li.ln1_weight], bound[li.ln1_bias], cfg.norm_eps);
        Var q = graph_projection(h, li.q, bound, lora_scale);
        Var k = graph_projection(h, li.k, bound, lora_scale);
        Var v = graph_projection(h, li.v, bound, lora_scale);
        if (cfg.pos_scheme == PosScheme::Rotary) {
            q = ag::rotary(q, cfg.n_heads, batch.pos_ids, cfg.rotary_base);
            k = ag::rotary(k, cfg.n_heads, batch.pos_ids, cfg.rotary_base);
        }
        trace.keys.push_back(k);
        trace.values.push_back(v);
        Var att = ag::attention(q, k, v, cfg.n_heads, batch.layout);
        x = ag::add(x, graph_projection(att, li.o, bound, lora_scale));
        Var h2 = ag::layernorm(x, bound[li.ln2_weight], bound[li.ln2_bias], cfg.norm_eps);
        Var mlp = graph_projection(ag::gelu(graph_projection(h2, li.fc, bound, 0.0f)), li.proj, bound, 0.0f);
        x = ag::add(x, mlp);
    }
    Var out = ag::layernorm(x, bound[params.final_norm_weight()], bound[params.final_norm_bias()], cfg.norm_eps);
    trace.logits = ag::matmul_nt(out, table);
    return trace;
}

StepOutput forward_full(const ModelParams& params, std::span<const std::int32_t> tokens, const AttentionMask& mask,
                        std::span<const std::int32_t> pos_ids) {
    Graph graph(false);
    const std::vector<Var> bound = bind_parameters(graph, params);
    PackedBatch batch;
    batch.add_sequence(tokens, pos_ids, mask);
    ForwardTrace trace = forward_graph(graph, params, bound, batch);
    StepOutput out;
    out.logits = trace.logits.value();
    for (std::size_t l = 0; l < trace.keys.size(); ++l) {
        out.keys.push_back(trace.keys[l].value());
        out.values.push_back(trace.values[l].value());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cached inference path. Mirrors forward_graph op for op on plain tensors.

namespace {

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    Tensor y({x.rows(), weight.rows()});
    kernels::gemm(Trans::No, Trans::Yes, x.rows(), weight.rows(), x.cols(), x.raw(), x.cols(), weight.raw(),
                  weight.cols(), y.raw(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        kernels::axpy(1.0f, bias.raw(), y.row(r).data(), y.cols());
    }
    return y;
}

Tensor cached_projection(const Tensor& x, const Projection& proj, const ModelParams& params, float lora_scale) {
    Tensor y = dense(x, params.at(proj.weight).value, params.at(proj.bias).value);
    if (proj.lora_a) {
        const Tensor& a = params.at(*proj.lora_a).value;
        const Tensor& b = params.at(*proj.lora_b).value;
        Tensor t = matmul_nt(x, a);
        Tensor delta = matmul_nt(t, b);
        for (float& v : delta.data()) {
            v *= lora_scale;
        }
        for (std::size_t i = 0; i < y.numel(); ++i) {
            y[i] += delta[i];
        }
    }
    return y;
}

Tensor cached_layernorm(const Tensor& x, const Tensor& weight, const Tensor& bias, float eps) {
    Tensor y(x.shape());
    kernels::layernorm_rows(x.raw(), weight.raw(), bias.raw(), y.raw(), x.rows(), x.cols(), eps, nullptr, nullptr);
    return y;
}

struct QueryPlan {
    std::vector<std::uint32_t> cache_slots;
    bool all_cache = false;
    std::vector<std::uint32_t> chunk_rows;  // rows local to the request, includes self
};

struct RequestPlan {
    std::size_t row_begin = 0;
    std::size_t rows = 0;
    std::size_t base_index = 0;
    std::vector<QueryPlan> queries;
};

RequestPlan plan_request(const CachedRequest& req, std::size_t row_begin) {
    RequestPlan plan;
    plan.row_begin = row_begin;
    plan.rows = req.tokens.size();
    plan.base_index = req.cache->next_index();
    const auto alive = req.cache->alive_indices();
    plan.queries.resize(plan.rows);
    for (std::size_t i = 0; i < plan.rows; ++i) {
        QueryPlan& qp = plan.queries[i];
        const std::size_t q_index = plan.base_index + i;
        if (!req.visible) {
            qp.all_cache = true;
            for (std::size_t j = 0; j <= i; ++j) {
                qp.chunk_rows.push_back(static_cast<std::uint32_t>(j));
            }
            continue;
        }
        for (std::size_t s = 0; s < alive.size(); ++s) {
            if (req.visible(q_index, alive[s])) {
                qp.cache_slots.push_back(static_cast<std::uint32_t>(s));
            }
        }
        qp.all_cache = qp.cache_slots.size() == alive.size();
        for (std::size_t j = 0; j < i; ++j) {
            if (req.visible(q_index, plan.base_index + j)) {
                qp.chunk_rows.push_back(static_cast<std::uint32_t>(j));
            }
        }
        qp.chunk_rows.push_back(static_cast<std::uint32_t>(i));
    }
    return plan;
}

// Attention of one request's rows at one layer. q/k/v hold all packed rows.
void cached_attention(const RequestPlan& plan, const KVCache& cache, std::size_t layer, const Tensor& q,
                      const Tensor& k, const Tensor& v, std::size_t n_heads, Tensor& out) {
    const std::size_t width = q.cols();
    const std::size_t d_head = width / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));
    const std::size_t n_cache = cache.alive_count();
    const float* cache_k = cache.keys(layer);
    const float* cache_v = cache.values(layer);
    std::vector<float> scores;
    for (std::size_t i = 0; i < plan.rows; ++i) {
        const QueryPlan& qp = plan.queries[i];
        const std::size_t row = plan.row_begin + i;
        const std::size_t n_c = qp.all_cache ? n_cache : qp.cache_slots.size();
        const std::size_t total = n_c + qp.chunk_rows.size();
        scores.resize(total);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t col = h * d_head;
            const float* qh = q.raw() + row * width + col;
            if (qp.all_cache) {
                kernels::gemm(Trans::No, Trans::Yes, 1, n_c, d_head, qh, width, cache_k + col, width, scores.data(),
                              n_c, false, scale);
            } else {
                for (std::size_t s = 0; s < n_c; ++s) {
                    scores[s] = scale * kernels::dot(qh, cache_k + qp.cache_slots[s] * width + col, d_head);
                }
            }
            for (std::size_t j = 0; j < qp.chunk_rows.size(); ++j) {
                const std::size_t krow = plan.row_begin + qp.chunk_rows[j];
                scores[n_c + j] = scale * kernels::dot(qh, k.raw() + krow * width + col, d_head);
            }
            float max_value = -std::numeric_limits<float>::infinity();
            for (float s : scores) {
                max_value = std::max(max_value, s);
            }
            float sum = 0.0f;
            for (float& s : scores) {
                s = std::exp(s - max_value);
                sum += s;
            }
            const float inv = 1.0f / sum;
            for (float& s : scores) {
                s *= inv;
            }
            float* oh = out.raw() + row * width + col;
            std::fill(oh, oh + d_head, 0.0f);
            if (qp.all_cache) {
                kernels::gemm(Trans::No, Trans::No, 1, d_head, n_c, scores.data(), n_c, cache_v + col, width, oh,
                              width, true);
            } else {
                for (std::size_t s = 0; s < n_c; ++s) {
                    kernels::axpy(scores[s], cache_v + qp.cache_slots[s] * width + col, oh, d_head);
                }
            }
            for (std::size_t j = 0; j < qp.chunk_rows.size(); ++j) {
                const std::size_t vrow = plan.row_begin + qp.chunk_rows[j];
                kernels::axpy(scores[n_c + j], v.raw() + vrow * width + col, oh, d_head);
            }
        }
    }
}

}  // namespace

std::vector<StepOutput> forward_cached(const ModelParams& params, std::span<CachedRequest> requests) {
    const ModelConfig& cfg = params.config();
    const std::size_t d = cfg.d_model;
    std::vector<std::int32_t> tokens, pos_ids;
    std::vector<RequestPlan> plans;
    for (const CachedRequest& req : requests) {
        if (!req.cache) {
            throw ContractError("forward_cached: request without a cache");
        }
        if (req.cache->n_layers() != cfg.n_layers || req.cache->width() != d) {
            throw DimensionError("forward_cached: cache shape does not match the model");
        }
        check_inputs(cfg, req.tokens, req.pos_ids);
        plans.push_back(plan_request(req, tokens.size()));
        tokens.insert(tokens.end(), req.tokens.begin(), req.tokens.end());
        pos_ids.insert(pos_ids.end(), req.pos_ids.begin(), req.pos_ids.end());
    }
    const std::size_t rows = tokens.size();
    const float lora_scale = cfg.lora_scale();

    const Tensor& tok = params.at(params.token_embedding()).value;
    const Tensor& sent = params.at(params.sentinel_embedding()).value;
    Tensor x({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const auto id = static_cast<std::size_t>(tokens[r]);
        const float* src = id < cfg.real_vocab() ? tok.raw() + id * d : sent.raw() + (id - cfg.real_vocab()) * d;
        std::copy_n(src, d, x.raw() + r * d);
    }
    if (cfg.pos_scheme == PosScheme::Absolute) {
        const Tensor& pos = params.at(*params.position_embedding()).value;
        for (std::size_t r = 0; r < rows; ++r) {
            const float* src = pos.raw() + static_cast<std::size_t>(pos_ids[r]) * d;
            for (std::size_t c = 0; c < d; ++c) {
                x[r * d + c] += src[c];
            }
        }
    }

    std::vector<Tensor> new_keys, new_values;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerIndex& li = params.layer(l);
        Tensor h = cached_layernorm(x, params.at(li.ln1_weight).value, params.at(li.ln1_bias).value, cfg.norm_eps);
        Tensor q = cached_projection(h, li.q, params, lora_scale);
        Tensor k = cached_projection(h, li.k, params, lora_scale);
        Tensor v = cached_projection(h, li.v, params, lora_scale);
        if (cfg.pos_scheme == PosScheme::Rotary) {
            for (std::size_t r = 0; r < rows; ++r) {
                kernels::rotary_row(q.row(r).data(), cfg.n_heads, cfg.d_head, pos_ids[r], cfg.rotary_base, 1);
                kernels::rotary_row(k.row(r).data(), cfg.n_heads, cfg.d_head, pos_ids[r], cfg.rotary_base, 1);
            }
        }
        Tensor att({rows, d});
        for (std::size_t i = 0; i < requests.size(); ++i) {
            cached_attention(plans[i], *requests[i].cache, l, q, k, v, cfg.n_heads, att);
        }
        Tensor o = cached_projection(att, li.o, params, lora_scale);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x[i] += o[i];
        }
        Tensor h2 = cached_layernorm(x, params.at(li.ln2_weight).value, params.at(li.ln2_bias).value, cfg.norm_eps);
        Tensor f = cached_projection(h2, li.fc, params, 0.0f);
        for (float& val : f.data()) {
            val = kernels::gelu(val);
        }
        Tensor m = cached_projection(f, li.proj, params, 0.0f);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x[i] += m[i];
        }
        new_keys.push_back(std::move(k));
        new_values.push_back(std::move(v));
    }
    Tensor out = cached_layernorm(x, params.at(params.final_norm_weight()).value,
                                  params.at(params.final_norm_bias()).value, cfg.norm_eps);
    Tensor logits({rows, cfg.vocab_size});
    kernels::gemm(Trans::No, Trans::Yes, rows, cfg.real_vocab(), d, out.raw(), d, tok.raw(), d, logits.raw(),
                  cfg.vocab_size);
    kernels::gemm(Trans::No, Trans::Yes, rows, 2, d, out.raw(), d, sent.raw(), d, logits.raw() + cfg.real_vocab(),
                  cfg.vocab_size);
    if (!logits.all_finite()) {
        throw NumericError("non-finite logits in cached forward");
    }

    std::vector<StepOutput> results(requests.size());
    for (std::size_t i = 0; i < requests.size(); ++i) {
        const RequestPlan& plan = plans[i];
        StepOutput& res = results[i];
        res.logits = Tensor({plan.rows, cfg.vocab_size});
        std::copy_n(logits.raw() + plan.row_begin * cfg.vocab_size, plan.rows * cfg.vocab_size, res.logits.raw());
        std::vector<float> kbuf, vbuf;
        kbuf.reserve(cfg.n_layers * plan.rows * d);
        vbuf.reserve(cfg.n_layers * plan.rows * d);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            Tensor kl({plan.rows, d}), vl({plan.rows, d});
            std::copy_n(new_keys[l].raw() + plan.row_begin * d, plan.rows * d, kl.raw());
            std::copy_n(new_values[l].raw() + plan.row_begin * d, plan.rows * d, vl.raw());
            kbuf.insert(kbuf.end(), kl.data().begin(), kl.data().end());
            vbuf.insert(vbuf.end(), vl.data().begin(), vl.data().end());
            res.keys.push_back(std::move(kl));
            res.values.push_back(std::move(vl));
        }
        requests[i].cache->append(plan.rows, kbuf, vbuf);
    }
    return results;
}

StepOutput forward_cached(const ModelParams& params, std::span<const std::int32_t> tokens,
                          std::span<const std::int32_t> pos_ids, KVCache& cache, const VisibilityFn& visible) {
    CachedRequest req{tokens, pos_ids, &cache, visible};
    return std::move(forward_cached(params, std::span<CachedRequest>(&req, 1)).front());
}

StepOutput forward_step(const ModelParams& params, std::int32_t token, std::int32_t pos_id, KVCache& cache,
                        const std::optional<std::vector<std::size_t>>& visible) {
    const std::array<std::int32_t, 1> tokens{token};
    const std::array<std::int32_t, 1> positions{pos_id};
    if (!visible) {
        return forward_cached(params, tokens, positions, cache);
    }
    const std::size_t self = cache.next_index();
    std::vector<std::uint8_t> allowed(self + 1, 0);
    for (std::size_t index : *visible) {
        if (index == self) {
            continue;
        }
        if (!cache.is_alive(index)) {
            throw StaleIndexError("visible set references cache index " + std::to_string(index) + " which is " +
                                  (cache.state(index) == KVCache::EntryState::Evicted ? "evicted" : "absent"));
        }
        allowed[index] = 1;
    }
    allowed[self] = 1;
    VisibilityFn fn = [allowed = std::move(allowed)](std::size_t, std::size_t k) {
        return k < allowed.size() && allowed[k] != 0;
    };
    return forward_cached(params, tokens, positions, cache, fn);
}

KVCache make_cache(const ModelConfig& config) { return KVCache(config.n_layers, config.n_heads, config.d_head); }

Tensor apply_rotary(const Tensor& vec, std::int64_t pos_id, double base) {
    if (vec.numel() % 2 != 0) {
        throw ConfigError("rotary encoding needs an even head dimension, got " + std::to_string(vec.numel()));
    }
    Tensor out = vec;
    kernels::rotary_row(out.raw(), 1, out.numel(), pos_id, base, 1);
    return out;
}

}  // namespace kvc
