#include "kvc/train.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "kvc/error.hpp"
#include "kvc/ops.hpp"

namespace kvc {

std::string to_string(Method method) {
    switch (method) {
        case Method::None: return "none";
        case Method::KvCompression: return "kv_compression";
        case Method::Local: return "local";
        case Method::Scattered: return "scattered";
    }
    return "?";
}

Method parse_method(std::string_view text) {
    std::string s(text);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "none") return Method::None;
    if (s == "kv_compression" || s == "kv" || s == "kvc") return Method::KvCompression;
    if (s == "local") return Method::Local;
    if (s == "scattered") return Method::Scattered;
    throw ConfigError("unknown method '" + std::string(text) + "' (expected none|kv_compression|local|scattered)");
}

std::vector<std::int32_t> build_labels(const TransformedSeq& seq) {
    std::vector<std::int32_t> labels(seq.size(), kIgnore);
    std::int32_t next_normal = kIgnore;
    for (std::size_t i = seq.size(); i-- > 0;) {
        if (seq.roles[i] != Role::Normal) {
            continue;
        }
        labels[i] = next_normal;
        next_normal = seq.tokens[i];
    }
    return labels;
}

Example prepare_example(std::span<const std::int32_t> window, Method method, double ratio, std::size_t max_span_len,
                        std::int32_t cl_id, std::int32_t cr_id, Rng& rng) {
    Example ex;
    switch (method) {
        case Method::None:
            ex.seq = identity_transform(window);
            ex.mask = AttentionMask::causal(window.size());
            break;
        case Method::KvCompression: {
            const SpanSample spans = sample_spans(window.size(), ratio, max_span_len, rng);
            ex.seq = transform(window, spans.spans, cl_id, cr_id);
            ex.mask = build_compression_mask(ex.seq);
            ex.covered = spans.covered;
            break;
        }
        case Method::Local:
            ex.seq = identity_transform(window);
            ex.mask = build_local_mask(window.size(), ratio);
            break;
        case Method::Scattered:
            ex.seq = identity_transform(window);
            ex.mask = build_scattered_mask(window.size(), ratio, rng);
            break;
    }
    ex.labels = build_labels(ex.seq);
    return ex;
}

void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, const AdamWConfig& cfg, std::size_t t) {
    if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v)) {
        throw ContractError("adamw: gradient/state shape " + shape_string(grad.shape()) + " does not match parameter " +
                            shape_string(param.shape()));
    }
    if (t == 0) {
        throw ContractError("adamw: step numbers start at 1");
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = grad[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
        param[i] = static_cast<float>(param[i] * decay - cfg.lr * update);
    }
}

void AdamW::step(std::vector<Parameter>& params, const std::vector<std::optional<Tensor>>& grads) {
    if (grads.size() != params.size()) {
        throw ContractError("adamw: one gradient slot per parameter required");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i] && !params[i].trainable) {
            throw ContractError("adamw: gradient supplied for frozen parameter " + params[i].name);
        }
        if (grads[i] && !grads[i]->same_shape(params[i].value)) {
            throw ContractError("adamw: gradient shape mismatch for " + params[i].name);
        }
    }
    if (m_.empty()) {
        for (const Parameter& p : params) {
            m_.emplace_back(p.value.shape());
            v_.emplace_back(p.value.shape());
        }
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i]) {
            adamw_update(params[i].value, *grads[i], m_[i], v_[i], cfg_, t_);
        }
    }
}

void TrainConfig::validate() const {
    CompressionConfig{ratio, max_span_len, 0}.validate();
    if (batch_size == 0 || seq_len < 2) {
        throw ConfigError("batch size must be positive and sequence length at least 2");
    }
    if (!(adamw.lr > 0.0) || !(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0) ||
        !(adamw.eps > 0.0) || adamw.weight_decay < 0.0) {
        throw ConfigError("invalid AdamW hyper-parameters");
    }
    if (grad_clip < 0.0) {
        throw ConfigError("grad_clip must be non-negative");
    }
}

BatchResult loss_and_grads(const ModelParams& params, std::span<const Example> batch, bool want_grads) {
    Graph graph(want_grads);
    const std::vector<Var> bound = bind_parameters(graph, params);
    PackedBatch packed;
    std::vector<std::int32_t> labels;
    BatchResult out;
    for (const Example& ex : batch) {
        packed.add_sequence(ex.seq.tokens, ex.seq.pos_ids, ex.mask);
        for (std::size_t i = 0; i < ex.labels.size(); ++i) {
            // sentinel rows never score, whatever their label says
            labels.push_back(ex.seq.roles[i] == Role::Normal ? ex.labels[i] : kIgnore);
        }
    }
    for (std::int32_t l : labels) {
        out.scored += l == kIgnore ? 0 : 1;
    }
    ForwardTrace trace = forward_graph(graph, params, bound, packed);
    Var loss = ag::cross_entropy(trace.logits, labels);
    out.loss = loss.value()[0];
    out.grads.resize(params.parameters().size());
    if (want_grads) {
        graph.backward(loss);
        for (std::size_t i = 0; i < bound.size(); ++i) {
            if (params.at(i).trainable) {
                out.grads[i] = bound[i].grad();
            }
        }
    }
    return out;
}

namespace {

void clip_gradients(std::vector<std::optional<Tensor>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        if (g) {
            for (float v : g->data()) sq += static_cast<double>(v) * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) {
        return;
    }
    const auto factor = static_cast<float>(max_norm / norm);
    for (auto& g : grads) {
        if (g) {
            for (float& v : g->data()) v *= factor;
        }
    }
}

}  // namespace

std::vector<LossRecord> train_loop(ModelParams& params, std::span<const std::int32_t> tokens, const TrainConfig& cfg,
                                   const StepCallback& on_step) {
    cfg.validate();
    if (tokens.size() < cfg.seq_len) {
        throw DataError("corpus has " + std::to_string(tokens.size()) + " tokens, fewer than one window of " +
                        std::to_string(cfg.seq_len));
    }
    const ModelConfig& mc = params.config();
    params.set_scope(cfg.scope);
    AdamW opt(cfg.adamw);
    std::vector<LossRecord> trace;
    std::size_t seen = 0;
    const std::size_t starts = tokens.size() - cfg.seq_len + 1;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng = Rng::stream(cfg.seed, step);
        std::vector<Example> batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t start = rng.below(starts);
            batch.push_back(prepare_example(tokens.subspan(start, cfg.seq_len), cfg.method, cfg.ratio,
                                            cfg.max_span_len, mc.cl_id(), mc.cr_id(), rng));
        }
        BatchResult res = loss_and_grads(params, batch);
        if (!std::isfinite(res.loss)) {
            throw NumericError("training loss became non-finite at step " + std::to_string(step + 1));
        }
        if (cfg.grad_clip > 0.0) {
            clip_gradients(res.grads, cfg.grad_clip);
        }
        opt.step(params.parameters(), res.grads);
        seen += res.scored;
        trace.push_back({step + 1, res.loss, seen});
        if (on_step) {
            on_step(trace.back());
        }
    }
    return trace;
}

nlohmann::json to_json(const LossRecord& rec) {
    return {{"step", rec.step}, {"loss", rec.loss}, {"tokens_seen", rec.tokens_seen}};
}

void write_loss_trace(const std::filesystem::path& path, std::span<const LossRecord> trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write loss trace " + path.string());
    }
    for (const LossRecord& rec : trace) {
        out << to_json(rec).dump() << '\n';
    }
}

std::string frozen_digest(const ModelParams& params) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) {
        throw std::runtime_error("EVP_MD_CTX_new failed");
    }
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const Parameter& p : params.parameters()) {
        if (p.trainable) {
            continue;
        }
        EVP_DigestUpdate(ctx, p.name.data(), p.name.size());
        const char sep = '\0';
        EVP_DigestUpdate(ctx, &sep, 1);
        EVP_DigestUpdate(ctx, p.value.raw(), p.value.numel() * sizeof(float));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

}  // namespace kvc
