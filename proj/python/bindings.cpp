#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kvc/checkpoint.hpp"
#include "kvc/error.hpp"
#include "kvc/evalgen.hpp"
#include "kvc/train.hpp"

namespace py = pybind11;
using namespace kvc;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::array_t<bool> mask_array(const AttentionMask& m) {
    const auto n = static_cast<py::ssize_t>(m.size());
    py::array_t<bool> out({n, n});
    auto view = out.mutable_unchecked<2>();
    for (py::ssize_t q = 0; q < n; ++q)
        for (py::ssize_t k = 0; k < n; ++k) view(q, k) = m.allowed(q, k);
    return out;
}

py::dict transformed_dict(const TransformedSeq& s) {
    std::vector<std::string> roles;
    for (Role r : s.roles) roles.push_back(to_string(r));
    std::vector<py::object> origin;
    for (std::size_t o : s.origin_map) origin.push_back(o == kSentinelOrigin ? py::none() : py::cast(o));
    py::dict d;
    d["tokens"] = s.tokens;
    d["roles"] = roles;
    d["pos_ids"] = s.pos_ids;
    d["origin"] = origin;
    return d;
}

}  // namespace

PYBIND11_MODULE(_kvcompress, m) {
    m.doc() = "sentinel-token KV-cache compression";

    auto base = py::register_exception<Error>(m, "KvcError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<IndexError>(m, "TokenIndexError", base.ptr());
    py::register_exception<InvalidMaskError>(m, "InvalidMaskError", base.ptr());
    py::register_exception<UnsupportedMethodError>(m, "UnsupportedMethodError", base.ptr());
    py::register_exception<InfeasibleBudgetError>(m, "InfeasibleBudgetError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());

    py::enum_<Method>(m, "Method")
        .value("NONE", Method::None)
        .value("KV_COMPRESSION", Method::KvCompression)
        .value("LOCAL", Method::Local)
        .value("SCATTERED", Method::Scattered);
    py::enum_<TrainScope>(m, "TrainScope").value("ADAPT", TrainScope::Adapt).value("FULL", TrainScope::Full);
    py::enum_<PosScheme>(m, "PosScheme").value("ABSOLUTE", PosScheme::Absolute).value("ROTARY", PosScheme::Rotary);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("d_head", &ModelConfig::d_head)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_positions", &ModelConfig::max_positions)
        .def_readwrite("pos_scheme", &ModelConfig::pos_scheme)
        .def_readwrite("lora_rank", &ModelConfig::lora_rank)
        .def_readwrite("lora_alpha", &ModelConfig::lora_alpha)
        .def("validate", &ModelConfig::validate)
        .def_property_readonly("cl_id", &ModelConfig::cl_id)
        .def_property_readonly("cr_id", &ModelConfig::cr_id);

    py::class_<ModelParams>(m, "Model")
        .def_static("init", &ModelParams::init, py::arg("config"), py::arg("seed") = 0)
        .def_static("load", &load_checkpoint)
        .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_checkpoint(path, p); })
        .def_property_readonly("config", &ModelParams::config)
        .def("parameter_count", &ModelParams::parameter_count)
        .def("trainable_count", &ModelParams::trainable_count)
        .def("set_scope", &ModelParams::set_scope)
        .def("without_lora", &ModelParams::without_lora)
        .def("names", [](const ModelParams& p) {
            std::vector<std::string> out;
            for (const auto& prm : p.parameters()) out.push_back(prm.name);
            return out;
        })
        .def("tensor", [](const ModelParams& p, const std::string& name) { return to_numpy(p.get(name).value); })
        .def("frozen_digest", &frozen_digest)
        .def(
            "logits",
            [](const ModelParams& p, const std::vector<std::int32_t>& tokens) {
                std::vector<std::int32_t> pos(tokens.size());
                for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
                return to_numpy(forward_full(p, tokens, AttentionMask::causal(tokens.size()), pos).logits);
            },
            py::arg("tokens"));

    py::class_<Tokenizer>(m, "Tokenizer")
        .def_static("byte_level", &Tokenizer::byte_level)
        .def_static("train_words", &Tokenizer::train_words, py::arg("corpus"), py::arg("max_vocab"),
                    py::arg("min_count") = 1)
        .def_static("load", &Tokenizer::load)
        .def("save", &Tokenizer::save)
        .def_property_readonly("vocab_size", &Tokenizer::vocab_size)
        .def_property_readonly("cl_id", &Tokenizer::cl_id)
        .def_property_readonly("cr_id", &Tokenizer::cr_id)
        .def("encode", &Tokenizer::encode)
        .def("decode", [](const Tokenizer& t, const std::vector<std::int32_t>& ids) {
            const std::string s = t.decode(ids);
            return py::bytes(s);
        });

    m.def(
        "sample_spans",
        [](std::size_t length, double ratio, std::size_t max_span_len, std::uint64_t seed) {
            const SpanSample s = sample_spans(length, CompressionConfig{ratio, max_span_len, seed});
            std::vector<std::pair<std::size_t, std::size_t>> out;
            for (const Span& sp : s.spans) out.emplace_back(sp.start, sp.len);
            return out;
        },
        py::arg("length"), py::arg("ratio"), py::arg("max_span_len") = 25, py::arg("seed") = 0,
        "(start, length) pairs");

    m.def(
        "transform",
        [](const std::vector<std::int32_t>& tokens, const std::vector<std::pair<std::size_t, std::size_t>>& spans,
           std::int32_t cl_id, std::int32_t cr_id) {
            std::vector<Span> sp;
            for (auto [s, l] : spans) sp.push_back({s, l});
            return transformed_dict(transform(tokens, sp, cl_id, cr_id));
        },
        py::arg("tokens"), py::arg("spans"), py::arg("cl_id"), py::arg("cr_id"));

    m.def(
        "compression_mask",
        [](const std::vector<std::int32_t>& tokens, const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
            std::vector<Span> sp;
            for (auto [s, l] : spans) sp.push_back({s, l});
            return mask_array(build_compression_mask(transform(tokens, sp, 256, 257)));
        },
        py::arg("tokens"), py::arg("spans"));
    m.def("local_mask", [](std::size_t n, double r) { return mask_array(build_local_mask(n, r)); });
    m.def("scattered_mask", [](std::size_t n, double r, std::uint64_t seed) {
        return mask_array(build_scattered_mask(n, r, seed));
    });

    m.def(
        "cache_size_bytes",
        [](std::size_t n_layers, std::size_t batch, std::size_t n_heads, std::size_t length, std::size_t d_head) {
            return cache_size_bytes({n_layers, batch, n_heads, length, d_head});
        },
        py::arg("n_layers"), py::arg("batch"), py::arg("n_heads"), py::arg("length"), py::arg("d_head"));

    m.def(
        "train",
        [](ModelParams& p, const std::vector<std::int32_t>& tokens, Method method, double ratio, std::size_t steps,
           std::size_t batch_size, std::size_t seq_len, double lr, TrainScope scope, std::size_t max_span_len,
           std::uint64_t seed) {
            TrainConfig cfg;
            cfg.method = method;
            cfg.ratio = ratio;
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.seq_len = seq_len;
            cfg.adamw.lr = lr;
            cfg.scope = scope;
            cfg.max_span_len = max_span_len;
            cfg.seed = seed;
            std::vector<double> losses;
            py::gil_scoped_release release;
            for (const auto& rec : train_loop(p, tokens, cfg)) losses.push_back(rec.loss);
            return losses;
        },
        py::arg("model"), py::arg("tokens"), py::arg("method") = Method::KvCompression, py::arg("ratio") = 0.5,
        py::arg("steps") = 100, py::arg("batch_size") = 12, py::arg("seq_len") = 256, py::arg("lr") = 2e-5,
        py::arg("scope") = TrainScope::Adapt, py::arg("max_span_len") = 25, py::arg("seed") = 0);

    m.def(
        "perplexity",
        [](const ModelParams& p, const std::vector<std::int32_t>& tokens, Method method, double ratio,
           std::uint64_t seed, std::size_t seq_len, std::size_t max_span_len, std::size_t max_windows) {
            py::gil_scoped_release release;
            return eval_perplexity(p, tokens, method, ratio, seed, seq_len, max_span_len, max_windows).ppl;
        },
        py::arg("model"), py::arg("tokens"), py::arg("method") = Method::None, py::arg("ratio") = 0.0,
        py::arg("seed") = 0, py::arg("seq_len") = 256, py::arg("max_span_len") = 25, py::arg("max_windows") = 0);

    m.def(
        "generate",
        [](const ModelParams& p, const std::vector<std::int32_t>& prefix, Method method, double ratio,
           std::size_t gen_len, double top_p, std::uint64_t seed) {
            EvalConfig cfg;
            cfg.top_p = top_p;
            cfg.validate();
            Rng rng(seed);
            py::dict d;
            const Generation g = generate(p, prefix, method, ratio, gen_len, cfg, rng);
            d["tokens"] = g.tokens;
            d["cache_alive_after_prefix"] = g.cache_alive_after_prefix;
            d["peak_cache_bytes"] = g.peak_cache_bytes;
            d["covered"] = g.covered;
            d["spans"] = g.spans;
            return d;
        },
        py::arg("model"), py::arg("prefix"), py::arg("method") = Method::KvCompression, py::arg("ratio") = 0.5,
        py::arg("gen_len") = 64, py::arg("top_p") = 0.9, py::arg("seed") = 0);

    m.def(
        "rouge_l",
        [](const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
            const RougeScore s = rouge_l(cand, ref);
            return py::make_tuple(s.precision, s.recall, s.f1);
        },
        "(precision, recall, f1) over word lists");
    m.def("nucleus_support", [](const std::vector<float>& probs, double p) { return nucleus_support(probs, p); });
}
