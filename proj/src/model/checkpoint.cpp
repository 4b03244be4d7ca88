#include "kvc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "kvc/error.hpp"

namespace kvc {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

nlohmann::json to_json(const ModelConfig& cfg) {
    return {{"n_layers", cfg.n_layers},
            {"n_heads", cfg.n_heads},
            {"d_model", cfg.d_model},
            {"d_head", cfg.d_head},
            {"vocab_size", cfg.vocab_size},
            {"max_positions", cfg.max_positions},
            {"pos_scheme", to_string(cfg.pos_scheme)},
            {"lora_rank", cfg.lora_rank},
            {"lora_alpha", cfg.lora_alpha},
            {"rotary_base", cfg.rotary_base},
            {"norm_eps", cfg.norm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig cfg;
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.d_head = j.at("d_head").get<std::size_t>();
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.max_positions = j.at("max_positions").get<std::size_t>();
        cfg.pos_scheme = parse_pos_scheme(j.at("pos_scheme").get<std::string>());
        cfg.lora_rank = j.at("lora_rank").get<std::size_t>();
        cfg.lora_alpha = j.at("lora_alpha").get<float>();
        cfg.rotary_base = j.at("rotary_base").get<double>();
        cfg.norm_eps = j.at("norm_eps").get<float>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("bad model config: ") + e.what());
    } catch (const ConfigError& e) {
        throw SchemaError(std::string("bad model config: ") + e.what());
    }
}

ParamGroup group_for_name(std::string_view name) {
    auto ends_with = [&](std::string_view s) { return name.size() >= s.size() && name.substr(name.size() - s.size()) == s; };
    if (name == "embed.tokens") return ParamGroup::TokenEmbedding;
    if (name == "embed.sentinels") return ParamGroup::SentinelEmbedding;
    if (name == "embed.positions") return ParamGroup::PositionEmbedding;
    if (ends_with(".lora_a") || ends_with(".lora_b")) return ParamGroup::Lora;
    if (name.find(".attn.") != std::string_view::npos) return ParamGroup::Attention;
    if (name.find(".mlp.") != std::string_view::npos) return ParamGroup::Mlp;
    if (name.find("ln") != std::string_view::npos) return ParamGroup::Norm;
    throw SchemaError("unknown parameter name " + std::string(name));
}

namespace {

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw SchemaError(std::string("checkpoint truncated while reading ") + what);
    }
    return value;
}

std::string get_string(std::istream& in, std::size_t len, const char* what) {
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw SchemaError(std::string("checkpoint truncated while reading ") + what);
    }
    return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write checkpoint " + path.string());
    }
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string cfg = to_json(params.config()).dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.parameters().size()));
    for (const Parameter& p : params.parameters()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t d : p.value.shape()) {
            put<std::uint64_t>(out, d);
        }
        out.write(reinterpret_cast<const char*>(p.value.raw()),
                  static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    }
    if (!out) {
        throw DataError("failed writing checkpoint " + path.string());
    }
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw SchemaError(path.string() + " is not a checkpoint (bad magic)");
    }
    const auto version = get<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw SchemaError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto cfg_len = get<std::uint32_t>(in, "config length");
    const std::string cfg_text = get_string(in, cfg_len, "config");
    nlohmann::json cfg_json;
    try {
        cfg_json = nlohmann::json::parse(cfg_text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint config is not JSON: ") + e.what());
    }
    const ModelConfig cfg = model_config_from_json(cfg_json);
    const ModelParams reference = ModelParams::init(cfg, 0);

    const auto count = get<std::uint32_t>(in, "tensor count");
    std::vector<Parameter> params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(in, "name length");
        std::string name = get_string(in, name_len, "name");
        const auto rank = get<std::uint32_t>(in, "rank");
        Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<std::size_t>(get<std::uint64_t>(in, "dims"));
        }
        const auto expected = reference.find(name);
        if (!expected) {
            throw SchemaError("checkpoint tensor " + name + " does not belong to the stored config");
        }
        if (reference.at(*expected).value.shape() != shape) {
            throw SchemaError("checkpoint tensor " + name + " has shape " + shape_string(shape) + ", config expects " +
                              shape_string(reference.at(*expected).value.shape()));
        }
        std::vector<float> data(shape_numel(shape));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!in) {
            throw SchemaError("checkpoint truncated in tensor " + name);
        }
        params.push_back({name, Tensor(shape, std::move(data)), group_for_name(name), false});
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw SchemaError("trailing bytes after the last checkpoint tensor");
    }
    if (params.size() != reference.parameters().size()) {
        throw SchemaError("checkpoint holds " + std::to_string(params.size()) + " tensors, config expects " +
                          std::to_string(reference.parameters().size()));
    }
    ModelParams out = ModelParams::from_parameters(cfg, std::move(params));
    out.set_scope(TrainScope::Adapt);
    return out;
}

}  // namespace kvc
