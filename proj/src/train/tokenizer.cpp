#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "kvc/error.hpp"
#include "kvc/train.hpp"

namespace kvc {

std::string to_string(TokenizerMode mode) { return mode == TokenizerMode::Byte ? "byte" : "word"; }

TokenizerMode parse_tokenizer_mode(std::string_view text) {
    if (text == "byte" || text == "BYTE") return TokenizerMode::Byte;
    if (text == "word" || text == "WORD") return TokenizerMode::Word;
    throw ConfigError("unknown tokenizer mode '" + std::string(text) + "' (expected byte|word)");
}

namespace {

enum class CharClass { Word, Space, Other };

CharClass classify(unsigned char c) {
    if (std::isalnum(c) || c == '\'' || c >= 0x80) return CharClass::Word;
    if (std::isspace(c)) return CharClass::Space;
    return CharClass::Other;
}

}  // namespace

std::vector<std::string_view> Tokenizer::split_pieces(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const CharClass cls = classify(static_cast<unsigned char>(text[i]));
        std::size_t j = i + 1;
        if (cls != CharClass::Other) {
            while (j < text.size() && classify(static_cast<unsigned char>(text[j])) == cls) {
                ++j;
            }
        }
        out.push_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

Tokenizer Tokenizer::byte_level() { return Tokenizer(); }

Tokenizer Tokenizer::train_words(std::string_view corpus, std::size_t max_vocab, std::size_t min_count) {
    if (max_vocab < 4) {
        throw ConfigError("word vocabulary needs at least 4 entries");
    }
    std::map<std::string_view, std::size_t> counts;
    for (std::string_view p : split_pieces(corpus)) {
        ++counts[p];
    }
    std::vector<std::pair<std::string_view, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Tokenizer tok;
    tok.mode_ = TokenizerMode::Word;
    tok.pieces_.push_back("<unk>");
    for (const auto& [piece, count] : ranked) {
        if (tok.pieces_.size() + 2 >= max_vocab || count < min_count) {
            break;
        }
        tok.pieces_.emplace_back(piece);
    }
    for (std::size_t i = 0; i < tok.pieces_.size(); ++i) {
        tok.lookup_.emplace(tok.pieces_[i], static_cast<std::int32_t>(i));
    }
    return tok;
}

std::size_t Tokenizer::vocab_size() const noexcept {
    return mode_ == TokenizerMode::Byte ? 258 : pieces_.size() + 2;
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    if (mode_ == TokenizerMode::Byte) {
        ids.reserve(text.size());
        for (char c : text) {
            ids.push_back(static_cast<unsigned char>(c));
        }
        return ids;
    }
    for (std::string_view p : split_pieces(text)) {
        const auto it = lookup_.find(std::string(p));
        ids.push_back(it == lookup_.end() ? unk_id() : it->second);
    }
    return ids;
}

std::string Tokenizer::piece(std::int32_t id) const {
    if (id == cl_id()) return "<CL>";
    if (id == cr_id()) return "<CR>";
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
        throw IndexError("token id " + std::to_string(id) + " outside tokenizer vocabulary");
    }
    if (mode_ == TokenizerMode::Byte) {
        return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
    }
    return pieces_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (std::int32_t id : ids) {
        out += piece(id);
    }
    return out;
}

nlohmann::json Tokenizer::to_json() const {
    nlohmann::json j{{"mode", kvc::to_string(mode_)}, {"vocab_size", vocab_size()}};
    if (mode_ == TokenizerMode::Word) {
        j["pieces"] = pieces_;
    }
    return j;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
    try {
        Tokenizer tok;
        tok.mode_ = parse_tokenizer_mode(j.at("mode").get<std::string>());
        if (tok.mode_ == TokenizerMode::Word) {
            tok.pieces_ = j.at("pieces").get<std::vector<std::string>>();
            if (tok.pieces_.empty() || tok.pieces_[0] != "<unk>") {
                throw SchemaError("word tokenizer must start with <unk>");
            }
            for (std::size_t i = 0; i < tok.pieces_.size(); ++i) {
                if (!tok.lookup_.emplace(tok.pieces_[i], static_cast<std::int32_t>(i)).second) {
                    throw SchemaError("duplicate tokenizer piece");
                }
            }
        }
        if (j.contains("vocab_size") && j["vocab_size"].get<std::size_t>() != tok.vocab_size()) {
            throw SchemaError("tokenizer vocab_size does not match its pieces");
        }
        return tok;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("bad tokenizer file: ") + e.what());
    }
}

void Tokenizer::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write tokenizer " + path.string());
    }
    out << to_json().dump() << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    try {
        return from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("tokenizer file " + path.string() + " is not JSON: " + e.what());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Corpus split_corpus(std::vector<std::int32_t> tokens, double heldout_fraction) {
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
        throw ConfigError("held-out fraction must be in [0, 1)");
    }
    if (tokens.empty()) {
        throw DataError("corpus is empty");
    }
    const auto cut = static_cast<std::size_t>(static_cast<double>(tokens.size()) * (1.0 - heldout_fraction));
    Corpus c;
    c.heldout.assign(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end());
    tokens.resize(cut);
    c.train = std::move(tokens);
    return c;
}

}  // namespace kvc
