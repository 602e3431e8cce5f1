#include "retrig/backend.hpp"

#include <cctype>
#include <cmath>

#include "retrig/errors.hpp"

namespace retrig {

using nlohmann::json;

namespace {

struct TagName {
    SourceTag::Kind kind;
    std::string_view name;
};

constexpr TagName kTagNames[] = {
    {SourceTag::Kind::Benign, "benign"}, {SourceTag::Kind::Gcg, "gcg"},
    {SourceTag::Kind::Pair, "pair"},     {SourceTag::Kind::Rs, "rs"},
    {SourceTag::Kind::Ifsj, "ifsj"},     {SourceTag::Kind::AutodanT, "autodan_t"},
};

template <typename T>
T require(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) {
        throw DataError(std::string("missing field '") + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw DataError(std::string("field '") + key + "' has the wrong type");
    }
}

}  // namespace

std::string SourceTag::name() const {
    if (kind == Kind::Other) {
        return other.empty() ? "other" : other;
    }
    for (const auto& t : kTagNames) {
        if (t.kind == kind) {
            return std::string(t.name);
        }
    }
    return "other";
}

SourceTag SourceTag::parse(std::string_view name) {
    std::string lower;
    for (char c : name) {
        lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (lower == "autodan-turbo" || lower == "autodan_turbo" || lower == "autodan-t") {
        lower = "autodan_t";
    }
    if (lower == "i-fsj") {
        lower = "ifsj";
    }
    for (const auto& t : kTagNames) {
        if (t.name == lower) {
            return {t.kind, {}};
        }
    }
    return {Kind::Other, std::string(name)};
}

DisruptionSpec DisruptionSpec::scalar_at(std::int64_t position, std::uint32_t dim, float delta,
                                         std::uint32_t layer) {
    return {layer, position, ScalarNoise{dim, delta}};
}

DisruptionSpec DisruptionSpec::lerp_at(std::int64_t position, TokenId anchor, float fraction) {
    return {0, position, AnchorLerp{anchor, fraction}};
}

std::size_t resolve_position(std::int64_t position, std::size_t prompt_length) {
    const auto len = static_cast<std::int64_t>(prompt_length);
    const std::int64_t resolved = position < 0 ? len + position : position;
    if (resolved < 0 || resolved >= len) {
        throw InvalidDisruption("position " + std::to_string(position) +
                                " out of range for prompt of length " +
                                std::to_string(prompt_length));
    }
    return static_cast<std::size_t>(resolved);
}

void validate_disruption(const DisruptionSpec& spec, std::size_t prompt_length,
                         const ModelInfo& info) {
    resolve_position(spec.position, prompt_length);
    if (spec.layer_index > info.num_layers) {
        throw InvalidDisruption("layer " + std::to_string(spec.layer_index) +
                                " out of range (model has " + std::to_string(info.num_layers) +
                                " layers)");
    }
    if (spec.is_scalar()) {
        const auto& s = spec.scalar();
        if (s.dim >= info.embedding_dim) {
            throw InvalidDisruption("dim " + std::to_string(s.dim) + " out of range");
        }
        if (!std::isfinite(s.delta)) {
            throw InvalidDisruption("delta must be finite");
        }
    } else {
        const auto& a = spec.anchor_lerp();
        if (spec.layer_index != 0) {
            throw InvalidDisruption("anchor_lerp is only valid at layer 0");
        }
        if (!(a.fraction > 0.0f && a.fraction <= 1.0f)) {
            throw InvalidDisruption("anchor_lerp fraction must lie in (0, 1]");
        }
        if (a.anchor_token_id >= info.vocab_size) {
            throw InvalidDisruption("anchor token id out of range");
        }
    }
}

void check_matrix_compatible(const ModelInfo& info, const EmbeddingMatrix& matrix) {
    if (info.embedding_dim != matrix.dim()) {
        throw DataError("embedding_dim mismatch: backend reports " +
                        std::to_string(info.embedding_dim) + ", matrix has " +
                        std::to_string(matrix.dim()));
    }
    if (info.vocab_size != matrix.vocab_size()) {
        throw DataError("vocab_size mismatch: backend reports " + std::to_string(info.vocab_size) +
                        ", matrix has " + std::to_string(matrix.vocab_size()));
    }
}

TokenizedPrompt make_prompt(Backend& backend, std::string prompt_id, std::string text,
                            SourceTag tag) {
    TokenizedPrompt p;
    p.prompt_id = std::move(prompt_id);
    p.token_ids = backend.tokenize(text);
    p.text = std::move(text);
    p.source_tag = std::move(tag);
    if (p.token_ids.empty()) {
        throw DataError("prompt '" + p.prompt_id + "' tokenizes to nothing");
    }
    return p;
}

json to_json(const DisruptionSpec& spec) {
    json j = {{"layer", spec.layer_index}, {"position", spec.position}};
    if (spec.is_scalar()) {
        j["kind"] = "scalar";
        j["dim"] = spec.scalar().dim;
        j["delta"] = spec.scalar().delta;
    } else {
        j["kind"] = "anchor_lerp";
        j["anchor_token_id"] = spec.anchor_lerp().anchor_token_id;
        j["fraction"] = spec.anchor_lerp().fraction;
    }
    return j;
}

DisruptionSpec disruption_from_json(const json& j) {
    DisruptionSpec spec;
    spec.layer_index = j.is_object() && j.contains("layer") ? require<std::uint32_t>(j, "layer") : 0;
    spec.position = j.is_object() && j.contains("position") ? require<std::int64_t>(j, "position") : -1;
    const auto kind = require<std::string>(j, "kind");
    if (kind == "scalar") {
        spec.form = ScalarNoise{require<std::uint32_t>(j, "dim"), require<float>(j, "delta")};
    } else if (kind == "anchor_lerp") {
        spec.form = AnchorLerp{require<TokenId>(j, "anchor_token_id"), require<float>(j, "fraction")};
    } else {
        throw InvalidDisruption("unknown disruption kind '" + kind + "'");
    }
    return spec;
}

json to_json(const ModelInfo& info) {
    return {{"model_id", info.model_id},
            {"vocab_size", info.vocab_size},
            {"embedding_dim", info.embedding_dim},
            {"num_layers", info.num_layers},
            {"max_concurrency", info.max_concurrency}};
}

ModelInfo model_info_from_json(const json& j) {
    ModelInfo info;
    info.model_id = require<std::string>(j, "model_id");
    info.vocab_size = require<std::size_t>(j, "vocab_size");
    info.embedding_dim = require<std::size_t>(j, "embedding_dim");
    info.num_layers = require<std::size_t>(j, "num_layers");
    info.max_concurrency = j.value("max_concurrency", std::size_t{1});
    if (info.max_concurrency == 0) {
        info.max_concurrency = 1;
    }
    return info;
}

json to_json(const GenerationResult& result) {
    return {{"text", result.text},
            {"tokens_generated", result.tokens_generated},
            {"backend_id", result.backend_id}};
}

GenerationResult generation_from_json(const json& j) {
    return {require<std::string>(j, "text"), require<std::size_t>(j, "tokens_generated"),
            j.value("backend_id", std::string{})};
}

json to_json(const GenerateRequest& request) {
    json disruptions = json::array();
    for (const auto& d : request.disruptions) {
        disruptions.push_back(to_json(d));
    }
    json j = {{"prompt_id", request.prompt.prompt_id},
              {"token_ids", request.prompt.token_ids},
              {"disruptions", std::move(disruptions)},
              {"max_new_tokens", request.max_new_tokens}};
    j["decode_seed"] = request.decode_seed ? json(*request.decode_seed) : json(nullptr);
    return j;
}

GenerateRequest generate_request_from_json(const json& j) {
    GenerateRequest r;
    r.prompt.prompt_id = require<std::string>(j, "prompt_id");
    r.prompt.token_ids = require<std::vector<TokenId>>(j, "token_ids");
    if (j.contains("disruptions")) {
        if (!j["disruptions"].is_array()) {
            throw DataError("field 'disruptions' must be an array");
        }
        for (const auto& d : j["disruptions"]) {
            r.disruptions.push_back(disruption_from_json(d));
        }
    }
    r.max_new_tokens = j.value("max_new_tokens", kDefaultMaxNewTokens);
    if (j.contains("decode_seed") && !j["decode_seed"].is_null()) {
        r.decode_seed = require<std::uint64_t>(j, "decode_seed");
    }
    return r;
}

}  // namespace retrig
