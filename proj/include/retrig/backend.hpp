#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "retrig/embedding_store.hpp"

namespace retrig {

// Where a prompt came from. `other` carries a free-form label.
struct SourceTag {
    enum class Kind { Benign, Gcg, Pair, Rs, Ifsj, AutodanT, Other };
    Kind kind = Kind::Benign;
    std::string other;

    bool is_attack() const { return kind != Kind::Benign; }
    std::string name() const;
    static SourceTag parse(std::string_view name);

    bool operator==(const SourceTag&) const = default;
};

struct TokenizedPrompt {
    std::string prompt_id;
    std::string text;
    std::vector<TokenId> token_ids;
    SourceTag source_tag;
};

// Adds `delta` to one coordinate of the activation.
struct ScalarNoise {
    std::uint32_t dim = 0;
    float delta = 0.0f;
    bool operator==(const ScalarNoise&) const = default;
};

// Replaces the layer-0 embedding with (1 - fraction) * e + fraction * anchor.
struct AnchorLerp {
    TokenId anchor_token_id = 0;
    float fraction = 0.0f;
    bool operator==(const AnchorLerp&) const = default;
};

struct DisruptionSpec {
    std::uint32_t layer_index = 0;  // 0 = token embeddings; L > 0 = input of layer L
    std::int64_t position = -1;     // negative counts from the end
    std::variant<ScalarNoise, AnchorLerp> form;

    bool is_scalar() const { return std::holds_alternative<ScalarNoise>(form); }
    bool is_anchor_lerp() const { return std::holds_alternative<AnchorLerp>(form); }
    const ScalarNoise& scalar() const { return std::get<ScalarNoise>(form); }
    const AnchorLerp& anchor_lerp() const { return std::get<AnchorLerp>(form); }

    bool operator==(const DisruptionSpec&) const = default;

    static DisruptionSpec scalar_at(std::int64_t position, std::uint32_t dim, float delta,
                                    std::uint32_t layer = 0);
    static DisruptionSpec lerp_at(std::int64_t position, TokenId anchor, float fraction);
};

struct GenerationResult {
    std::string text;
    std::size_t tokens_generated = 0;
    std::string backend_id;
};

struct ModelInfo {
    std::string model_id;
    std::size_t vocab_size = 0;
    std::size_t embedding_dim = 0;
    std::size_t num_layers = 0;
    std::size_t max_concurrency = 1;
};

inline constexpr std::size_t kDefaultMaxNewTokens = 64;

// The generation contract every scan, search, and detection goes through.
// Implementations must be safe to call from several threads at once up to
// the concurrency they declare.
class Backend {
public:
    virtual ~Backend() = default;

    virtual GenerationResult generate(const TokenizedPrompt& prompt,
                                      const std::vector<DisruptionSpec>& disruptions,
                                      std::size_t max_new_tokens,
                                      std::optional<std::uint64_t> decode_seed) = 0;
    virtual ModelInfo model_info() = 0;
    virtual std::vector<TokenId> tokenize(const std::string& text) = 0;
    virtual std::string detokenize(const std::vector<TokenId>& ids) = 0;
};

// Resolve a signed position against a prompt length. Throws InvalidDisruption.
std::size_t resolve_position(std::int64_t position, std::size_t prompt_length);

// Checks position, dim, layer, and form constraints against the model shape.
void validate_disruption(const DisruptionSpec& spec, std::size_t prompt_length,
                         const ModelInfo& info);

// Engine-side guard: backend and matrix must describe the same embedding space.
void check_matrix_compatible(const ModelInfo& info, const EmbeddingMatrix& matrix);

// Tokenizes `text` through the backend into a prompt record.
TokenizedPrompt make_prompt(Backend& backend, std::string prompt_id, std::string text,
                            SourceTag tag = {});

// Wire encodings.
nlohmann::json to_json(const DisruptionSpec& spec);
DisruptionSpec disruption_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelInfo& info);
ModelInfo model_info_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerationResult& result);
GenerationResult generation_from_json(const nlohmann::json& j);

struct GenerateRequest {
    TokenizedPrompt prompt;
    std::vector<DisruptionSpec> disruptions;
    std::size_t max_new_tokens = kDefaultMaxNewTokens;
    std::optional<std::uint64_t> decode_seed;
};
nlohmann::json to_json(const GenerateRequest& request);
GenerateRequest generate_request_from_json(const nlohmann::json& j);

}  // namespace retrig
