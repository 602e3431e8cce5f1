#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "retrig/backend.hpp"
#include "retrig/classifier.hpp"
#include "retrig/embedding_store.hpp"

namespace retrig::simlab {

inline constexpr std::string_view kDenialText = "I'm sorry, I cannot assist with that.";
// Constant reply for strong disruptions. Four copies of one nonsense word, so
// every word 3-gram repeats.
inline constexpr std::string_view kGibberishText = "x7#qpl0z x7#qpl0z x7#qpl0z x7#qpl0z";
inline constexpr std::string_view kDefaultBaseReply =
    "Sure, here is a detailed answer to your request.";
inline constexpr double kDefaultGibberishThreshold = 20.0;

struct PositionSelector {
    enum class Kind { Exact, Last, Any };
    Kind kind = Kind::Last;
    std::int64_t index = 0;  // Exact only; negative counts from the end

    bool matches(std::size_t resolved, std::size_t prompt_length) const;
    bool operator==(const PositionSelector&) const = default;
};

struct DimSelector {
    bool any = true;
    std::uint32_t dim = 0;

    bool matches(std::uint32_t d) const { return any || d == dim; }
    bool operator==(const DimSelector&) const = default;
};

// One verdict interval. Scalar regions span the signed delta; anchor regions
// span the interpolation fraction toward one anchor token (layer 0 only).
struct Region {
    enum class Kind { Scalar, AnchorLerp };
    Kind kind = Kind::Scalar;
    PositionSelector position;
    std::uint32_t layer = 0;
    DimSelector dim;
    TokenId anchor_token_id = 0;
    double lo = 0.0;
    double hi = 0.0;
    Verdict verdict = Verdict::Denial;

    bool operator==(const Region&) const = default;
};

struct LandscapeSpec {
    std::string prompt_id;
    std::string prompt_text;  // optional; lets text-only callers find the spec
    std::vector<Region> regions;
    double gibberish_threshold = kDefaultGibberishThreshold;
    std::string base_reply = std::string(kDefaultBaseReply);

    // Throws DataError when an interval is empty or inverted.
    void validate() const;
    bool has_denial() const;
    bool operator==(const LandscapeSpec&) const = default;
};

nlohmann::json to_json(const LandscapeSpec& spec);
LandscapeSpec landscape_from_json(const nlohmann::json& j);
std::vector<LandscapeSpec> load_landscapes(const std::filesystem::path& path);
void write_landscapes(const std::vector<LandscapeSpec>& specs, const std::filesystem::path& path);

// Verdict of a single disruption against the landscape. First matching
// region wins; unmatched scalar noise is Unaffected unless |delta| exceeds
// the gibberish threshold. A zero delta is always a no-op.
Verdict lookup_verdict(const LandscapeSpec& spec, const DisruptionSpec& disruption,
                       std::size_t prompt_length);

// Combined verdict of a disruption list: any Gibberish wins, then any Denial.
Verdict lookup_verdict(const LandscapeSpec& spec, const std::vector<DisruptionSpec>& disruptions,
                       std::size_t prompt_length);

std::string_view reply_text(const LandscapeSpec& spec, Verdict v);

GenerationResult simulate_generate(const TokenizedPrompt& prompt,
                                   const std::vector<DisruptionSpec>& disruptions,
                                   const LandscapeSpec& spec);

enum class LandscapeKind { Jailbreak, Benign };

struct AnchorCoupling {
    std::vector<TokenId> anchors;  // in descending frequency
    std::vector<float> fractions = {0.25f, 0.5f, 0.75f, 1.0f};
    // When unset, the anchor and fraction are drawn from the seed.
    std::optional<std::size_t> anchor_index;
    std::optional<std::size_t> fraction_index;
    // Anchors are drawn with weights proportional to these when provided.
    std::vector<double> anchor_weights;
    // Half-width of the fraction interval placed around the chosen point.
    double half_width = 0.02;
};

struct PlantOptions {
    std::size_t min_intervals = 1;
    std::size_t max_intervals = 4;
    double min_width = 0.2;
    double max_width = 2.0;
    double placement_lo = -20.0;
    double placement_hi = 20.0;
    // Intervals keep this distance from zero and from each other.
    double zero_margin = 0.5;
    double min_gap = 0.1;
    PositionSelector position{PositionSelector::Kind::Last, 0};
    DimSelector dim{true, 0};
    std::uint32_t layer = 0;
    double gibberish_threshold = kDefaultGibberishThreshold;
    std::optional<AnchorCoupling> coupling;
    std::string prompt_id;
    std::string prompt_text;
};

LandscapeSpec plant_landscape(LandscapeKind kind, std::uint64_t seed,
                              const PlantOptions& options = {});

// Whitespace tokenizer over a fixed vocabulary. A leading word-boundary
// marker ("▁" or "Ġ") is ignored when matching words, so "▁wohl" is the
// token for the word "wohl".
class SimTokenizer {
public:
    SimTokenizer() = default;
    // Throws DataError if two tokens normalize to the same word or a token
    // contains whitespace.
    explicit SimTokenizer(std::vector<std::string> vocab, TokenId unk_id = 0);

    std::vector<TokenId> tokenize(std::string_view text) const;
    std::string detokenize(const std::vector<TokenId>& ids) const;
    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<std::string>& vocab() const { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> lookup_;
    TokenId unk_id_ = 0;
};

// Strips one leading "▁" or "Ġ" marker.
std::string_view strip_boundary_marker(std::string_view token);

struct SimModelConfig {
    std::string model_id = "simlab";
    std::size_t embedding_dim = 32;
    std::size_t num_layers = 4;
    std::size_t max_concurrency = 4;
    std::vector<std::string> vocab;
};

// Deterministic backend driven by landscape specs.
class SimBackend final : public Backend {
public:
    SimBackend(SimModelConfig config, std::vector<LandscapeSpec> landscapes);

    GenerationResult generate(const TokenizedPrompt& prompt,
                              const std::vector<DisruptionSpec>& disruptions,
                              std::size_t max_new_tokens,
                              std::optional<std::uint64_t> decode_seed) override;
    ModelInfo model_info() override;
    std::vector<TokenId> tokenize(const std::string& text) override;
    std::string detokenize(const std::vector<TokenId>& ids) override;

    // Spec lookup by prompt id, then by prompt text, then the "*" catch-all.
    const LandscapeSpec& landscape_for(const TokenizedPrompt& prompt) const;
    void add_landscape(LandscapeSpec spec);

    std::uint64_t generate_calls() const { return calls_.load(); }
    // Every generate call after the next `n` throws BackendError.
    void fail_after(std::uint64_t n) { fail_after_ = calls_.load() + n; }
    void set_available(bool available) { available_ = available; }

private:
    SimModelConfig config_;
    SimTokenizer tokenizer_;
    std::map<std::string, LandscapeSpec> by_id_;
    std::map<std::string, std::string> id_by_text_;
    std::atomic<std::uint64_t> calls_{0};
    std::atomic<std::uint64_t> fail_after_{UINT64_MAX};
    std::atomic<bool> available_{true};
};

SimModelConfig sim_model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SimModelConfig& config);

// Self-contained simulated deployment: embedding matrix, anchors, prompts,
// and their landscapes. Anchor tokens sit on dedicated embedding axes that no
// ordinary token uses, so a large positive delta on axis j projects onto
// anchor j under emb2token.
struct WorldOptions {
    std::string model_id = "sim-model";
    std::size_t vocab_size = 256;
    std::size_t dim = 32;
    std::size_t num_layers = 4;
    std::vector<std::string> anchor_strings = {"\xE2\x96\x81oH", "\xE2\x96\x81wohl", "irement",
                                               "vin", ")}}"};
    double anchor_scale = 10.0;
    std::size_t words_per_prompt_min = 6;
    std::size_t words_per_prompt_max = 14;
};

struct SyntheticWorld {
    EmbeddingMatrix matrix;
    SimModelConfig model;
    std::vector<TokenId> anchor_ids;  // anchor j lives on embedding axis j
    std::vector<std::string> ordinary_words;

    // Random prompt text of ordinary words.
    std::string random_prompt(std::uint64_t seed, const WorldOptions& options = {}) const;
};

SyntheticWorld make_world(std::uint64_t seed, const WorldOptions& options = {});

// Bundle file used by `--backend sim:<path>`: {"model": SimModelConfig,
// "landscapes": [...]}. Vocabulary may be omitted when a matrix supplies it.
struct SimBundle {
    SimModelConfig model;
    std::vector<LandscapeSpec> landscapes;
};
SimBundle load_sim_bundle(const std::filesystem::path& path);
void write_sim_bundle(const SimBundle& bundle, const std::filesystem::path& path);

}  // namespace retrig::simlab
