#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrig/backend.hpp"
#include "retrig/classifier.hpp"
#include "retrig/embedding_store.hpp"
#include "retrig/witness.hpp"

namespace retrig {

struct TransferCandidate {
    std::string text;
    std::size_t witness_index = 0;
    std::size_t rank = 1;  // 1..k
    std::size_t substituted_position = 0;
    TokenId substituted_token = 0;
};

nlohmann::json to_json(const TransferCandidate& c);
std::string candidates_to_jsonl(const std::vector<TransferCandidate>& candidates);

// Word the token contributes when spliced into text: one leading boundary
// marker stripped. Empty when the token renders to nothing visible.
std::string token_to_word(std::string_view token_string);

// Index of the whitespace-delimited word of `prompt.text` that holds token
// `position`. Word starts are taken from boundary markers in the token
// strings; vocabularies without markers are treated as one token per word.
std::size_t word_index_for_token(const TokenizedPrompt& prompt, const EmbeddingMatrix& matrix,
                                 std::size_t position);

struct CandidateStats {
    std::size_t skipped_witnesses = 0;  // no layer-0 embedding
    std::size_t dropped_identical = 0;  // equal to the original prompt
    std::size_t dropped_duplicates = 0;
    std::size_t skipped_empty_words = 0;
};

// Top-k conversions of every witness embedding spliced into the prompt.
// Ordered by (witness_index, rank); identical texts kept once.
std::vector<TransferCandidate> build_candidates(const TokenizedPrompt& prompt,
                                                const std::vector<Witness>& witnesses,
                                                const EmbeddingMatrix& matrix, std::size_t k,
                                                CandidateStats* stats = nullptr,
                                                SimilarityMetric metric = SimilarityMetric::Cosine);

// Black-box target: text in, text out. Implementations must allow
// concurrent calls up to max_concurrency().
class TargetClient {
public:
    virtual ~TargetClient() = default;
    virtual std::string chat(const std::string& text) = 0;
    virtual std::size_t max_concurrency() const { return 1; }
};

// OpenAI-compatible chat-completions endpoint. The API key is read from
// RETRIG_TARGET_KEY when not given explicitly.
class ChatCompletionsTarget final : public TargetClient {
public:
    struct Options {
        std::string endpoint;  // full URL, e.g. https://host/v1/chat/completions
        std::string model;
        std::chrono::milliseconds timeout = std::chrono::seconds(60);
        std::size_t max_concurrent = 4;
        std::size_t max_tokens = kDefaultMaxNewTokens;
        std::optional<std::string> api_key;
    };

    explicit ChatCompletionsTarget(Options options);
    std::string chat(const std::string& text) override;
    std::size_t max_concurrency() const override { return options_.max_concurrent; }

    static nlohmann::json request_body(const std::string& model, const std::string& text,
                                       std::size_t max_tokens);
    static std::string parse_reply(const nlohmann::json& body);

private:
    Options options_;
    std::string scheme_host_;
    std::string path_;
};

// Self-transfer: the surrogate backend answers undisrupted, text in/out.
class BackendTarget final : public TargetClient {
public:
    explicit BackendTarget(Backend& backend, std::size_t max_new_tokens = kDefaultMaxNewTokens)
        : backend_(backend), max_new_tokens_(max_new_tokens) {}
    std::string chat(const std::string& text) override;
    std::size_t max_concurrency() const override;

private:
    Backend& backend_;
    std::size_t max_new_tokens_;
};

struct ProbeResult {
    enum class Decision { Jailbreak, Benign, Error };
    Decision decision = Decision::Benign;
    std::optional<std::size_t> first_denying_candidate;  // 0-based index
    std::size_t probes_issued = 0;
    std::size_t failures = 0;
    std::vector<std::string> failure_messages;
};

std::string_view probe_decision_name(ProbeResult::Decision d);

// Jailbreak iff any candidate elicits a denial. With concurrency 1 the
// probes run in order and stop at the first denial.
ProbeResult probe_target(const std::vector<TransferCandidate>& candidates, TargetClient& client,
                         const ClassifierConfig& classifier, std::size_t concurrency = 1);

}  // namespace retrig
