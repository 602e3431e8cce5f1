#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retrig/anchors.hpp"
#include "retrig/backend.hpp"
#include "retrig/classifier.hpp"
#include "retrig/embedding_store.hpp"
#include "retrig/witness.hpp"

namespace retrig {

struct SearchConfig {
    std::size_t budget = 50;  // generation calls, all stages combined
    std::vector<float> fractions = {0.25f, 0.5f, 0.75f, 1.0f};
    double initial_lo = -30.0;
    double initial_hi = 30.0;
    double last_token_probability = 0.5;
    std::uint64_t rng_seed = 0;
    AnchorSet anchor_set;
    ClassifierConfig classifier;
    std::size_t max_new_tokens = kDefaultMaxNewTokens;
    // Candidates evaluated concurrently per round; results commit in draw
    // order. 1 = serial.
    std::size_t speculative_width = 1;
    // Step of the left-to-right brute-force baseline.
    double sweep_step = 0.05;

    void validate() const;
};

nlohmann::json to_json(const SearchConfig& config);
// Reads the scalar settings; anchor_set and classifier are taken when present.
SearchConfig search_config_from_json(const nlohmann::json& j);

using Interval = std::pair<double, double>;

enum class Decision { Jailbreak, Benign, Error };
std::string_view decision_name(Decision d);
Decision parse_decision(std::string_view name);

struct DetectionReport {
    std::string prompt_id;
    Decision decision = Decision::Benign;
    std::vector<Witness> witnesses;
    std::size_t queries_used = 0;
    std::vector<Interval> interval_trace;
    std::uint64_t seed = 0;
    std::size_t budget = 0;
    std::string error;

    // Query index of the first witness, if any.
    std::optional<std::size_t> queries_to_witness() const;
};

nlohmann::json to_json(const DetectionReport& report);
DetectionReport detection_report_from_json(const nlohmann::json& j);

struct GuidedOutcome {
    std::optional<Witness> witness;
    std::size_t queries_spent = 0;
};

struct RandomOutcome {
    std::optional<Witness> witness;
    std::size_t queries_spent = 0;  // total, including start_queries
    std::vector<Interval> interval_trace;
};

// Stage 1: interpolate the last token toward each anchor (descending
// frequency) at each fraction, stopping at the first denial or the budget.
// `matrix` may be null; witnesses then carry no embedding.
GuidedOutcome guided_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                            Backend& backend, const EmbeddingMatrix* matrix);

// Stage 2: uniform random scalar noise with the strength interval narrowed
// on gibberish. `start_queries` calls are already spent from the budget.
RandomOutcome random_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                            Backend& backend, std::size_t start_queries = 0,
                            const EmbeddingMatrix* matrix = nullptr);

// Two-stage search; jailbreak iff a witness is found within budget. Backend
// failures produce Decision::Error, never Benign.
DetectionReport detect(const TokenizedPrompt& prompt, const SearchConfig& config, Backend& backend,
                       const EmbeddingMatrix* matrix);

// Keeps searching past each success until `m` pairwise-distinct witnesses
// are found or the budget runs out. Throws on backend failure.
std::vector<Witness> collect_witnesses(const TokenizedPrompt& prompt, const SearchConfig& config,
                                       Backend& backend, const EmbeddingMatrix* matrix,
                                       std::size_t m);

// Baseline: left-to-right sweep of the strength interval at `sweep_step` on
// the last token, dim 0, stopping at the first denial or the budget.
DetectionReport sweep_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                             Backend& backend, const EmbeddingMatrix* matrix);

// Re-runs a witness through backend and classifier.
Verdict replay_witness(const TokenizedPrompt& prompt, const Witness& witness, Backend& backend,
                       const ClassifierConfig& classifier,
                       std::size_t max_new_tokens = kDefaultMaxNewTokens);

// Embedding of the prompt token after a layer-0 disruption.
std::vector<float> disrupted_embedding(const EmbeddingMatrix& matrix, const TokenizedPrompt& prompt,
                                       const DisruptionSpec& disruption);

}  // namespace retrig
