#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrig/embedding_store.hpp"
#include "retrig/scanner.hpp"
#include "retrig/witness.hpp"

namespace retrig {

struct AnchorEntry {
    TokenId token_id = 0;
    std::string token_string;
    double frequency = 0.0;

    bool operator==(const AnchorEntry&) const = default;
};

// Head of the long-tailed distribution of tokens that denial-inducing
// disruptions project onto, sorted by descending frequency.
struct AnchorSet {
    std::string model_id;
    std::vector<AnchorEntry> entries;
    double coverage = 0.0;
    std::size_t source_case_count = 0;
    std::size_t self_mapped_excluded = 0;

    std::vector<TokenId> anchor_ids() const;
    bool operator==(const AnchorSet&) const = default;
};

nlohmann::json to_json(const AnchorSet& set);
AnchorSet anchor_set_from_json(const nlohmann::json& j);
AnchorSet load_anchor_set(const std::filesystem::path& path);
void write_anchor_set(const AnchorSet& set, const std::filesystem::path& path);

struct AnchorOptions {
    double coverage_threshold = 0.9;
    std::size_t min_cases = 200;
    SimilarityMetric metric = SimilarityMetric::Cosine;
};

// Full frequency table (every distinct converted token, descending), before
// the coverage cut. Self-mapped cases are excluded.
struct ConversionHistogram {
    std::vector<AnchorEntry> entries;
    std::size_t included = 0;
    std::size_t self_mapped = 0;
};
ConversionHistogram conversion_histogram(const std::vector<Witness>& witnesses,
                                         const EmbeddingMatrix& matrix, SimilarityMetric metric);

AnchorSet identify_anchors(const std::vector<Witness>& witnesses, const EmbeddingMatrix& matrix,
                           const AnchorOptions& options = {});

// Converts every layer-0 Denial record into a witness whose embedding is the
// original token row with the record's deltas applied.
std::vector<Witness> witnesses_from_scan(const std::vector<ScanRecord>& records,
                                         const EmbeddingMatrix& matrix);

struct BootstrapResult {
    AnchorSet anchors;
    std::vector<ScanRecord> scan_log;
};

// Brute-scans known jailbreak prompts and builds the anchor set from every
// Denial point. Throws DataError("insufficient cases ...") below min_cases.
BootstrapResult bootstrap_anchors(const std::vector<TokenizedPrompt>& prompts, Backend& backend,
                                  const EmbeddingMatrix& matrix, const ScanPlan& plan,
                                  const ClassifierConfig& classifier,
                                  const AnchorOptions& options = {}, std::size_t jobs = 1);

}  // namespace retrig
