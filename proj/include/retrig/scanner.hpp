#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retrig/backend.hpp"
#include "retrig/classifier.hpp"

namespace retrig {

struct ScanRecord {
    std::string prompt_id;
    // Layer-0 sweeps over several dims carry one Scalar per dim, all with
    // the same delta. Position is stored resolved (non-negative).
    std::vector<DisruptionSpec> disruptions;
    TokenId token_id = 0;  // prompt token at the disrupted position
    Verdict verdict = Verdict::Unaffected;
    std::string response_excerpt;

    const DisruptionSpec& disruption() const { return disruptions.front(); }
    float delta() const { return disruption().scalar().delta; }
    std::size_t position() const { return static_cast<std::size_t>(disruption().position); }
};

struct TokenStrategy {
    enum class Kind { Last, Random, Harmful, Fictitious, Explicit };
    Kind kind = Kind::Last;
    std::size_t random_count = 1;
    std::uint64_t random_seed = 0;
    // Harmful/Fictitious/Explicit: positions supplied by the caller.
    std::vector<std::int64_t> positions;

    static TokenStrategy parse(std::string_view text);
};

struct DimChoice {
    bool random = false;
    std::size_t random_count = 1;
    std::uint64_t random_seed = 0;
    std::vector<std::uint32_t> dims;

    static DimChoice parse(std::string_view text);
};

struct ScanPlan {
    double lo = -30.0;
    double hi = 30.0;
    double step = 0.05;
    std::uint32_t layer_index = 0;
    TokenStrategy token_strategy;
    DimChoice dims{false, 1, 0, {0}};
    // Apply the same delta to all dims at once instead of one sweep per dim.
    bool joint_dims = false;

    void validate() const;
    // Number of deltas per sweep: floor((hi - lo) / step) + 1.
    std::size_t points_per_sweep() const;
    double delta_at(std::size_t i) const;
};

// Concrete (position, dims) sweeps a plan expands to for one prompt.
struct SweepTarget {
    std::size_t position = 0;
    std::vector<std::uint32_t> dims;
};
std::vector<SweepTarget> expand_plan(const ScanPlan& plan, std::size_t prompt_length,
                                     std::size_t embedding_dim);

struct ScanResult {
    std::vector<ScanRecord> records;  // ordered by (position, dim, delta)
    bool complete = true;
    std::string error;
};

ScanResult brute_scan(const TokenizedPrompt& prompt, const ScanPlan& plan, Backend& backend,
                      const ClassifierConfig& classifier, std::size_t jobs = 1,
                      std::size_t max_new_tokens = kDefaultMaxNewTokens);

// Strip CSV: header "delta,verdict" plus one row per record, input order.
// Rejects records from more than one (position, dims) sweep.
std::string export_strip(const std::vector<ScanRecord>& records);
std::vector<std::pair<float, Verdict>> parse_strip(std::string_view csv);

// Groups records into per-(position, dims) sweeps, preserving order.
std::vector<std::vector<ScanRecord>> split_sweeps(const std::vector<ScanRecord>& records);

nlohmann::json to_json(const ScanRecord& record);
ScanRecord scan_record_from_json(const nlohmann::json& j);
std::string to_jsonl(const std::vector<ScanRecord>& records);
std::vector<ScanRecord> load_scan_log(const std::filesystem::path& path);

// "lo:hi" -> (lo, hi). Throws DataError unless lo < hi.
std::pair<double, double> parse_interval(std::string_view text);

}  // namespace retrig
