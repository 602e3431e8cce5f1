#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "retrig/backend.hpp"

namespace retrig {

enum class SearchStage {
    Guided,
    Random,
    Sweep,  // brute-force scans and the left-to-right baseline
};

std::string_view stage_name(SearchStage stage);
SearchStage parse_stage(std::string_view name);

// A disruption verified to elicit a denial.
struct Witness {
    DisruptionSpec disruption;
    // Layer-0 witnesses with a known matrix only; empty otherwise.
    std::vector<float> disrupted_embedding;
    SearchStage stage = SearchStage::Random;
    std::size_t query_index = 0;  // 1-based generation call that found it
    TokenId original_token_id = 0;
};

nlohmann::json to_json(const Witness& w);
Witness witness_from_json(const nlohmann::json& j);

}  // namespace retrig
