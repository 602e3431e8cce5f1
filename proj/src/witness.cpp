#include "retrig/witness.hpp"

#include "retrig/errors.hpp"

namespace retrig {

using nlohmann::json;

std::string_view stage_name(SearchStage stage) {
    switch (stage) {
        case SearchStage::Guided:
            return "guided";
        case SearchStage::Random:
            return "random";
        case SearchStage::Sweep:
            return "sweep";
    }
    return "random";
}

SearchStage parse_stage(std::string_view name) {
    if (name == "guided") {
        return SearchStage::Guided;
    }
    if (name == "random") {
        return SearchStage::Random;
    }
    if (name == "sweep") {
        return SearchStage::Sweep;
    }
    throw DataError("unknown search stage '" + std::string(name) + "'");
}

json to_json(const Witness& w) {
    json j = {{"disruption", to_json(w.disruption)},
              {"stage", stage_name(w.stage)},
              {"query_index", w.query_index},
              {"original_token_id", w.original_token_id}};
    j["disrupted_embedding"] = w.disrupted_embedding.empty() ? json(nullptr) : json(w.disrupted_embedding);
    return j;
}

Witness witness_from_json(const json& j) {
    Witness w;
    try {
        w.disruption = disruption_from_json(j.at("disruption"));
        w.stage = parse_stage(j.value("stage", std::string("random")));
        w.query_index = j.value("query_index", std::size_t{0});
        w.original_token_id = j.value("original_token_id", TokenId{0});
        if (j.contains("disrupted_embedding") && !j["disrupted_embedding"].is_null()) {
            w.disrupted_embedding = j["disrupted_embedding"].get<std::vector<float>>();
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed witness: ") + e.what());
    }
    return w;
}

}  // namespace retrig
