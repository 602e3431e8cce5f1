#pragma once

#include <cstdint>
#include <vector>

#include "retrig/anchors.hpp"
#include "retrig/backend.hpp"
#include "retrig/simlab.hpp"

namespace retrig::simlab {

// A synthetic world plus planted jailbreak and benign prompts.
struct SuiteOptions {
    std::size_t jailbreak = 100;
    std::size_t benign = 100;
    // Share of jailbreak landscapes with a denial region on the guided grid.
    double coupled_fraction = 0.5;
    // Number of world anchors the guided stage knows about.
    std::size_t known_anchors = 4;
    // Anchor popularity for coupled landscapes, heaviest first.
    std::vector<double> anchor_weights = {0.521, 0.266, 0.110, 0.021};
    PlantOptions plant = [] {
        PlantOptions p;
        p.min_width = 1.2;  // 2% of the [-30, 30] search range
        p.max_width = 3.0;
        return p;
    }();
    WorldOptions world;
};

struct PlantedSuite {
    SyntheticWorld world;
    std::vector<TokenizedPrompt> jailbreak;
    std::vector<TokenizedPrompt> benign;
    std::vector<LandscapeSpec> landscapes;  // jailbreak first, then benign
    std::vector<bool> coupled;              // per jailbreak prompt
    AnchorSet anchors;                      // the anchors coupled landscapes use

    SimBackend backend() const;
};

PlantedSuite make_suite(std::uint64_t seed, const SuiteOptions& options = {});

}  // namespace retrig::simlab
