#include "retrig/suite.hpp"

#include <set>

#include "retrig/errors.hpp"
#include "retrig/rng.hpp"

namespace retrig::simlab {

namespace {

constexpr SourceTag::Kind kAttacks[] = {SourceTag::Kind::Gcg, SourceTag::Kind::Pair,
                                        SourceTag::Kind::Rs, SourceTag::Kind::Ifsj,
                                        SourceTag::Kind::AutodanT};

std::string numbered(const char* prefix, std::size_t i) {
    auto n = std::to_string(i + 1);
    return prefix + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
}

}  // namespace

SimBackend PlantedSuite::backend() const { return SimBackend(world.model, landscapes); }

PlantedSuite make_suite(std::uint64_t seed, const SuiteOptions& options) {
    if (options.known_anchors == 0 || options.known_anchors > options.world.anchor_strings.size()) {
        throw DataError("known_anchors must lie in [1, world anchors]");
    }
    PlantedSuite suite{make_world(seed, options.world), {}, {}, {}, {}, {}};
    SimTokenizer tokenizer(suite.world.model.vocab);

    AnchorCoupling coupling;
    coupling.anchors.assign(suite.world.anchor_ids.begin(),
                            suite.world.anchor_ids.begin() +
                                static_cast<std::ptrdiff_t>(options.known_anchors));
    coupling.anchor_weights = options.anchor_weights;
    coupling.anchor_weights.resize(options.known_anchors, 0.0);

    double total = 0.0;
    for (double w : coupling.anchor_weights) {
        total += w;
    }
    suite.anchors.model_id = suite.world.matrix.model_id();
    for (std::size_t i = 0; i < coupling.anchors.size(); ++i) {
        const auto id = coupling.anchors[i];
        const double f = total > 0.0 ? coupling.anchor_weights[i] / total
                                     : 1.0 / static_cast<double>(coupling.anchors.size());
        if (f > 0.0) {
            suite.anchors.entries.push_back({id, suite.world.matrix.token_string(id), f});
            suite.anchors.coverage += f;
        }
    }
    suite.anchors.coverage = std::min(suite.anchors.coverage, 1.0);

    std::set<std::string> texts;
    auto fresh_text = [&](std::string_view key, std::size_t i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            auto text = suite.world.random_prompt(
                derive_seed(seed, std::string(key) + std::to_string(i) + ":" + std::to_string(attempt)),
                options.world);
            if (texts.insert(text).second) {
                return text;
            }
        }
    };

    const auto coupled_count = static_cast<std::size_t>(
        std::llround(options.coupled_fraction * static_cast<double>(options.jailbreak)));
    for (std::size_t i = 0; i < options.jailbreak; ++i) {
        auto plant = options.plant;
        plant.prompt_id = numbered("jb-", i);
        plant.prompt_text = fresh_text("jb", i);
        const bool coupled = i < coupled_count;
        if (coupled) {
            plant.coupling = coupling;
        }
        suite.landscapes.push_back(
            plant_landscape(LandscapeKind::Jailbreak, derive_seed(seed, plant.prompt_id), plant));
        suite.coupled.push_back(coupled);
        suite.jailbreak.push_back({plant.prompt_id, plant.prompt_text,
                                   tokenizer.tokenize(plant.prompt_text),
                                   {kAttacks[i % std::size(kAttacks)], {}}});
    }
    for (std::size_t i = 0; i < options.benign; ++i) {
        auto plant = options.plant;
        plant.prompt_id = numbered("bn-", i);
        plant.prompt_text = fresh_text("bn", i);
        suite.landscapes.push_back(
            plant_landscape(LandscapeKind::Benign, derive_seed(seed, plant.prompt_id), plant));
        suite.benign.push_back(
            {plant.prompt_id, plant.prompt_text, tokenizer.tokenize(plant.prompt_text), {}});
    }
    return suite;
}

}  // namespace retrig::simlab
