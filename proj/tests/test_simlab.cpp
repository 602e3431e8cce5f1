#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "retrig/errors.hpp"
#include "retrig/simlab.hpp"
#include "retrig/suite.hpp"

using namespace retrig;
using namespace retrig::simlab;

namespace {

// Reference lookup for a single scalar disruption at the last token of a
// prompt, written against the landscape JSON rather than the structs.
Verdict oracle_scalar(const nlohmann::json& spec, std::uint32_t dim, double delta) {
    if (delta == 0.0) {
        return Verdict::Unaffected;
    }
    for (const auto& r : spec["regions"]) {
        if (r["kind"] != "scalar" || r["layer"] != 0) {
            continue;
        }
        if (r["position"] != "last" && r["position"] != "any") {
            continue;
        }
        if (r["dim"] != "any" && r["dim"].get<std::uint32_t>() != dim) {
            continue;
        }
        if (r["interval"][0].get<double>() <= delta && delta <= r["interval"][1].get<double>()) {
            return parse_verdict(r["verdict"].get<std::string>());
        }
    }
    return std::abs(delta) > spec["gibberish_threshold"].get<double>() ? Verdict::Gibberish : Verdict::Unaffected;
}

}  // namespace

TEST_SUITE("simlab") {

TEST_CASE("lookup agrees with the reference on random landscapes") {
    Rng rng(21);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        PlantOptions opts;
        opts.dim = rng.bernoulli(0.5) ? DimSelector{true, 0} : DimSelector{false, 2};
        const auto spec = plant_landscape(LandscapeKind::Jailbreak, seed, opts);
        const auto j = to_json(spec);
        for (int i = 0; i < 200; ++i) {
            const double delta = static_cast<float>(rng.uniform(-30.0, 30.0));
            const auto dim = static_cast<std::uint32_t>(rng.index(4));
            const auto d = DisruptionSpec::scalar_at(-1, dim, static_cast<float>(delta));
            REQUIRE(lookup_verdict(spec, d, 7) == oracle_scalar(j, dim, delta));
        }
        // Region edges are inclusive.
        for (const auto& r : spec.regions) {
            const auto lo = static_cast<float>(r.lo);
            if (static_cast<double>(lo) >= r.lo) {
                CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 2, lo), 7) == Verdict::Denial);
            }
        }
    }
}

TEST_CASE("first matching region wins and zero delta is a no-op") {
    LandscapeSpec spec;
    spec.prompt_id = "p";
    spec.regions = {testing::scalar_region(1.0, 3.0, Verdict::Gibberish), testing::scalar_region(2.0, 4.0)};
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 0, 2.5f), 3) == Verdict::Gibberish);
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 0, 3.5f), 3) == Verdict::Denial);
    spec.regions.push_back(testing::scalar_region(-1.0, 1.0));
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 0, 0.0f), 3) == Verdict::Unaffected);
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 0, 20.5f), 3) == Verdict::Gibberish);
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(-1, 0, 20.0f), 3) == Verdict::Unaffected);
    // Region is for the last token only.
    CHECK(lookup_verdict(spec, DisruptionSpec::scalar_at(0, 0, 3.5f), 3) == Verdict::Unaffected);
}

TEST_CASE("combined disruptions: gibberish beats denial") {
    LandscapeSpec spec;
    spec.prompt_id = "p";
    spec.regions = {testing::scalar_region(2.0, 4.0)};
    const auto deny = DisruptionSpec::scalar_at(-1, 0, 3.0f);
    const auto noise = DisruptionSpec::scalar_at(-1, 1, 25.0f);
    const auto calm = DisruptionSpec::scalar_at(-1, 1, 0.5f);
    CHECK(lookup_verdict(spec, std::vector{deny, calm}, 3) == Verdict::Denial);
    CHECK(lookup_verdict(spec, std::vector{deny, noise}, 3) == Verdict::Gibberish);
    CHECK(lookup_verdict(spec, std::vector<DisruptionSpec>{}, 3) == Verdict::Unaffected);
}

TEST_CASE("anchor regions match anchor and fraction") {
    LandscapeSpec spec;
    spec.prompt_id = "p";
    Region r;
    r.kind = Region::Kind::AnchorLerp;
    r.anchor_token_id = 3;
    r.lo = 0.48;
    r.hi = 0.52;
    spec.regions = {r};
    CHECK(lookup_verdict(spec, DisruptionSpec::lerp_at(-1, 3, 0.5f), 4) == Verdict::Denial);
    CHECK(lookup_verdict(spec, DisruptionSpec::lerp_at(-1, 2, 0.5f), 4) == Verdict::Unaffected);
    CHECK(lookup_verdict(spec, DisruptionSpec::lerp_at(-1, 3, 0.75f), 4) == Verdict::Unaffected);
}

TEST_CASE("planting is deterministic and well formed") {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto a = plant_landscape(LandscapeKind::Jailbreak, seed);
        CHECK(a == plant_landscape(LandscapeKind::Jailbreak, seed));
        REQUIRE(!a.regions.empty());
        REQUIRE(a.regions.size() <= 4);
        for (std::size_t i = 0; i < a.regions.size(); ++i) {
            const auto& r = a.regions[i];
            CHECK(r.hi - r.lo >= 0.2 - 1e-9);
            CHECK(r.hi - r.lo <= 2.0 + 1e-3);
            CHECK((r.hi <= -0.5 || r.lo >= 0.5));
            CHECK(std::round(r.lo * 1000) / 1000 == r.lo);
            if (i > 0) {
                CHECK(r.lo >= a.regions[i - 1].hi + 0.1 - 1e-9);
            }
        }
        const auto b = plant_landscape(LandscapeKind::Benign, seed);
        CHECK(!b.has_denial());
        CHECK(b.regions.empty());
    }
}

TEST_CASE("coupled planting puts the lerp region first") {
    PlantOptions opts;
    opts.coupling = AnchorCoupling{};
    opts.coupling->anchors = {1, 2, 3, 4};
    opts.coupling->anchor_index = 2;
    opts.coupling->fraction_index = 1;
    const auto spec = plant_landscape(LandscapeKind::Jailbreak, 9, opts);
    REQUIRE(spec.regions.front().kind == Region::Kind::AnchorLerp);
    CHECK(spec.regions.front().anchor_token_id == 3);
    CHECK(lookup_verdict(spec, DisruptionSpec::lerp_at(-1, 3, 0.5f), 5) == Verdict::Denial);
}

TEST_CASE("landscape JSON round trip") {
    testing::TempDir dir;
    std::vector<LandscapeSpec> specs;
    for (std::uint64_t s = 0; s < 10; ++s) {
        PlantOptions opts;
        opts.position = s % 2 ? PositionSelector{PositionSelector::Kind::Exact, -2}
                              : PositionSelector{PositionSelector::Kind::Any, 0};
        specs.push_back(plant_landscape(LandscapeKind::Jailbreak, s, opts));
    }
    write_landscapes(specs, dir / "l.json");
    CHECK(load_landscapes(dir / "l.json") == specs);
    CHECK_THROWS_AS(landscape_from_json(nlohmann::json::parse(
                        R"({"prompt_id":"x","regions":[{"interval":[2,1],"verdict":"denial"}]})")),
                    DataError);
}

TEST_CASE("tokenizer") {
    SimTokenizer tok({"<unk>", "\xE2\x96\x81wohl", "irement", "foo"});
    CHECK(tok.tokenize("foo wohl zzz") == std::vector<TokenId>{3, 1, 0});
    CHECK(tok.detokenize({3, 1, 2}) == "foo wohl irement");
    CHECK_THROWS_AS(SimTokenizer({"<unk>", "\xE2\x96\x81" "foo", "foo"}), DataError);
    CHECK_THROWS_AS(SimTokenizer({"<unk>", "a b"}), DataError);
}

TEST_CASE("world geometry: a push along an anchor axis lands on that anchor") {
    const auto w = make_world(4);
    REQUIRE(w.anchor_ids.size() == 5);
    CHECK(w.matrix.token_string(w.anchor_ids[0]) == "\xE2\x96\x81oH");
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const auto t = static_cast<TokenId>(6 + rng.index(w.matrix.vocab_size() - 6));
        const auto j = rng.index(w.anchor_ids.size());
        const auto row = w.matrix.row(t);
        std::vector<float> e(row.begin(), row.end());
        e[j] += 2.0f;
        CHECK(emb2token(w.matrix, e, 1, SimilarityMetric::Cosine).front().token_id == w.anchor_ids[j]);
        e[j] -= 2.0f;
        CHECK(emb2token(w.matrix, e, 1, SimilarityMetric::Cosine).front().token_id == t);
    }
}

TEST_CASE("sim backend lookup, failure injection, availability") {
    const auto w = make_world(2);
    LandscapeSpec spec;
    spec.prompt_id = "known";
    spec.prompt_text = w.random_prompt(1);
    spec.regions = {testing::scalar_region(1.0, 2.0)};
    SimBackend b(w.model, {spec});
    auto by_text = make_prompt(b, "other-id", spec.prompt_text);
    CHECK(b.generate(by_text, {DisruptionSpec::scalar_at(-1, 0, 1.5f)}, 64, 0).text == kDenialText);
    const auto stranger = make_prompt(b, "nobody", w.random_prompt(2));
    CHECK_THROWS_AS(b.generate(stranger, {}, 64, 0), DataError);

    b.fail_after(2);
    CHECK_NOTHROW(b.generate(by_text, {}, 64, 0));
    CHECK_NOTHROW(b.generate(by_text, {}, 64, 0));
    CHECK_THROWS_AS(b.generate(by_text, {}, 64, 0), BackendError);

    SimBackend c(w.model, {spec});
    c.set_available(false);
    CHECK_THROWS_AS(c.model_info(), BackendError);
}

TEST_CASE("bundle round trip") {
    testing::TempDir dir;
    const auto w = make_world(3);
    SimBundle bundle{w.model, {plant_landscape(LandscapeKind::Jailbreak, 1)}};
    write_sim_bundle(bundle, dir / "b.json");
    const auto back = load_sim_bundle(dir / "b.json");
    CHECK(back.model.vocab == w.model.vocab);
    CHECK(back.landscapes == bundle.landscapes);
}

TEST_CASE("planted suite shape") {
    SuiteOptions opts;
    opts.jailbreak = 20;
    opts.benign = 10;
    const auto suite = make_suite(5, opts);
    CHECK(suite.jailbreak.size() == 20);
    CHECK(suite.benign.size() == 10);
    CHECK(suite.anchors.entries.size() == 4);
    std::set<std::string> texts;
    for (const auto& p : suite.jailbreak) {
        CHECK(p.source_tag.is_attack());
        texts.insert(p.text);
    }
    for (const auto& p : suite.benign) {
        texts.insert(p.text);
    }
    CHECK(texts.size() == 30);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(suite.coupled[i] == (i < 10));
        CHECK(suite.landscapes[i].has_denial());
    }
    for (std::size_t i = 20; i < 30; ++i) {
        CHECK(!suite.landscapes[i].has_denial());
    }
}

}
