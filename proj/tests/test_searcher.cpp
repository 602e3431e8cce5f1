#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "retrig/errors.hpp"
#include "retrig/searcher.hpp"
#include "retrig/simlab.hpp"

using namespace retrig;
using namespace retrig::simlab;

namespace {

const SyntheticWorld& world() {
    static const auto w = make_world(6);
    return w;
}

AnchorSet all_anchors() {
    AnchorSet set;
    set.model_id = world().matrix.model_id();
    double f = 0.5;
    for (auto id : world().anchor_ids) {
        set.entries.push_back({id, world().matrix.token_string(id), f});
        f /= 2;
    }
    return set;
}

LandscapeSpec scalar_landscape(double lo, double hi) {
    LandscapeSpec spec;
    spec.regions = {testing::scalar_region(lo, hi)};
    return spec;
}

// Straight re-statement of the random stage for width 1: draw position, dim
// and delta in that order, narrow toward zero on gibberish.
struct ExpectedRun {
    std::vector<Interval> trace;
    std::optional<std::size_t> hit;
    std::size_t spent = 0;
};

ExpectedRun expected_random(const LandscapeSpec& spec, std::size_t len, std::size_t dims,
                            const SearchConfig& c) {
    ExpectedRun out;
    Rng rng(c.rng_seed);
    double lo = c.initial_lo, hi = c.initial_hi;
    out.trace.emplace_back(lo, hi);
    for (std::size_t q = 1; q <= c.budget; ++q) {
        if (hi - lo < 1e-6) {
            break;
        }
        const std::size_t pos = rng.bernoulli(c.last_token_probability) ? len - 1 : rng.index(len);
        const auto dim = static_cast<std::uint32_t>(rng.index(dims));
        const auto delta = std::clamp(static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(lo),
                                      static_cast<float>(hi));
        out.spent = q;
        const auto v = lookup_verdict(
            spec, std::vector{DisruptionSpec::scalar_at(static_cast<std::int64_t>(pos), dim, delta)}, len);
        if (v == Verdict::Denial) {
            out.hit = q;
            return out;
        }
        if (v == Verdict::Gibberish) {
            const auto before = std::make_pair(lo, hi);
            if (delta > 0) {
                hi = std::min(hi, static_cast<double>(delta));
            } else if (delta < 0) {
                lo = std::max(lo, static_cast<double>(delta));
            }
            if (std::make_pair(lo, hi) != before) {
                out.trace.emplace_back(lo, hi);
            }
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("searcher") {

TEST_CASE("guided stage finds an anchor-coupled denial at the predicted query") {
    const auto& w = world();
    LandscapeSpec spec;
    Region r;
    r.kind = Region::Kind::AnchorLerp;
    r.anchor_token_id = w.anchor_ids[2];
    r.lo = 0.7;
    r.hi = 0.8;
    spec.regions = {r};
    auto b = testing::one_landscape_backend(w, spec);
    const auto prompt = make_prompt(b, "p", w.random_prompt(1));
    SearchConfig c;
    c.anchor_set = all_anchors();
    for (std::size_t width : {1, 3, 4}) {
        c.speculative_width = width;
        const auto rep = detect(prompt, c, b, &w.matrix);
        REQUIRE(rep.decision == Decision::Jailbreak);
        const auto& wit = rep.witnesses.front();
        // third anchor, third fraction
        CHECK(wit.query_index == 2 * 4 + 3);
        CHECK(wit.stage == SearchStage::Guided);
        CHECK(wit.disruption.anchor_lerp().anchor_token_id == w.anchor_ids[2]);
        CHECK(wit.disruption.anchor_lerp().fraction == 0.75f);
        CHECK(wit.disrupted_embedding == interpolate(w.matrix, prompt.token_ids.back(), w.anchor_ids[2], 0.75f));
        CHECK(rep.queries_used >= 11);
        CHECK(rep.queries_used <= 11 + width - 1);
        CHECK(rep.queries_used <= c.anchor_set.entries.size() * c.fractions.size());
    }
    const auto g = guided_search(prompt, c, b, &w.matrix);
    CHECK(g.witness.has_value());
}

TEST_CASE("random stage: width-6 interval found within 100 calls for nearly every seed") {
    const auto spec = scalar_landscape(5.0, 11.0);
    auto b = testing::one_landscape_backend(world(), spec);
    const auto prompt = make_prompt(b, "p", world().random_prompt(2));
    SearchConfig c;
    c.budget = 100;
    int misses = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        c.rng_seed = seed;
        const auto rep = detect(prompt, c, b, &world().matrix);
        REQUIRE(rep.decision != Decision::Error);
        if (rep.decision == Decision::Benign) {
            ++misses;
        } else {
            CHECK(replay_witness(prompt, rep.witnesses.front(), b, c.classifier) == Verdict::Denial);
        }
    }
    CHECK(misses <= 3);
}

TEST_CASE("random stage follows the reference draw sequence exactly") {
    Rng pick(77);
    for (std::uint64_t s = 0; s < 60; ++s) {
        PlantOptions opts;
        opts.dim = pick.bernoulli(0.5) ? DimSelector{true, 0} : DimSelector{false, 1};
        const auto spec = plant_landscape(s % 5 == 0 ? LandscapeKind::Benign : LandscapeKind::Jailbreak, s, opts);
        auto b = testing::one_landscape_backend(world(), spec);
        const auto prompt = make_prompt(b, "p", world().random_prompt(s));
        SearchConfig c;
        c.budget = 40 + s;
        c.rng_seed = s * 31 + 1;
        const auto want = expected_random(spec, prompt.token_ids.size(), world().matrix.dim(), c);
        const auto got = random_search(prompt, c, b, 0, &world().matrix);
        CHECK(got.interval_trace == want.trace);
        CHECK(got.queries_spent == want.spent);
        CHECK(got.witness.has_value() == want.hit.has_value());
        if (want.hit) {
            CHECK(got.witness->query_index == *want.hit);
        }
    }
}

TEST_CASE("budget is never exceeded and the trace only narrows") {
    for (std::uint64_t s = 0; s < 40; ++s) {
        const auto spec = plant_landscape(LandscapeKind::Benign, s);
        auto b = testing::one_landscape_backend(world(), spec);
        const auto prompt = make_prompt(b, "p", world().random_prompt(s));
        SearchConfig c;
        c.budget = 1 + s;
        c.rng_seed = s;
        c.anchor_set = all_anchors();
        c.speculative_width = 1 + s % 4;
        const auto rep = detect(prompt, c, b, &world().matrix);
        CHECK(rep.decision == Decision::Benign);
        CHECK(rep.queries_used <= c.budget);
        CHECK(b.generate_calls() == rep.queries_used);
        CHECK(rep.budget == c.budget);
        REQUIRE(!rep.interval_trace.empty());
        CHECK(rep.interval_trace.front() == Interval{-30.0, 30.0});
        for (std::size_t i = 1; i < rep.interval_trace.size(); ++i) {
            const auto [plo, phi] = rep.interval_trace[i - 1];
            const auto [lo, hi] = rep.interval_trace[i];
            CHECK(lo >= plo);
            CHECK(hi <= phi);
            CHECK(lo <= 0.0);
            CHECK(hi >= 0.0);
        }
    }
}

TEST_CASE("search stops once the interval collapses") {
    LandscapeSpec spec;
    spec.gibberish_threshold = 0.0;  // every nonzero push is gibberish
    auto b = testing::one_landscape_backend(world(), spec);
    const auto prompt = make_prompt(b, "p", world().random_prompt(3));
    SearchConfig c;
    c.budget = 5000;
    const auto rep = detect(prompt, c, b, nullptr);
    CHECK(rep.decision == Decision::Benign);
    CHECK(rep.queries_used < c.budget);
    const auto [lo, hi] = rep.interval_trace.back();
    CHECK(hi - lo < 1e-6);
}

TEST_CASE("backend failure is an error, never benign") {
    auto b = testing::one_landscape_backend(world(), plant_landscape(LandscapeKind::Benign, 1));
    const auto prompt = make_prompt(b, "p", world().random_prompt(1));
    SearchConfig c;
    c.anchor_set = all_anchors();
    b.fail_after(5);
    const auto rep = detect(prompt, c, b, nullptr);
    CHECK(rep.decision == Decision::Error);
    CHECK(!rep.error.empty());
    CHECK(rep.witnesses.empty());
    b.fail_after(0);
    CHECK(sweep_search(prompt, c, b, nullptr).decision == Decision::Error);
}

TEST_CASE("same seed, same report") {
    auto b = testing::one_landscape_backend(world(), plant_landscape(LandscapeKind::Jailbreak, 4));
    const auto prompt = make_prompt(b, "p", world().random_prompt(4));
    SearchConfig c;
    c.rng_seed = 12345;
    c.budget = 200;
    for (std::size_t width : {1, 4}) {
        c.speculative_width = width;
        const auto a = to_json(detect(prompt, c, b, &world().matrix));
        const auto z = to_json(detect(prompt, c, b, &world().matrix));
        CHECK(a == z);
    }
}

TEST_CASE("speculative width keeps draw order") {
    // With no gibberish feedback in range the draws do not depend on
    // verdicts, so width changes only how many calls run past the hit.
    LandscapeSpec spec = scalar_landscape(2.0, 4.0);
    auto b = testing::one_landscape_backend(world(), spec);
    const auto prompt = make_prompt(b, "p", world().random_prompt(5));
    SearchConfig c;
    c.initial_lo = -15.0;
    c.initial_hi = 15.0;
    c.budget = 300;
    for (std::uint64_t s = 0; s < 30; ++s) {
        c.rng_seed = s;
        c.speculative_width = 1;
        const auto one = detect(prompt, c, b, nullptr);
        c.speculative_width = 4;
        const auto four = detect(prompt, c, b, nullptr);
        REQUIRE(one.decision == four.decision);
        if (one.decision == Decision::Jailbreak) {
            CHECK(one.witnesses.front().disruption == four.witnesses.front().disruption);
            CHECK(one.witnesses.front().query_index == four.witnesses.front().query_index);
            CHECK(four.queries_used >= one.queries_used);
            CHECK(four.queries_used < one.queries_used + 4);
        }
    }
}

TEST_CASE("collected witnesses are distinct denials") {
    auto b = testing::one_landscape_backend(world(), scalar_landscape(-12.0, -4.0));
    const auto prompt = make_prompt(b, "p", world().random_prompt(6));
    SearchConfig c;
    c.budget = 400;
    const auto ws = collect_witnesses(prompt, c, b, &world().matrix, 8);
    REQUIRE(ws.size() == 8);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        CHECK(replay_witness(prompt, ws[i], b, c.classifier) == Verdict::Denial);
        CHECK(ws[i].disrupted_embedding == disrupted_embedding(world().matrix, prompt, ws[i].disruption));
        for (std::size_t j = 0; j < i; ++j) {
            CHECK(!(ws[i].disruption == ws[j].disruption));
            CHECK(ws[j].query_index < ws[i].query_index);
        }
    }
}

TEST_CASE("sweep baseline hits the first grid point inside the interval") {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const double lo = std::round(rng.uniform(-19.0, 17.0) * 1000) / 1000;
        const double hi = lo + 0.3 + rng.uniform(0.0, 2.0);
        auto b = testing::one_landscape_backend(world(), scalar_landscape(lo, hi));
        const auto prompt = make_prompt(b, "p", world().random_prompt(7));
        SearchConfig c;
        c.budget = 2000;
        const auto rep = sweep_search(prompt, c, b, nullptr);
        std::size_t want = 0;
        for (std::size_t i = 0; i < 1201; ++i) {
            const auto d = static_cast<double>(static_cast<float>(std::round((-30.0 + 0.05 * i) * 1e9) / 1e9));
            if (d != 0.0 && lo <= d && d <= hi) {
                want = i + 1;
                break;
            }
        }
        REQUIRE(want > 0);
        REQUIRE(rep.decision == Decision::Jailbreak);
        CHECK(rep.witnesses.front().query_index == want);
        CHECK(rep.queries_used == want);
        CHECK(rep.witnesses.front().stage == SearchStage::Sweep);
        CHECK(rep.witnesses.front().disruption.scalar().dim == 0);
    }
}

TEST_CASE("config and report JSON") {
    SearchConfig c;
    c.budget = 77;
    c.rng_seed = 5;
    c.speculative_width = 3;
    c.anchor_set = all_anchors();
    const auto back = search_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK_THROWS_AS(search_config_from_json({{"budget", 0}}), DataError);
    CHECK_THROWS_AS(search_config_from_json({{"fractions", {0.5, 0.25}}}), DataError);
    CHECK_THROWS_AS(search_config_from_json({{"initial_interval", {1, -1}}}), DataError);

    auto b = testing::one_landscape_backend(world(), scalar_landscape(3.0, 9.0));
    const auto prompt = make_prompt(b, "p", world().random_prompt(8));
    c.budget = 300;
    const auto rep = detect(prompt, c, b, &world().matrix);
    CHECK(to_json(detection_report_from_json(to_json(rep))) == to_json(rep));
}

}
