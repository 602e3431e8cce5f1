#include <doctest.h>

#include <httplib.h>

#include "helpers.hpp"
#include "retrig/backend.hpp"
#include "retrig/errors.hpp"
#include "retrig/http_backend.hpp"
#include "retrig/simlab.hpp"

using namespace retrig;
using nlohmann::json;

namespace {

simlab::SyntheticWorld& world() {
    static auto w = simlab::make_world(1);
    return w;
}

simlab::LandscapeSpec denial_at(double lo, double hi) {
    simlab::LandscapeSpec spec;
    spec.prompt_id = "*";
    spec.regions.push_back(testing::scalar_region(lo, hi));
    return spec;
}

// Black-box checks any backend must pass: shape, no-op, and error mapping.
void conformance(Backend& b) {
    const auto info = b.model_info();
    REQUIRE(info.vocab_size == world().matrix.vocab_size());
    REQUIRE(info.embedding_dim == world().matrix.dim());

    const auto text = world().random_prompt(5);
    const auto ids = b.tokenize(text);
    REQUIRE(!ids.empty());
    CHECK(b.detokenize(ids) == text);

    const auto prompt = make_prompt(b, "p", text);
    const auto plain = b.generate(prompt, {}, kDefaultMaxNewTokens, 0);
    const auto zero = b.generate(prompt, {DisruptionSpec::scalar_at(-1, 3, 0.0f)}, kDefaultMaxNewTokens, 0);
    CHECK(zero.text == plain.text);
    CHECK(zero.tokens_generated == plain.tokens_generated);

    const auto denied = b.generate(prompt, {DisruptionSpec::scalar_at(-1, 0, 5.5f)}, kDefaultMaxNewTokens, 0);
    CHECK(denied.text == simlab::kDenialText);

    const auto shorter = b.generate(prompt, {}, 3, 0);
    CHECK(shorter.tokens_generated == 3);

    CHECK_THROWS_AS(b.generate(prompt, {DisruptionSpec::scalar_at(-1, 9999, 1.0f)}, 8, 0), InvalidDisruption);
    CHECK_THROWS_AS(b.generate(prompt, {DisruptionSpec::scalar_at(100000, 0, 1.0f)}, 8, 0), InvalidDisruption);
    auto lerp_deep = DisruptionSpec::lerp_at(-1, 1, 0.5f);
    lerp_deep.layer_index = 2;
    CHECK_THROWS_AS(b.generate(prompt, {lerp_deep}, 8, 0), InvalidDisruption);
    CHECK_THROWS_AS(b.generate(prompt, {DisruptionSpec::lerp_at(-1, 1, 0.0f)}, 8, 0), InvalidDisruption);
}

}  // namespace

TEST_SUITE("backend_protocol") {

TEST_CASE("position resolution") {
    CHECK(resolve_position(-1, 5) == 4);
    CHECK(resolve_position(-5, 5) == 0);
    CHECK(resolve_position(0, 5) == 0);
    CHECK_THROWS_AS(resolve_position(5, 5), InvalidDisruption);
    CHECK_THROWS_AS(resolve_position(-6, 5), InvalidDisruption);
}

TEST_CASE("disruption validation") {
    const ModelInfo info{"m", 10, 4, 3, 1};
    CHECK_NOTHROW(validate_disruption(DisruptionSpec::scalar_at(-1, 3, 2.0f, 3), 4, info));
    CHECK_THROWS_AS(validate_disruption(DisruptionSpec::scalar_at(-1, 4, 2.0f), 4, info), InvalidDisruption);
    CHECK_THROWS_AS(validate_disruption(DisruptionSpec::scalar_at(-1, 0, 2.0f, 4), 4, info), InvalidDisruption);
    CHECK_NOTHROW(validate_disruption(DisruptionSpec::lerp_at(-1, 9, 1.0f), 4, info));
    CHECK_THROWS_AS(validate_disruption(DisruptionSpec::lerp_at(-1, 10, 1.0f), 4, info), InvalidDisruption);
    CHECK_THROWS_AS(validate_disruption(DisruptionSpec::lerp_at(-1, 1, 1.01f), 4, info), InvalidDisruption);
}

TEST_CASE("wire encodings round trip") {
    const auto s = DisruptionSpec::scalar_at(-2, 7, -3.25f, 1);
    CHECK(disruption_from_json(to_json(s)) == s);
    const auto a = DisruptionSpec::lerp_at(-1, 42, 0.75f);
    CHECK(disruption_from_json(to_json(a)) == a);

    GenerateRequest req;
    req.prompt = {"id-1", "hello there", {4, 5}, {}};
    req.disruptions = {s, a};
    req.max_new_tokens = 17;
    req.decode_seed = 99;
    const auto back = generate_request_from_json(to_json(req));
    CHECK(back.prompt.prompt_id == "id-1");
    CHECK(back.prompt.token_ids == req.prompt.token_ids);
    CHECK(back.disruptions == req.disruptions);
    CHECK(back.max_new_tokens == 17);
    CHECK(back.decode_seed == std::optional<std::uint64_t>(99));

    const ModelInfo info{"m", 10, 4, 3, 2};
    const auto info_back = model_info_from_json(to_json(info));
    CHECK(info_back.model_id == "m");
    CHECK(info_back.max_concurrency == 2);

    CHECK_THROWS_AS(disruption_from_json(json{{"kind", "bogus"}}), DataError);
}

TEST_CASE("matrix compatibility guard") {
    CHECK_NOTHROW(check_matrix_compatible(ModelInfo{"m", world().matrix.vocab_size(), world().matrix.dim(), 4, 1},
                                          world().matrix));
    CHECK_THROWS_WITH_AS(check_matrix_compatible(ModelInfo{"m", world().matrix.vocab_size(), 7, 4, 1}, world().matrix),
                         doctest::Contains("embedding_dim mismatch"), DataError);
}

TEST_CASE("conformance: in-process simulated backend") {
    auto b = testing::one_landscape_backend(world(), denial_at(5.0, 6.0));
    conformance(b);
}

TEST_CASE("conformance: simulated backend over HTTP") {
    auto sim = testing::one_landscape_backend(world(), denial_at(5.0, 6.0));
    BackendServer server(sim);
    const int port = server.start("127.0.0.1", 0);
    HttpBackend http("http://127.0.0.1:" + std::to_string(port));
    conformance(http);
    CHECK(http.model_info().max_concurrency == sim.model_info().max_concurrency);

    SUBCASE("raw error bodies") {
        httplib::Client c("127.0.0.1", port);
        GenerateRequest req;
        req.prompt = make_prompt(sim, "p", world().random_prompt(1));
        req.disruptions = {DisruptionSpec::scalar_at(-1, 9999, 1.0f)};
        auto res = c.Post("/v1/generate", to_json(req).dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 400);
        CHECK(json::parse(res->body)["error"] == "invalid_disruption");

        res = c.Post("/v1/generate", "{not json", "application/json");
        REQUIRE(res);
        CHECK(res->status == 400);
        CHECK(json::parse(res->body)["error"] == "bad_request");

        res = c.Post("/v1/tokenize", "{}", "application/json");
        REQUIRE(res);
        CHECK(res->status == 400);
    }

    SUBCASE("not ready answers 503") {
        server.set_ready(false);
        httplib::Client c("127.0.0.1", port);
        auto res = c.Get("/v1/model_info");
        REQUIRE(res);
        CHECK(res->status == 503);
        CHECK_THROWS_AS(http.model_info(), BackendError);
        server.set_ready(true);
        CHECK_NOTHROW(http.model_info());
    }
    server.stop();
}

TEST_CASE("unreachable backend raises BackendError") {
    HttpBackend http("http://127.0.0.1:1", std::chrono::milliseconds(500));
    CHECK_THROWS_AS(http.model_info(), BackendError);
    CHECK_THROWS_AS(http.tokenize("x"), BackendError);
}

}
