#include "retrig/transfer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <set>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "retrig/errors.hpp"
#include "retrig/parallel.hpp"
#include "retrig/rng.hpp"
#include "retrig/simlab.hpp"

namespace retrig {

using nlohmann::json;

namespace {

struct Span {
    std::size_t begin;
    std::size_t end;
};

std::vector<Span> word_spans(std::string_view text) {
    std::vector<Span> spans;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])) != 0) {
            ++i;
        }
        if (i >= text.size()) {
            break;
        }
        const std::size_t b = i;
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])) == 0) {
            ++i;
        }
        spans.push_back({b, i});
    }
    return spans;
}

bool starts_with_marker(std::string_view token) {
    return simlab::strip_boundary_marker(token).size() != token.size();
}

}  // namespace

json to_json(const TransferCandidate& c) {
    return {{"text", c.text},
            {"witness_index", c.witness_index},
            {"rank", c.rank},
            {"substituted_position", c.substituted_position},
            {"substituted_token", c.substituted_token}};
}

std::string candidates_to_jsonl(const std::vector<TransferCandidate>& candidates) {
    std::string out;
    for (const auto& c : candidates) {
        out += to_json(c).dump();
        out += '\n';
    }
    return out;
}

std::string token_to_word(std::string_view token_string) {
    const auto word = simlab::strip_boundary_marker(token_string);
    const bool blank = std::all_of(word.begin(), word.end(), [](char c) {
        return std::isspace(static_cast<unsigned char>(c)) != 0;
    });
    return blank ? std::string{} : std::string(word);
}

std::size_t word_index_for_token(const TokenizedPrompt& prompt, const EmbeddingMatrix& matrix,
                                 std::size_t position) {
    const auto words = word_spans(prompt.text);
    if (words.empty()) {
        throw DataError("prompt '" + prompt.prompt_id + "' has no words");
    }
    if (words.size() == prompt.token_ids.size()) {
        return position;
    }
    std::size_t index = 0;
    for (std::size_t i = 1; i <= position && i < prompt.token_ids.size(); ++i) {
        if (starts_with_marker(matrix.token_string(prompt.token_ids[i]))) {
            ++index;
        }
    }
    return std::min(index, words.size() - 1);
}

std::vector<TransferCandidate> build_candidates(const TokenizedPrompt& prompt,
                                                const std::vector<Witness>& witnesses,
                                                const EmbeddingMatrix& matrix, std::size_t k,
                                                CandidateStats* stats, SimilarityMetric metric) {
    if (k < 1) {
        throw DataError("k must be at least 1");
    }
    CandidateStats local;
    CandidateStats& st = stats != nullptr ? *stats : local;
    const auto spans = word_spans(prompt.text);
    std::set<std::string> seen;
    std::vector<TransferCandidate> out;
    for (std::size_t wi = 0; wi < witnesses.size(); ++wi) {
        const auto& w = witnesses[wi];
        if (w.disruption.layer_index != 0 || w.disrupted_embedding.empty()) {
            spdlog::warn("transfer: witness {} has no layer-0 embedding; skipped", wi);
            ++st.skipped_witnesses;
            continue;
        }
        const auto position = resolve_position(w.disruption.position, prompt.token_ids.size());
        const auto word = word_index_for_token(prompt, matrix, position);
        const auto span = spans.at(word);
        const auto matches = emb2token(matrix, w.disrupted_embedding, k, metric);
        for (std::size_t r = 0; r < matches.size(); ++r) {
            const auto replacement = token_to_word(matches[r].token_string);
            if (replacement.empty()) {
                ++st.skipped_empty_words;
                continue;
            }
            std::string text = prompt.text;
            text.replace(span.begin, span.end - span.begin, replacement);
            if (text == prompt.text) {
                ++st.dropped_identical;
                continue;
            }
            if (!seen.insert(text).second) {
                ++st.dropped_duplicates;
                continue;
            }
            out.push_back({std::move(text), wi, r + 1, position, matches[r].token_id});
        }
    }
    return out;
}

ChatCompletionsTarget::ChatCompletionsTarget(Options options) : options_(std::move(options)) {
    const auto scheme_end = options_.endpoint.find("://");
    if (scheme_end == std::string::npos) {
        throw DataError("target endpoint must be an absolute http(s) URL");
    }
    const auto path_start = options_.endpoint.find('/', scheme_end + 3);
    scheme_host_ = options_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/v1/chat/completions"
                                            : options_.endpoint.substr(path_start);
    if (!options_.api_key) {
        if (const char* key = std::getenv("RETRIG_TARGET_KEY"); key != nullptr) {
            options_.api_key = key;
        }
    }
    if (options_.max_concurrent == 0) {
        options_.max_concurrent = 1;
    }
}

json ChatCompletionsTarget::request_body(const std::string& model, const std::string& text,
                                         std::size_t max_tokens) {
    return {{"model", model},
            {"messages", json::array({{{"role", "user"}, {"content", text}}})},
            {"max_tokens", max_tokens},
            {"temperature", 0}};
}

std::string ChatCompletionsTarget::parse_reply(const json& body) {
    try {
        return body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw BackendError(std::string("malformed chat-completions reply: ") + e.what());
    }
}

std::string ChatCompletionsTarget::chat(const std::string& text) {
    httplib::Client client(scheme_host_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout).count();
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(options_.timeout);
    httplib::Headers headers;
    if (options_.api_key && !options_.api_key->empty()) {
        headers.emplace("Authorization", "Bearer " + *options_.api_key);
    }
    const auto res = client.Post(path_, headers,
                                 request_body(options_.model, text, options_.max_tokens).dump(),
                                 "application/json");
    if (!res) {
        throw BackendError("target unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw BackendError("target answered HTTP " + std::to_string(res->status));
    }
    try {
        return parse_reply(json::parse(res->body));
    } catch (const json::exception& e) {
        throw BackendError(std::string("target reply is not JSON: ") + e.what());
    }
}

std::string BackendTarget::chat(const std::string& text) {
    const auto id = "transfer-" + std::to_string(fnv1a64(text));
    const auto prompt = make_prompt(backend_, id, text);
    return backend_.generate(prompt, {}, max_new_tokens_, 0).text;
}

std::size_t BackendTarget::max_concurrency() const {
    return backend_.model_info().max_concurrency;
}

std::string_view probe_decision_name(ProbeResult::Decision d) {
    switch (d) {
        case ProbeResult::Decision::Jailbreak:
            return "jailbreak";
        case ProbeResult::Decision::Benign:
            return "benign";
        case ProbeResult::Decision::Error:
            return "error";
    }
    return "error";
}

ProbeResult probe_target(const std::vector<TransferCandidate>& candidates, TargetClient& client,
                         const ClassifierConfig& classifier, std::size_t concurrency) {
    if (candidates.empty()) {
        throw DataError("probe_target needs at least one candidate");
    }
    ProbeResult result;
    const std::size_t width = std::max<std::size_t>(1, std::min(concurrency, client.max_concurrency()));
    for (std::size_t start = 0; start < candidates.size(); start += width) {
        const std::size_t end = std::min(candidates.size(), start + width);
        std::vector<Verdict> verdicts(end - start, Verdict::Unaffected);
        const auto errors = parallel_for(end - start, width, [&](std::size_t i) {
            verdicts[i] = classify_response(client.chat(candidates[start + i].text), classifier);
        });
        result.probes_issued += end - start;
        for (std::size_t i = 0; i < errors.size(); ++i) {
            if (errors[i]) {
                ++result.failures;
                try {
                    std::rethrow_exception(errors[i]);
                } catch (const std::exception& e) {
                    spdlog::warn("transfer: probe {} failed: {}", start + i, e.what());
                    result.failure_messages.emplace_back(e.what());
                }
            } else if (verdicts[i] == Verdict::Denial && !result.first_denying_candidate) {
                result.first_denying_candidate = start + i;
            }
        }
        if (result.first_denying_candidate) {
            result.decision = ProbeResult::Decision::Jailbreak;
            return result;
        }
    }
    result.decision = result.failures == result.probes_issued ? ProbeResult::Decision::Error
                                                              : ProbeResult::Decision::Benign;
    return result;
}

}  // namespace retrig
