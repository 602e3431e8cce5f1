#include "retrig/http_backend.hpp"

#include <httplib.h>

#include "retrig/errors.hpp"

namespace retrig {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

httplib::Client make_client(const std::string& base_url, std::chrono::milliseconds timeout) {
    httplib::Client client(base_url);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(),
                                  0);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    return client;
}

json decode_reply(const httplib::Result& res, const std::string& what) {
    if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
            throw BackendError(what + ": timeout or read failure (" + httplib::to_string(err) + ")");
        }
        throw BackendError(what + ": backend unreachable (" + httplib::to_string(err) + ")");
    }
    json body;
    try {
        body = json::parse(res->body);
    } catch (const json::exception&) {
        throw BackendError(what + ": non-JSON reply with HTTP " + std::to_string(res->status));
    }
    if (res->status == 400) {
        const auto code = body.value("error", std::string("bad_request"));
        const auto detail = body.value("detail", std::string{});
        if (code == "invalid_disruption") {
            throw InvalidDisruption(detail);
        }
        throw DataError(code + ": " + detail);
    }
    if (res->status == 503) {
        throw BackendError(what + ": model not loaded");
    }
    if (res->status != 200) {
        throw BackendError(what + ": HTTP " + std::to_string(res->status) + " " +
                           body.value("detail", std::string{}));
    }
    return body;
}

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), kJson);
}

void reply_error(httplib::Response& res, int status, std::string code, std::string detail) {
    reply(res, status, json{{"error", std::move(code)}, {"detail", std::move(detail)}});
}

}  // namespace

HttpBackend::HttpBackend(std::string base_url, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), timeout_(timeout) {
    while (!base_url_.empty() && base_url_.back() == '/') {
        base_url_.pop_back();
    }
}

json HttpBackend::post(const std::string& path, const json& body) {
    auto client = make_client(base_url_, timeout_);
    return decode_reply(client.Post(path, body.dump(), kJson), "POST " + path);
}

json HttpBackend::get(const std::string& path) {
    auto client = make_client(base_url_, timeout_);
    return decode_reply(client.Get(path), "GET " + path);
}

GenerationResult HttpBackend::generate(const TokenizedPrompt& prompt,
                                       const std::vector<DisruptionSpec>& disruptions,
                                       std::size_t max_new_tokens,
                                       std::optional<std::uint64_t> decode_seed) {
    GenerateRequest req{prompt, disruptions, max_new_tokens, decode_seed};
    try {
        return generation_from_json(post("/v1/generate", to_json(req)));
    } catch (const InvalidDisruption&) {
        throw;
    } catch (const DataError& e) {
        throw BackendError(std::string("malformed generate reply: ") + e.what());
    }
}

ModelInfo HttpBackend::model_info() {
    try {
        return model_info_from_json(get("/v1/model_info"));
    } catch (const DataError& e) {
        throw BackendError(std::string("malformed model_info reply: ") + e.what());
    }
}

std::vector<TokenId> HttpBackend::tokenize(const std::string& text) {
    const auto body = post("/v1/tokenize", json{{"text", text}});
    try {
        return body.at("token_ids").get<std::vector<TokenId>>();
    } catch (const json::exception&) {
        throw BackendError("malformed tokenize reply");
    }
}

std::string HttpBackend::detokenize(const std::vector<TokenId>& ids) {
    const auto body = post("/v1/detokenize", json{{"token_ids", ids}});
    try {
        return body.at("text").get<std::string>();
    } catch (const json::exception&) {
        throw BackendError("malformed detokenize reply");
    }
}

BackendServer::BackendServer(Backend& backend)
    : backend_(backend), server_(std::make_unique<httplib::Server>()) {
    install_routes();
}

BackendServer::~BackendServer() { stop(); }

void BackendServer::install_routes() {
    // Every handler maps engine exceptions onto the protocol's status codes.
    auto guarded = [this](auto&& body) {
        return [this, body](const httplib::Request& req, httplib::Response& res) {
            if (!ready_) {
                reply_error(res, 503, "not_loaded", "model not loaded");
                return;
            }
            try {
                json in;
                if (!req.body.empty()) {
                    try {
                        in = json::parse(req.body);
                    } catch (const json::exception& e) {
                        reply_error(res, 400, "bad_request", e.what());
                        return;
                    }
                }
                reply(res, 200, body(in));
            } catch (const InvalidDisruption& e) {
                reply_error(res, 400, "invalid_disruption", e.what());
            } catch (const DataError& e) {
                reply_error(res, 400, "bad_request", e.what());
            } catch (const BackendError& e) {
                reply_error(res, 503, "backend_error", e.what());
            } catch (const std::exception& e) {
                reply_error(res, 500, "internal", e.what());
            }
        };
    };

    server_->Post("/v1/generate", guarded([this](const json& in) {
        auto req = generate_request_from_json(in);
        if (req.prompt.token_ids.empty()) {
            throw DataError("token_ids must be non-empty");
        }
        const auto info = backend_.model_info();
        for (const auto& d : req.disruptions) {
            validate_disruption(d, req.prompt.token_ids.size(), info);
        }
        req.prompt.text = backend_.detokenize(req.prompt.token_ids);
        return to_json(
            backend_.generate(req.prompt, req.disruptions, req.max_new_tokens, req.decode_seed));
    }));
    server_->Get("/v1/model_info",
                 guarded([this](const json&) { return to_json(backend_.model_info()); }));
    server_->Post("/v1/tokenize", guarded([this](const json& in) {
        if (!in.is_object() || !in.contains("text") || !in["text"].is_string()) {
            throw DataError("missing field 'text'");
        }
        return json{{"token_ids", backend_.tokenize(in["text"].get<std::string>())}};
    }));
    server_->Post("/v1/detokenize", guarded([this](const json& in) {
        if (!in.is_object() || !in.contains("token_ids") || !in["token_ids"].is_array()) {
            throw DataError("missing field 'token_ids'");
        }
        return json{{"text", backend_.detokenize(in["token_ids"].get<std::vector<TokenId>>())}};
    }));
}

int BackendServer::start(const std::string& host, int port) {
    const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
        throw BackendError("cannot bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void BackendServer::listen(const std::string& host, int port) {
    if (!server_->listen(host, port)) {
        throw BackendError("cannot listen on " + host + ":" + std::to_string(port));
    }
}

void BackendServer::stop() {
    if (server_) {
        server_->stop();
    }
    if (thread_.joinable()) {
        thread_.join();
    }
}

}  // namespace retrig
