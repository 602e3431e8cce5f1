#include "retrig/guard_service.hpp"

#include <fstream>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "retrig/anchors.hpp"
#include "retrig/classifier.hpp"
#include "retrig/errors.hpp"
#include "retrig/rng.hpp"

namespace retrig {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) {
        return {};
    }
    std::filesystem::path path(p);
    return path.is_relative() ? base / path : path;
}

std::string resolve_backend(const std::filesystem::path& base, const std::string& spec) {
    if (spec.rfind("sim:", 0) == 0) {
        return "sim:" + resolve(base, spec.substr(4)).string();
    }
    return spec;
}

json error_body(std::string_view code, std::string_view detail) {
    return {{"error", code}, {"detail", detail}};
}

}  // namespace

GuardConfig guard_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    GuardConfig c;
    try {
        c.backend = resolve_backend(base_dir, j.at("backend").get<std::string>());
        c.matrix = resolve(base_dir, j.value("matrix", std::string{}));
        c.anchors = resolve(base_dir, j.value("anchors", std::string{}));
        c.classifier = resolve(base_dir, j.value("classifier", std::string{}));
        if (j.contains("search")) {
            c.search = search_config_from_json(j.at("search"));
        }
        const auto listen = j.value("listen", std::string("127.0.0.1:8090"));
        const auto colon = listen.rfind(':');
        if (colon == std::string::npos) {
            throw DataError("listen must be host:port");
        }
        c.host = listen.substr(0, colon);
        c.port = std::stoi(listen.substr(colon + 1));
        c.request_timeout = std::chrono::milliseconds(j.value("request_timeout_ms", 60000));
        c.fail_closed = j.value("fail_closed", true);
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed guard config: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw DataError("guard config: listen port is not a number");
    }
    if (!c.anchors.empty()) {
        c.search.anchor_set = load_anchor_set(c.anchors);
    }
    if (!c.classifier.empty()) {
        c.search.classifier = load_classifier_config(c.classifier);
    }
    c.search.validate();
    return c;
}

GuardConfig load_guard_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open guard config " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed guard config " + path.string() + ": " + e.what());
    }
    return guard_config_from_json(j, path.parent_path());
}

GuardService::GuardService(GuardConfig config, Backend& backend, const EmbeddingMatrix* matrix)
    : config_(std::move(config)), backend_(backend), matrix_(matrix) {
    config_.search.validate();
    server_ = std::make_unique<httplib::Server>();
    install_routes();
}

GuardService::~GuardService() { stop(); }

std::uint64_t GuardService::seed_for(const std::string& prompt) const {
    return derive_seed(config_.search.rng_seed, prompt);
}

GuardReply GuardService::guard(const json& request) {
    const auto started = std::chrono::steady_clock::now();
    if (!request.is_object() || !request.contains("prompt") || !request["prompt"].is_string()) {
        return {400, error_body("bad_request", "body must be {\"prompt\": string}")};
    }
    const auto text = request["prompt"].get<std::string>();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        return {400, error_body("bad_request", "prompt is empty")};
    }
    auto cfg = config_.search;
    if (request.contains("seed")) {
        const auto& s = request["seed"];
        if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<std::int64_t>() < 0)) {
            return {400, error_body("bad_request", "seed must be a non-negative integer")};
        }
        cfg.rng_seed = request["seed"].get<std::uint64_t>();
    } else {
        cfg.rng_seed = seed_for(text);
    }

    DetectionReport report;
    try {
        const auto prompt = make_prompt(backend_, "guard", text);
        if (prompt.token_ids.empty()) {
            return {400, error_body("bad_request", "prompt has no tokens")};
        }
        report = detect(prompt, cfg, backend_, matrix_);
    } catch (const std::exception& e) {
        report.decision = Decision::Error;
        report.error = e.what();
    }
    const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - started)
                             .count();

    if (report.decision == Decision::Error) {
        spdlog::warn("guard: backend failure: {}", report.error);
        if (!config_.fail_closed) {
            return {503, error_body("backend_unavailable", report.error)};
        }
        return {200,
                {{"decision", "jailbreak"},
                 {"reason", "backend unavailable"},
                 {"queries_used", report.queries_used},
                 {"witness", nullptr},
                 {"seed", cfg.rng_seed},
                 {"latency_ms", latency}}};
    }
    return {200,
            {{"decision", decision_name(report.decision)},
             {"queries_used", report.queries_used},
             {"witness", report.witnesses.empty() ? json(nullptr) : to_json(report.witnesses.front())},
             {"seed", cfg.rng_seed},
             {"latency_ms", latency}}};
}

GuardReply GuardService::health() {
    try {
        const auto info = backend_.model_info();
        return {200,
                {{"status", "ok"},
                 {"backend", {{"reachable", true}, {"model_id", info.model_id}}},
                 {"anchors", config_.search.anchor_set.entries.size()},
                 {"budget", config_.search.budget}}};
    } catch (const std::exception& e) {
        return {503,
                {{"status", "degraded"},
                 {"backend", {{"reachable", false}, {"error", e.what()}}},
                 {"anchors", config_.search.anchor_set.entries.size()},
                 {"budget", config_.search.budget}}};
    }
}

void GuardService::install_routes() {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.request_timeout).count();
    server_->set_read_timeout(std::max<long>(1, static_cast<long>(secs)), 0);
    server_->set_write_timeout(std::max<long>(1, static_cast<long>(secs)), 0);
    server_->Post("/v1/guard", [this](const httplib::Request& req, httplib::Response& res) {
        GuardReply reply;
        try {
            reply = guard(json::parse(req.body));
        } catch (const json::exception& e) {
            reply = {400, error_body("bad_request", e.what())};
        }
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
    });
    server_->Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
        const auto reply = health();
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
    });
}

int GuardService::start(const std::string& host, int port) {
    const int bound = port == 0 ? server_->bind_to_any_port(host)
                                : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
        throw BackendError("cannot bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void GuardService::listen() {
    if (!server_->listen(config_.host, config_.port)) {
        throw BackendError("cannot listen on " + config_.host + ":" + std::to_string(config_.port));
    }
}

void GuardService::stop() {
    if (server_) {
        server_->stop();
    }
    if (thread_.joinable()) {
        thread_.join();
    }
}

}  // namespace retrig
