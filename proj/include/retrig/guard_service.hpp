#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "retrig/backend.hpp"
#include "retrig/embedding_store.hpp"
#include "retrig/searcher.hpp"

namespace httplib {
class Server;
}

namespace retrig {

struct GuardConfig {
    std::string backend;               // URL or sim:<bundle>
    std::filesystem::path matrix;      // optional
    std::filesystem::path anchors;     // optional; empty set skips the guided stage
    std::filesystem::path classifier;  // optional
    SearchConfig search;               // anchor_set and classifier filled at load
    std::string host = "127.0.0.1";
    int port = 8090;
    std::chrono::milliseconds request_timeout = std::chrono::seconds(60);
    // Answer "jailbreak" instead of 503 when the backend is down.
    bool fail_closed = true;
};

// Relative paths resolve against `base_dir`. Loads the anchor set and
// classifier named in the config, so every referenced file is checked here.
GuardConfig guard_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
GuardConfig load_guard_config(const std::filesystem::path& path);

struct GuardReply {
    int status = 200;
    nlohmann::json body;
};

class GuardService {
public:
    GuardService(GuardConfig config, Backend& backend, const EmbeddingMatrix* matrix);
    ~GuardService();

    GuardService(const GuardService&) = delete;
    GuardService& operator=(const GuardService&) = delete;

    // Handler bodies, callable without HTTP.
    GuardReply guard(const nlohmann::json& request);
    GuardReply health();

    // Seed used for a prompt when the request does not override it.
    std::uint64_t seed_for(const std::string& prompt) const;

    int start(const std::string& host, int port);  // background thread; returns the bound port
    void listen();                                 // blocks on config host:port
    void stop();

    const GuardConfig& config() const { return config_; }

private:
    void install_routes();

    GuardConfig config_;
    Backend& backend_;
    const EmbeddingMatrix* matrix_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

}  // namespace retrig
