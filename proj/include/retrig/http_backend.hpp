#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include "retrig/backend.hpp"

namespace httplib {
class Server;
}

namespace retrig {

// Client for a generation backend speaking the HTTP+JSON wire protocol.
// Each call opens its own connection, so concurrent calls are safe.
class HttpBackend final : public Backend {
public:
    explicit HttpBackend(std::string base_url,
                         std::chrono::milliseconds timeout = std::chrono::seconds(120));

    GenerationResult generate(const TokenizedPrompt& prompt,
                              const std::vector<DisruptionSpec>& disruptions,
                              std::size_t max_new_tokens,
                              std::optional<std::uint64_t> decode_seed) override;
    ModelInfo model_info() override;
    std::vector<TokenId> tokenize(const std::string& text) override;
    std::string detokenize(const std::vector<TokenId>& ids) override;

    const std::string& base_url() const { return base_url_; }

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body);
    nlohmann::json get(const std::string& path);

    std::string base_url_;
    std::chrono::milliseconds timeout_;
};

// Serves any Backend over the wire protocol. Used to put the simulated
// backend behind HTTP for end-to-end runs.
class BackendServer {
public:
    explicit BackendServer(Backend& backend);
    ~BackendServer();

    BackendServer(const BackendServer&) = delete;
    BackendServer& operator=(const BackendServer&) = delete;

    // Binds and serves on a background thread. Port 0 picks a free port.
    // Returns the bound port.
    int start(const std::string& host, int port);
    // Blocks until stop() is called from elsewhere.
    void listen(const std::string& host, int port);
    void stop();

    // While not ready, every endpoint answers 503.
    void set_ready(bool ready) { ready_ = ready; }

private:
    void install_routes();

    Backend& backend_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::atomic<bool> ready_{true};
};

}  // namespace retrig
