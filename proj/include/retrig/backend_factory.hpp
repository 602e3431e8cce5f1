#pragma once

#include <chrono>
#include <memory>
#include <string>

#include "retrig/backend.hpp"
#include "retrig/embedding_store.hpp"

namespace retrig {

// "http(s)://host:port" or "sim:<bundle.json>". A bundle without a
// vocabulary takes token strings and dim from `matrix`.
std::unique_ptr<Backend> open_backend(const std::string& spec, const EmbeddingMatrix* matrix = nullptr,
                                      std::chrono::milliseconds timeout = std::chrono::seconds(120));

}  // namespace retrig
