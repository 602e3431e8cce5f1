#include "retrig/backend_factory.hpp"

#include "retrig/errors.hpp"
#include "retrig/http_backend.hpp"
#include "retrig/simlab.hpp"

namespace retrig {

std::unique_ptr<Backend> open_backend(const std::string& spec, const EmbeddingMatrix* matrix,
                                      std::chrono::milliseconds timeout) {
    if (spec.rfind("sim:", 0) == 0) {
        auto bundle = simlab::load_sim_bundle(spec.substr(4));
        if (bundle.model.vocab.empty()) {
            if (matrix == nullptr) {
                throw DataError("sim bundle has no vocabulary; pass --matrix");
            }
            bundle.model.vocab = matrix->token_strings();
            bundle.model.embedding_dim = matrix->dim();
        }
        return std::make_unique<simlab::SimBackend>(std::move(bundle.model),
                                                    std::move(bundle.landscapes));
    }
    if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0) {
        return std::make_unique<HttpBackend>(spec, timeout);
    }
    throw DataError("backend must be an http(s) URL or sim:<bundle>, got '" + spec + "'");
}

}  // namespace retrig
