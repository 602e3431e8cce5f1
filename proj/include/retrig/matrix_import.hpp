#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "retrig/embedding_store.hpp"

namespace retrig {

// Text vectors: "token v1 ... vD" per line, optional "N D" first line.
EmbeddingMatrix parse_text_vectors(std::string_view text, std::string model_id);

// NumPy .npy holding a C-order 2-D float32 or float64 array. Token strings
// come from a vocab file when given, else stay empty.
EmbeddingMatrix parse_npy(std::string_view bytes, std::string model_id);

EmbeddingMatrix import_matrix(const std::filesystem::path& path, std::string model_id,
                              const std::filesystem::path& vocab_path = {});

}  // namespace retrig
