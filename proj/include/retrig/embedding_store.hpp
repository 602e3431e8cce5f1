#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace retrig {

using TokenId = std::uint32_t;

enum class SimilarityMetric {
    Cosine,
    NegSquaredEuclidean,
};

struct TokenMatch {
    TokenId token_id = 0;
    std::string token_string;
    float similarity = 0.0f;

    bool operator==(const TokenMatch&) const = default;
};

// Vocabulary embedding table. Rows are row-major f32, one per token id.
// Read-only after construction; safe to share across threads.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    // Throws DataError when the shape disagrees with the payload or any
    // value is non-finite. Empty token_strings are filled with "" entries.
    EmbeddingMatrix(std::string model_id, std::size_t vocab_size, std::size_t dim,
                    std::vector<float> rows, std::vector<std::string> token_strings = {});

    const std::string& model_id() const { return model_id_; }
    std::size_t vocab_size() const { return vocab_size_; }
    std::size_t dim() const { return dim_; }

    std::span<const float> row(TokenId id) const;
    std::span<const float> data() const { return rows_; }
    const std::string& token_string(TokenId id) const;
    const std::vector<std::string>& token_strings() const { return token_strings_; }
    void set_token_strings(std::vector<std::string> strings);

    // L2 norm of each row, computed once at construction.
    double row_norm(TokenId id) const { return norms_.at(id); }

private:
    std::string model_id_;
    std::size_t vocab_size_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> rows_;
    std::vector<double> norms_;
    std::vector<std::string> token_strings_;
};

// EMBF1: "EMBF1\n" + one-line JSON header + N*D little-endian f32.
EmbeddingMatrix load_matrix(const std::filesystem::path& path);
EmbeddingMatrix load_matrix(const std::filesystem::path& path,
                            const std::filesystem::path& vocab_path);
EmbeddingMatrix parse_matrix(std::string_view bytes);
std::string serialize_matrix(const EmbeddingMatrix& matrix);
void write_matrix(const EmbeddingMatrix& matrix, const std::filesystem::path& path);

// Vocabulary sidecar: one token per line, "\n" and "\\" escaped.
std::vector<std::string> load_vocab(const std::filesystem::path& path);
std::vector<std::string> parse_vocab(std::string_view text);
std::string serialize_vocab(const std::vector<std::string>& tokens);
void write_vocab(const std::vector<std::string>& tokens, const std::filesystem::path& path);

// Conventional sibling path for a matrix file: "m.embf" -> "m.vocab".
std::filesystem::path vocab_path_for(const std::filesystem::path& matrix_path);

// Score of one row against a query under the metric. Shared by the top-k
// search so that every caller sees identical float values.
float similarity(const EmbeddingMatrix& matrix, TokenId id, std::span<const float> query,
                 double query_norm, SimilarityMetric metric);

// Exact top-k nearest tokens. Ties resolve by ascending token id.
std::vector<TokenMatch> emb2token(const EmbeddingMatrix& matrix, std::span<const float> query,
                                  std::size_t k,
                                  SimilarityMetric metric = SimilarityMetric::Cosine);

// (1 - fraction) * row(from) + fraction * row(to), fraction in (0, 1].
std::vector<float> interpolate(const EmbeddingMatrix& matrix, TokenId from_token,
                               TokenId to_token, float fraction);

SimilarityMetric parse_metric(std::string_view name);
std::string_view metric_name(SimilarityMetric metric);

}  // namespace retrig
