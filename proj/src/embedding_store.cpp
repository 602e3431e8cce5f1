#include "retrig/embedding_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "retrig/errors.hpp"

namespace retrig {

namespace {

constexpr std::string_view kMagic = "EMBF1\n";

float load_le_f32(const char* p) {
    std::uint32_t bits;
    std::memcpy(&bits, p, sizeof bits);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    return std::bit_cast<float>(bits);
}

void store_le_f32(float v, std::string& out) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    char buf[4];
    std::memcpy(buf, &bits, sizeof buf);
    out.append(buf, sizeof buf);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("write failed for " + path.string());
    }
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::string model_id, std::size_t vocab_size, std::size_t dim,
                                 std::vector<float> rows, std::vector<std::string> token_strings)
    : model_id_(std::move(model_id)), vocab_size_(vocab_size), dim_(dim), rows_(std::move(rows)) {
    if (vocab_size_ == 0 || dim_ == 0) {
        throw DataError("malformed header: vocab_size and dim must be positive");
    }
    if (rows_.size() != vocab_size_ * dim_) {
        throw DataError("payload length mismatch");
    }
    for (float v : rows_) {
        if (!std::isfinite(v)) {
            throw DataError("non-finite value in embedding matrix");
        }
    }
    norms_.resize(vocab_size_);
    for (std::size_t t = 0; t < vocab_size_; ++t) {
        double sq = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) {
            const double v = rows_[t * dim_ + j];
            sq += v * v;
        }
        norms_[t] = std::sqrt(sq);
    }
    set_token_strings(std::move(token_strings));
}

std::span<const float> EmbeddingMatrix::row(TokenId id) const {
    if (id >= vocab_size_) {
        throw DataError("token id " + std::to_string(id) + " out of range");
    }
    return std::span<const float>(rows_).subspan(static_cast<std::size_t>(id) * dim_, dim_);
}

const std::string& EmbeddingMatrix::token_string(TokenId id) const {
    if (id >= vocab_size_) {
        throw DataError("token id " + std::to_string(id) + " out of range");
    }
    return token_strings_[id];
}

void EmbeddingMatrix::set_token_strings(std::vector<std::string> strings) {
    if (strings.empty()) {
        strings.resize(vocab_size_);
    }
    if (strings.size() != vocab_size_) {
        throw DataError("vocabulary has " + std::to_string(strings.size()) +
                        " entries, matrix has " + std::to_string(vocab_size_));
    }
    token_strings_ = std::move(strings);
}

EmbeddingMatrix parse_matrix(std::string_view bytes) {
    if (bytes.substr(0, kMagic.size()) != kMagic) {
        throw DataError("malformed header: missing EMBF1 magic");
    }
    const auto header_end = bytes.find('\n', kMagic.size());
    if (header_end == std::string_view::npos) {
        throw DataError("malformed header: unterminated header line");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(kMagic.size(), header_end - kMagic.size()));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("vocab_size") || !header.contains("dim") ||
        !header["vocab_size"].is_number_unsigned() || !header["dim"].is_number_unsigned()) {
        throw DataError("malformed header: vocab_size/dim missing or not unsigned integers");
    }
    const std::string model_id = header.value("model_id", std::string{});
    const auto vocab_size = header["vocab_size"].get<std::size_t>();
    const auto dim = header["dim"].get<std::size_t>();

    const auto payload = bytes.substr(header_end + 1);
    if (vocab_size == 0 || dim == 0 || payload.size() / 4 / dim != vocab_size ||
        payload.size() != vocab_size * dim * 4) {
        throw DataError("payload length mismatch");
    }
    std::vector<float> rows(vocab_size * dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = load_le_f32(payload.data() + 4 * i);
    }
    return EmbeddingMatrix(model_id, vocab_size, dim, std::move(rows));
}

std::string serialize_matrix(const EmbeddingMatrix& matrix) {
    std::string out(kMagic);
    out += "{\"model_id\":" + nlohmann::json(matrix.model_id()).dump() +
           ",\"vocab_size\":" + std::to_string(matrix.vocab_size()) +
           ",\"dim\":" + std::to_string(matrix.dim()) + "}\n";
    out.reserve(out.size() + matrix.data().size() * 4);
    for (float v : matrix.data()) {
        store_le_f32(v, out);
    }
    return out;
}

EmbeddingMatrix load_matrix(const std::filesystem::path& path) {
    return parse_matrix(read_file(path));
}

EmbeddingMatrix load_matrix(const std::filesystem::path& path,
                            const std::filesystem::path& vocab_path) {
    auto matrix = load_matrix(path);
    matrix.set_token_strings(load_vocab(vocab_path));
    return matrix;
}

void write_matrix(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
    write_file(path, serialize_matrix(matrix));
}

std::vector<std::string> parse_vocab(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    bool escaped = false;
    for (char c : text) {
        if (escaped) {
            if (c == 'n') {
                current += '\n';
            } else if (c == '\\') {
                current += '\\';
            } else {
                current += '\\';
                current += c;
            }
            escaped = false;
        } else if (c == '\\') {
            escaped = true;
        } else if (c == '\n') {
            tokens.push_back(std::move(current));
            current.clear();
        } else {
            current += c;
        }
    }
    if (escaped) {
        current += '\\';
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

std::string serialize_vocab(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        for (char c : t) {
            if (c == '\n') {
                out += "\\n";
            } else if (c == '\\') {
                out += "\\\\";
            } else {
                out += c;
            }
        }
        out += '\n';
    }
    return out;
}

std::vector<std::string> load_vocab(const std::filesystem::path& path) {
    return parse_vocab(read_file(path));
}

void write_vocab(const std::vector<std::string>& tokens, const std::filesystem::path& path) {
    write_file(path, serialize_vocab(tokens));
}

std::filesystem::path vocab_path_for(const std::filesystem::path& matrix_path) {
    auto p = matrix_path;
    p.replace_extension(".vocab");
    return p;
}

float similarity(const EmbeddingMatrix& matrix, TokenId id, std::span<const float> query,
                 double query_norm, SimilarityMetric metric) {
    const auto r = matrix.row(id);
    if (metric == SimilarityMetric::Cosine) {
        const double rn = matrix.row_norm(id);
        if (rn == 0.0) {
            return 0.0f;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) {
            dot += static_cast<double>(r[j]) * static_cast<double>(query[j]);
        }
        return static_cast<float>(dot / (rn * query_norm));
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
        const double d = static_cast<double>(query[j]) - static_cast<double>(r[j]);
        sq += d * d;
    }
    return static_cast<float>(-sq);
}

std::vector<TokenMatch> emb2token(const EmbeddingMatrix& matrix, std::span<const float> query,
                                  std::size_t k, SimilarityMetric metric) {
    if (query.size() != matrix.dim()) {
        throw DataError("dimension mismatch: query has " + std::to_string(query.size()) +
                        ", matrix has " + std::to_string(matrix.dim()));
    }
    if (k == 0) {
        throw DataError("k must be at least 1");
    }
    double qsq = 0.0;
    for (float v : query) {
        qsq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double query_norm = std::sqrt(qsq);
    if (metric == SimilarityMetric::Cosine && query_norm == 0.0) {
        throw DataError("zero-norm query under cosine metric");
    }

    const std::size_t n = matrix.vocab_size();
    std::vector<float> scores(n);
    for (std::size_t t = 0; t < n; ++t) {
        scores[t] = similarity(matrix, static_cast<TokenId>(t), query, query_norm, metric);
    }
    std::vector<TokenId> order(n);
    std::iota(order.begin(), order.end(), TokenId{0});
    const std::size_t take = std::min(k, n);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](TokenId a, TokenId b) {
                          if (scores[a] != scores[b]) {
                              return scores[a] > scores[b];
                          }
                          return a < b;
                      });
    std::vector<TokenMatch> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const TokenId id = order[i];
        out.push_back({id, matrix.token_string(id), scores[id]});
    }
    return out;
}

std::vector<float> interpolate(const EmbeddingMatrix& matrix, TokenId from_token,
                               TokenId to_token, float fraction) {
    if (!(fraction > 0.0f && fraction <= 1.0f)) {
        throw DataError("fraction must lie in (0, 1]");
    }
    const auto from = matrix.row(from_token);
    const auto to = matrix.row(to_token);
    std::vector<float> out(matrix.dim());
    const float keep = 1.0f - fraction;
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = keep * from[j] + fraction * to[j];
    }
    return out;
}

SimilarityMetric parse_metric(std::string_view name) {
    if (name == "cosine") {
        return SimilarityMetric::Cosine;
    }
    if (name == "neg_sq_euclidean" || name == "euclidean") {
        return SimilarityMetric::NegSquaredEuclidean;
    }
    throw DataError("unknown similarity metric '" + std::string(name) + "'");
}

std::string_view metric_name(SimilarityMetric metric) {
    return metric == SimilarityMetric::Cosine ? "cosine" : "neg_sq_euclidean";
}

}  // namespace retrig
