#include "retrig/matrix_import.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "retrig/errors.hpp"

namespace retrig {

namespace {

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

template <typename T>
T load_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof v);
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof v);
    }
    return v;
}

}  // namespace

EmbeddingMatrix parse_text_vectors(std::string_view text, std::string model_id) {
    std::vector<std::string> tokens;
    std::vector<float> rows;
    std::size_t dim = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::istringstream fields(line);
        std::vector<std::string> parts;
        for (std::string f; fields >> f;) {
            parts.push_back(std::move(f));
        }
        if (parts.empty()) {
            continue;
        }
        if (line_no == 1 && parts.size() == 2 &&
            std::all_of(line.begin(), line.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) || c == ' '; })) {
            continue;
        }
        if (parts.size() < 2) {
            throw DataError("line " + std::to_string(line_no) + ": expected a token and values");
        }
        if (dim == 0) {
            dim = parts.size() - 1;
        } else if (parts.size() - 1 != dim) {
            throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                            " values, got " + std::to_string(parts.size() - 1));
        }
        tokens.push_back(parts[0]);
        for (std::size_t i = 1; i < parts.size(); ++i) {
            float v = 0.0f;
            const auto& s = parts[i];
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc{} || ptr != s.data() + s.size()) {
                throw DataError("line " + std::to_string(line_no) + ": bad number '" + s + "'");
            }
            rows.push_back(v);
        }
    }
    if (tokens.empty()) {
        throw DataError("no vectors found");
    }
    const auto n = tokens.size();
    return EmbeddingMatrix(std::move(model_id), n, dim, std::move(rows), std::move(tokens));
}

EmbeddingMatrix parse_npy(std::string_view bytes, std::string model_id) {
    if (bytes.size() < 10 || bytes.substr(0, 6) != "\x93NUMPY") {
        throw DataError("not a .npy file");
    }
    const auto major = static_cast<unsigned char>(bytes[6]);
    std::size_t header_len = 0;
    std::size_t offset = 0;
    if (major == 1) {
        header_len = load_le<std::uint16_t>(bytes.data() + 8);
        offset = 10;
    } else {
        if (bytes.size() < 12) {
            throw DataError("truncated .npy header");
        }
        header_len = load_le<std::uint32_t>(bytes.data() + 8);
        offset = 12;
    }
    if (offset + header_len > bytes.size()) {
        throw DataError("truncated .npy header");
    }
    const std::string header(bytes.substr(offset, header_len));
    std::smatch m;
    if (!std::regex_search(header, m, std::regex(R"('descr':\s*'([<>|=])([fF])(\d))"))) {
        throw DataError(".npy dtype must be float32 or float64");
    }
    const int width = std::stoi(m[3].str());
    if ((width != 4 && width != 8) || m[1].str() == ">") {
        throw DataError(".npy dtype must be little-endian float32 or float64");
    }
    if (std::regex_search(header, std::regex(R"('fortran_order':\s*True)"))) {
        throw DataError(".npy array must be C-ordered");
    }
    if (!std::regex_search(header, m, std::regex(R"('shape':\s*\((\d+),\s*(\d+),?\))"))) {
        throw DataError(".npy array must be 2-D");
    }
    const auto n = static_cast<std::size_t>(std::stoull(m[1].str()));
    const auto d = static_cast<std::size_t>(std::stoull(m[2].str()));
    const char* data = bytes.data() + offset + header_len;
    const std::size_t avail = bytes.size() - offset - header_len;
    if (avail != n * d * static_cast<std::size_t>(width)) {
        throw DataError(".npy payload length mismatch");
    }
    std::vector<float> rows(n * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = width == 4 ? load_le<float>(data + i * 4)
                             : static_cast<float>(load_le<double>(data + i * 8));
    }
    return EmbeddingMatrix(std::move(model_id), n, d, std::move(rows), {});
}

EmbeddingMatrix import_matrix(const std::filesystem::path& path, std::string model_id,
                              const std::filesystem::path& vocab_path) {
    const auto bytes = read_all(path);
    auto matrix = path.extension() == ".npy" ? parse_npy(bytes, std::move(model_id))
                                             : parse_text_vectors(bytes, std::move(model_id));
    if (!vocab_path.empty()) {
        matrix.set_token_strings(load_vocab(vocab_path));
    }
    return matrix;
}

}  // namespace retrig
