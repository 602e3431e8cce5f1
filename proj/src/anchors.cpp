#include "retrig/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "retrig/errors.hpp"

namespace retrig {

using nlohmann::json;

std::vector<TokenId> AnchorSet::anchor_ids() const {
    std::vector<TokenId> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) {
        ids.push_back(e.token_id);
    }
    return ids;
}

json to_json(const AnchorSet& set) {
    json entries = json::array();
    for (const auto& e : set.entries) {
        entries.push_back({{"token_id", e.token_id}, {"token", e.token_string}, {"frequency", e.frequency}});
    }
    return {{"model_id", set.model_id},
            {"source_case_count", set.source_case_count},
            {"self_mapped_excluded", set.self_mapped_excluded},
            {"coverage", set.coverage},
            {"entries", std::move(entries)}};
}

AnchorSet anchor_set_from_json(const json& j) {
    AnchorSet set;
    try {
        set.model_id = j.value("model_id", std::string{});
        set.source_case_count = j.value("source_case_count", std::size_t{0});
        set.self_mapped_excluded = j.value("self_mapped_excluded", std::size_t{0});
        for (const auto& e : j.at("entries")) {
            set.entries.push_back({e.at("token_id").get<TokenId>(), e.value("token", std::string{}),
                                   e.at("frequency").get<double>()});
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed anchor set: ") + e.what());
    }
    double coverage = 0.0;
    for (std::size_t i = 0; i < set.entries.size(); ++i) {
        const double f = set.entries[i].frequency;
        if (!(f > 0.0 && f <= 1.0)) {
            throw DataError("anchor frequencies must lie in (0, 1]");
        }
        if (i > 0 && set.entries[i - 1].frequency < f) {
            throw DataError("anchor entries must be sorted by descending frequency");
        }
        coverage += f;
    }
    set.coverage = j.value("coverage", coverage);
    if (set.coverage > 1.0 + 1e-9) {
        throw DataError("anchor coverage exceeds 1");
    }
    return set;
}

AnchorSet load_anchor_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open anchor set " + path.string());
    }
    try {
        return anchor_set_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw DataError("malformed anchor set " + path.string() + ": " + e.what());
    }
}

void write_anchor_set(const AnchorSet& set, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << to_json(set).dump(1) << '\n';
}

ConversionHistogram conversion_histogram(const std::vector<Witness>& witnesses,
                                         const EmbeddingMatrix& matrix, SimilarityMetric metric) {
    ConversionHistogram hist;
    std::map<TokenId, std::size_t> counts;
    for (const auto& w : witnesses) {
        if (w.disrupted_embedding.empty()) {
            throw DataError("witness lacks a layer-0 disrupted embedding");
        }
        if (w.disrupted_embedding.size() != matrix.dim()) {
            throw DataError("matrix/model mismatch: witness embedding has " +
                            std::to_string(w.disrupted_embedding.size()) + " dims, matrix has " +
                            std::to_string(matrix.dim()));
        }
        const auto top = emb2token(matrix, w.disrupted_embedding, 1, metric).front();
        if (top.token_id == w.original_token_id) {
            ++hist.self_mapped;
            continue;
        }
        ++counts[top.token_id];
        ++hist.included;
    }
    for (const auto& [id, count] : counts) {
        hist.entries.push_back({id, matrix.token_string(id),
                                static_cast<double>(count) / static_cast<double>(hist.included)});
    }
    // Counts are exact integers, so ordering by frequency is ordering by count.
    std::stable_sort(hist.entries.begin(), hist.entries.end(),
                     [](const AnchorEntry& a, const AnchorEntry& b) { return a.frequency > b.frequency; });
    return hist;
}

AnchorSet identify_anchors(const std::vector<Witness>& witnesses, const EmbeddingMatrix& matrix,
                           const AnchorOptions& options) {
    if (!(options.coverage_threshold > 0.0 && options.coverage_threshold <= 1.0)) {
        throw DataError("coverage threshold must lie in (0, 1]");
    }
    auto hist = conversion_histogram(witnesses, matrix, options.metric);
    if (hist.included < options.min_cases || hist.included == 0) {
        throw DataError("insufficient cases: " + std::to_string(hist.included) +
                        " usable disruption cases, need " + std::to_string(options.min_cases));
    }
    AnchorSet set;
    set.model_id = matrix.model_id();
    set.source_case_count = hist.included;
    set.self_mapped_excluded = hist.self_mapped;
    // Minimal prefix whose cumulative frequency reaches the threshold. The
    // running sum is kept in integer counts to avoid rounding drift.
    std::size_t cumulative = 0;
    for (const auto& e : hist.entries) {
        set.entries.push_back(e);
        cumulative += static_cast<std::size_t>(std::llround(e.frequency * static_cast<double>(hist.included)));
        if (static_cast<double>(cumulative) >=
            options.coverage_threshold * static_cast<double>(hist.included)) {
            break;
        }
    }
    set.coverage = static_cast<double>(cumulative) / static_cast<double>(hist.included);
    return set;
}

std::vector<Witness> witnesses_from_scan(const std::vector<ScanRecord>& records,
                                         const EmbeddingMatrix& matrix) {
    std::vector<Witness> out;
    for (const auto& r : records) {
        if (r.verdict != Verdict::Denial || r.disruptions.empty() ||
            r.disruption().layer_index != 0) {
            continue;
        }
        const auto row = matrix.row(r.token_id);
        Witness w;
        w.disruption = r.disruption();
        w.disrupted_embedding.assign(row.begin(), row.end());
        for (const auto& d : r.disruptions) {
            const auto& s = d.scalar();
            if (s.dim >= w.disrupted_embedding.size()) {
                throw DataError("scan record dim outside the matrix");
            }
            w.disrupted_embedding[s.dim] += s.delta;
        }
        w.stage = SearchStage::Sweep;
        w.original_token_id = r.token_id;
        out.push_back(std::move(w));
    }
    return out;
}

BootstrapResult bootstrap_anchors(const std::vector<TokenizedPrompt>& prompts, Backend& backend,
                                  const EmbeddingMatrix& matrix, const ScanPlan& plan,
                                  const ClassifierConfig& classifier, const AnchorOptions& options,
                                  std::size_t jobs) {
    check_matrix_compatible(backend.model_info(), matrix);
    BootstrapResult result;
    for (const auto& p : prompts) {
        auto scan = brute_scan(p, plan, backend, classifier, jobs);
        if (!scan.complete) {
            throw BackendError("scan of '" + p.prompt_id + "' aborted: " + scan.error);
        }
        result.scan_log.insert(result.scan_log.end(), std::make_move_iterator(scan.records.begin()),
                               std::make_move_iterator(scan.records.end()));
    }
    const auto witnesses = witnesses_from_scan(result.scan_log, matrix);
    if (witnesses.size() < options.min_cases) {
        throw DataError("insufficient cases: " + std::to_string(witnesses.size()) +
                        " denial records, need " + std::to_string(options.min_cases));
    }
    result.anchors = identify_anchors(witnesses, matrix, options);
    return result;
}

}  // namespace retrig
