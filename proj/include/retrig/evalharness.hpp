#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrig/backend.hpp"
#include "retrig/embedding_store.hpp"
#include "retrig/searcher.hpp"

namespace retrig {

enum class CorpusFormat { AdvbenchCsv, JbbJsonl, PlainTxt };
enum class CorpusKind { Jailbreak, Benign };

CorpusFormat parse_corpus_format(std::string_view name);
std::string_view corpus_kind_name(CorpusKind kind);

struct Corpus {
    std::string name;
    CorpusKind kind = CorpusKind::Jailbreak;
    std::vector<TokenizedPrompt> prompts;

    // Throws DataError on duplicate ids or, for jailbreak corpora, prompts
    // without an attack tag.
    void validate() const;
};

struct CorpusOptions {
    std::string name;  // defaults to the file stem
    // Tag for rows that carry no source/method column. Jailbreak rows with
    // neither get Other("unlabelled").
    std::optional<SourceTag> attack_tag;
    std::size_t jobs = 1;
};

// One row of a corpus file before tokenization.
struct CorpusRow {
    std::string id;  // empty: assigned from the row number
    std::string text;
    std::string source;
};

// Pure parsers. Errors name the offending line.
std::vector<CorpusRow> parse_corpus_rows(std::string_view content, CorpusFormat format);
// Minimal RFC 4180 reader: quoted fields, doubled quotes, CRLF.
std::vector<std::vector<std::string>> parse_csv(std::string_view content);

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format, CorpusKind kind,
                   Backend& backend, const CorpusOptions& options = {});

// Builds a corpus from already-parsed rows.
Corpus make_corpus(std::string name, CorpusKind kind, const std::vector<CorpusRow>& rows,
                   Backend& backend, const CorpusOptions& options = {});

// Fraction of reports with decision jailbreak. Reports must cover exactly
// the corpus prompts (any order).
double compute_dr(const Corpus& corpus, const std::vector<DetectionReport>& reports);
double compute_fr(const Corpus& corpus, const std::vector<DetectionReport>& reports);

// Detects every prompt with seed derive_seed(global_seed, prompt_id).
// Output order follows the corpus.
std::vector<DetectionReport> run_corpus(const Corpus& corpus, const SearchConfig& config,
                                        Backend& backend, const EmbeddingMatrix* matrix,
                                        std::uint64_t global_seed, std::size_t jobs = 1);

struct CurvePoint {
    std::size_t budget = 0;
    double dr = 0.0;
    bool operator==(const CurvePoint&) const = default;
};

// A prompt counts as detected at budget b when its first witness came at
// call b or earlier. Valid for reports run at budget >= max(budgets).
std::vector<CurvePoint> curve_from_reports(const std::vector<DetectionReport>& reports,
                                           const std::vector<std::size_t>& budgets);

// One detect run per prompt at the largest budget, truncated at each budget.
std::vector<CurvePoint> dr_vs_budget(const std::vector<TokenizedPrompt>& prompts,
                                     const SearchConfig& config, Backend& backend,
                                     const EmbeddingMatrix* matrix,
                                     const std::vector<std::size_t>& budgets,
                                     std::uint64_t global_seed, std::size_t jobs = 1);

struct QueryStats {
    std::optional<double> mean_to_witness;
    // Mean over the fastest ceil(0.9 * detected) detected prompts.
    std::optional<double> mean_to_90pct;
};
QueryStats query_stats(const std::vector<DetectionReport>& reports);

struct PromptOutcome {
    std::string corpus;
    std::string prompt_id;
    std::string source;
    Decision decision = Decision::Benign;
    std::size_t queries_used = 0;
    std::optional<std::size_t> queries_to_witness;
    bool would_block = false;  // the guard rejects this prompt
    std::string error;
};

struct MetricsReport {
    std::map<std::string, double> per_attack_dr;
    std::map<std::string, std::size_t> per_attack_count;
    std::map<std::string, double> fr;  // by benign corpus name
    std::vector<CurvePoint> dr_curve;
    QueryStats queries;
    std::size_t budget = 0;
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    std::size_t errors = 0;
    std::vector<PromptOutcome> prompts;
};

nlohmann::json to_json(const MetricsReport& report);
std::string format_table(const MetricsReport& report);

// Hash of the search settings that affect results (seed excluded).
std::string config_fingerprint(const SearchConfig& config);

struct EvalOptions {
    std::uint64_t global_seed = 0;
    std::size_t jobs = 1;
    // Budgets for the DR curve; entries above the search budget are dropped.
    std::vector<std::size_t> curve_budgets = {1, 2, 4, 8, 16, 32, 50};
};

MetricsReport evaluate(const std::vector<Corpus>& jailbreak, const std::vector<Corpus>& benign,
                       const SearchConfig& config, Backend& backend, const EmbeddingMatrix* matrix,
                       const EvalOptions& options = {});

}  // namespace retrig
