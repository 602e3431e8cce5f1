#include "retrig/evalharness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "retrig/errors.hpp"
#include "retrig/parallel.hpp"
#include "retrig/rng.hpp"

namespace retrig {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

const char* const kSourceColumns[] = {"source", "method", "attack", "source_tag"};

std::vector<CorpusRow> csv_rows(std::string_view content) {
    const auto table = parse_csv(content);
    if (table.empty()) {
        throw DataError("empty corpus");
    }
    const auto& header = table.front();
    std::optional<std::size_t> goal, id, source;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const auto name = lower(trim(header[i]));
        if (name == "goal") {
            goal = i;
        } else if (name == "id" || name == "prompt_id") {
            id = i;
        } else if (!source && std::find(std::begin(kSourceColumns), std::end(kSourceColumns), name) !=
                                  std::end(kSourceColumns)) {
            source = i;
        }
    }
    if (!goal) {
        throw DataError("CSV corpus lacks a 'goal' column");
    }
    std::vector<CorpusRow> rows;
    for (std::size_t r = 1; r < table.size(); ++r) {
        const auto& row = table[r];
        if (row.size() == 1 && trim(row[0]).empty()) {
            continue;
        }
        if (*goal >= row.size()) {
            throw DataError("CSV row " + std::to_string(r + 1) + " has no 'goal' value");
        }
        CorpusRow out;
        out.text = row[*goal];
        if (trim(out.text).empty()) {
            continue;
        }
        if (id && *id < row.size()) {
            out.id = trim(row[*id]);
        }
        if (source && *source < row.size()) {
            out.source = trim(row[*source]);
        }
        rows.push_back(std::move(out));
    }
    return rows;
}

std::vector<CorpusRow> jsonl_rows(std::string_view content) {
    std::vector<CorpusRow> rows;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= content.size()) {
        auto end = content.find('\n', start);
        if (end == std::string_view::npos) {
            end = content.size();
        }
        ++line_no;
        const auto line = trim(content.substr(start, end - start));
        start = end + 1;
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("prompt") || !j["prompt"].is_string()) {
            throw DataError("line " + std::to_string(line_no) + ": missing 'prompt' field");
        }
        CorpusRow row;
        row.text = j["prompt"].get<std::string>();
        if (trim(row.text).empty()) {
            continue;
        }
        for (const char* key : {"prompt_id", "id"}) {
            if (j.contains(key) && row.id.empty()) {
                row.id = j[key].is_string() ? j[key].get<std::string>() : j[key].dump();
            }
        }
        for (const char* key : kSourceColumns) {
            if (j.contains(key) && j[key].is_string() && row.source.empty()) {
                row.source = j[key].get<std::string>();
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<CorpusRow> text_rows(std::string_view content) {
    std::vector<CorpusRow> rows;
    std::istringstream in{std::string(content)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (trim(line).empty()) {
            continue;
        }
        rows.push_back({{}, line, {}});
    }
    return rows;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void check_coverage(const Corpus& corpus, const std::vector<DetectionReport>& reports) {
    if (reports.size() != corpus.prompts.size()) {
        throw DataError("corpus '" + corpus.name + "' has " + std::to_string(corpus.prompts.size()) +
                        " prompts but " + std::to_string(reports.size()) + " reports were given");
    }
    std::set<std::string> ids;
    for (const auto& p : corpus.prompts) {
        ids.insert(p.prompt_id);
    }
    std::set<std::string> seen;
    for (const auto& r : reports) {
        if (ids.count(r.prompt_id) == 0) {
            throw DataError("report for '" + r.prompt_id + "' is not in corpus '" + corpus.name + "'");
        }
        if (!seen.insert(r.prompt_id).second) {
            throw DataError("duplicate report for '" + r.prompt_id + "'");
        }
    }
}

double flagged_fraction(const Corpus& corpus, const std::vector<DetectionReport>& reports) {
    check_coverage(corpus, reports);
    if (reports.empty()) {
        throw DataError("corpus '" + corpus.name + "' is empty");
    }
    const auto hits = std::count_if(reports.begin(), reports.end(), [](const DetectionReport& r) {
        return r.decision == Decision::Jailbreak;
    });
    return static_cast<double>(hits) / static_cast<double>(reports.size());
}

bool detected_within(const DetectionReport& r, std::size_t budget) {
    const auto q = r.queries_to_witness();
    return r.decision == Decision::Jailbreak && q && *q <= budget;
}

}  // namespace

CorpusFormat parse_corpus_format(std::string_view name) {
    const auto n = lower(name);
    if (n == "advbench_csv" || n == "csv") {
        return CorpusFormat::AdvbenchCsv;
    }
    if (n == "jbb_jsonl" || n == "jsonl") {
        return CorpusFormat::JbbJsonl;
    }
    if (n == "plain_txt" || n == "txt") {
        return CorpusFormat::PlainTxt;
    }
    throw DataError("unknown corpus format '" + std::string(name) + "'");
}

std::string_view corpus_kind_name(CorpusKind kind) {
    return kind == CorpusKind::Jailbreak ? "jailbreak" : "benign";
}

void Corpus::validate() const {
    if (prompts.empty()) {
        throw DataError("empty corpus '" + name + "'");
    }
    std::set<std::string> ids;
    for (const auto& p : prompts) {
        if (!ids.insert(p.prompt_id).second) {
            throw DataError("corpus '" + name + "': duplicate prompt id '" + p.prompt_id + "'");
        }
        if (kind == CorpusKind::Jailbreak && !p.source_tag.is_attack()) {
            throw DataError("corpus '" + name + "': prompt '" + p.prompt_id + "' has no attack tag");
        }
    }
}

std::vector<std::vector<std::string>> parse_csv(std::string_view content) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < content.size(); ++i) {
        const char c = content[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < content.size() && content[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        any = true;
        if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') {
                ++i;
            }
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
            any = false;
        } else {
            field += c;
        }
    }
    if (quoted) {
        throw DataError("CSV ends inside a quoted field");
    }
    if (any || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<CorpusRow> parse_corpus_rows(std::string_view content, CorpusFormat format) {
    switch (format) {
        case CorpusFormat::AdvbenchCsv:
            return csv_rows(content);
        case CorpusFormat::JbbJsonl:
            return jsonl_rows(content);
        case CorpusFormat::PlainTxt:
            return text_rows(content);
    }
    return {};
}

Corpus make_corpus(std::string name, CorpusKind kind, const std::vector<CorpusRow>& rows,
                   Backend& backend, const CorpusOptions& options) {
    Corpus corpus;
    corpus.name = std::move(name);
    corpus.kind = kind;
    if (rows.empty()) {
        throw DataError("empty corpus '" + corpus.name + "'");
    }
    corpus.prompts.resize(rows.size());
    const auto errors = parallel_for(rows.size(), options.jobs, [&](std::size_t i) {
        const auto& row = rows[i];
        SourceTag tag;
        if (!row.source.empty()) {
            tag = SourceTag::parse(row.source);
        } else if (options.attack_tag) {
            tag = *options.attack_tag;
        } else if (kind == CorpusKind::Jailbreak) {
            tag = {SourceTag::Kind::Other, "unlabelled"};
        }
        auto id = row.id.empty() ? corpus.name + "-" + std::to_string(i + 1) : row.id;
        corpus.prompts[i] = make_prompt(backend, std::move(id), row.text, tag);
    });
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    corpus.validate();
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format, CorpusKind kind,
                   Backend& backend, const CorpusOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open corpus " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    std::vector<CorpusRow> rows;
    try {
        rows = parse_corpus_rows(ss.str(), format);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    auto name = options.name.empty() ? path.stem().string() : options.name;
    return make_corpus(std::move(name), kind, rows, backend, options);
}

double compute_dr(const Corpus& corpus, const std::vector<DetectionReport>& reports) {
    return flagged_fraction(corpus, reports);
}

double compute_fr(const Corpus& corpus, const std::vector<DetectionReport>& reports) {
    return flagged_fraction(corpus, reports);
}

std::vector<DetectionReport> run_corpus(const Corpus& corpus, const SearchConfig& config,
                                        Backend& backend, const EmbeddingMatrix* matrix,
                                        std::uint64_t global_seed, std::size_t jobs) {
    std::vector<DetectionReport> reports(corpus.prompts.size());
    const auto errors = parallel_for(corpus.prompts.size(), jobs, [&](std::size_t i) {
        const auto& p = corpus.prompts[i];
        auto cfg = config;
        cfg.rng_seed = derive_seed(global_seed, p.prompt_id);
        reports[i] = detect(p, cfg, backend, matrix);
    });
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return reports;
}

std::vector<CurvePoint> curve_from_reports(const std::vector<DetectionReport>& reports,
                                           const std::vector<std::size_t>& budgets) {
    if (reports.empty()) {
        throw DataError("no reports for the DR curve");
    }
    if (!std::is_sorted(budgets.begin(), budgets.end())) {
        throw DataError("curve budgets must be ascending");
    }
    std::vector<CurvePoint> curve;
    for (auto b : budgets) {
        for (const auto& r : reports) {
            if (r.budget != 0 && r.budget < b) {
                throw DataError("report for '" + r.prompt_id + "' ran at budget " +
                                std::to_string(r.budget) + ", below curve budget " + std::to_string(b));
            }
        }
        const auto hits = std::count_if(reports.begin(), reports.end(),
                                        [b](const DetectionReport& r) { return detected_within(r, b); });
        curve.push_back({b, static_cast<double>(hits) / static_cast<double>(reports.size())});
    }
    return curve;
}

std::vector<CurvePoint> dr_vs_budget(const std::vector<TokenizedPrompt>& prompts,
                                     const SearchConfig& config, Backend& backend,
                                     const EmbeddingMatrix* matrix,
                                     const std::vector<std::size_t>& budgets,
                                     std::uint64_t global_seed, std::size_t jobs) {
    if (budgets.empty() || budgets.front() < 1) {
        throw DataError("budgets must be non-empty and positive");
    }
    if (!std::is_sorted(budgets.begin(), budgets.end())) {
        throw DataError("curve budgets must be ascending");
    }
    Corpus corpus{"dr-curve", CorpusKind::Benign, prompts};
    auto cfg = config;
    cfg.budget = budgets.back();
    return curve_from_reports(run_corpus(corpus, cfg, backend, matrix, global_seed, jobs), budgets);
}

QueryStats query_stats(const std::vector<DetectionReport>& reports) {
    std::vector<std::size_t> q;
    for (const auto& r : reports) {
        if (r.decision == Decision::Jailbreak) {
            if (const auto n = r.queries_to_witness()) {
                q.push_back(*n);
            }
        }
    }
    QueryStats stats;
    if (q.empty()) {
        return stats;
    }
    std::sort(q.begin(), q.end());
    auto mean = [](auto b, auto e) {
        double s = 0.0;
        for (auto it = b; it != e; ++it) {
            s += static_cast<double>(*it);
        }
        return s / static_cast<double>(e - b);
    };
    stats.mean_to_witness = mean(q.begin(), q.end());
    // Integer ceiling of 0.9 * n.
    const std::size_t head = (q.size() * 9 + 9) / 10;
    stats.mean_to_90pct = mean(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(head));
    return stats;
}

std::string config_fingerprint(const SearchConfig& config) {
    auto j = to_json(config);
    j.erase("rng_seed");
    return hex64(fnv1a64(j.dump()));
}

json to_json(const MetricsReport& report) {
    json curve = json::array();
    for (const auto& p : report.dr_curve) {
        curve.push_back({{"budget", p.budget}, {"dr", p.dr}});
    }
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json prompts = json::array();
    for (const auto& p : report.prompts) {
        json jp = {{"corpus", p.corpus},
                   {"prompt_id", p.prompt_id},
                   {"source", p.source},
                   {"decision", decision_name(p.decision)},
                   {"queries_used", p.queries_used},
                   {"queries_to_witness",
                    p.queries_to_witness ? json(*p.queries_to_witness) : json(nullptr)},
                   {"would_block", p.would_block}};
        if (!p.error.empty()) {
            jp["error"] = p.error;
        }
        prompts.push_back(std::move(jp));
    }
    return {{"per_attack_dr", report.per_attack_dr},
            {"per_attack_count", report.per_attack_count},
            {"fr", report.fr},
            {"dr_curve", std::move(curve)},
            {"queries_stats",
             {{"mean_to_witness", opt(report.queries.mean_to_witness)},
              {"mean_to_90pct", opt(report.queries.mean_to_90pct)}}},
            {"budget", report.budget},
            {"seed", report.seed},
            {"config_fingerprint", report.config_fingerprint},
            {"errors", report.errors},
            {"prompts", std::move(prompts)}};
}

std::string format_table(const MetricsReport& report) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "budget " << report.budget << "  seed " << report.seed << "  config "
        << report.config_fingerprint << "\n";
    if (!report.per_attack_dr.empty()) {
        out << "\n" << std::left << std::setw(16) << "attack" << std::right << std::setw(8) << "n"
            << std::setw(8) << "DR" << "\n";
        for (const auto& [attack, dr] : report.per_attack_dr) {
            out << std::left << std::setw(16) << attack << std::right << std::setw(8)
                << report.per_attack_count.at(attack) << std::setw(8) << dr << "\n";
        }
    }
    if (!report.fr.empty()) {
        out << "\n" << std::left << std::setw(16) << "benign corpus" << std::right << std::setw(8)
            << "FR" << "\n";
        for (const auto& [name, fr] : report.fr) {
            out << std::left << std::setw(16) << name << std::right << std::setw(8) << fr << "\n";
        }
    }
    if (!report.dr_curve.empty()) {
        out << "\nDR by budget:";
        for (const auto& p : report.dr_curve) {
            out << "  " << p.budget << ":" << p.dr;
        }
        out << "\n";
    }
    if (report.queries.mean_to_witness) {
        out << "mean queries to witness " << *report.queries.mean_to_witness
            << ", fastest 90% " << *report.queries.mean_to_90pct << "\n";
    }
    if (report.errors > 0) {
        out << report.errors << " prompt(s) ended in backend errors\n";
    }
    return out.str();
}

MetricsReport evaluate(const std::vector<Corpus>& jailbreak, const std::vector<Corpus>& benign,
                       const SearchConfig& config, Backend& backend, const EmbeddingMatrix* matrix,
                       const EvalOptions& options) {
    if (jailbreak.empty() && benign.empty()) {
        throw DataError("eval needs at least one corpus");
    }
    config.validate();
    MetricsReport report;
    report.budget = config.budget;
    report.seed = options.global_seed;
    report.config_fingerprint = config_fingerprint(config);

    auto record = [&](const Corpus& c, const std::vector<DetectionReport>& reports) {
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const auto& r = reports[i];
            PromptOutcome o{c.name,
                            r.prompt_id,
                            c.prompts[i].source_tag.name(),
                            r.decision,
                            r.queries_used,
                            r.queries_to_witness(),
                            r.decision == Decision::Jailbreak,
                            r.error};
            if (r.decision == Decision::Error) {
                ++report.errors;
            }
            report.prompts.push_back(std::move(o));
        }
    };

    std::vector<DetectionReport> all_jailbreak;
    std::map<std::string, std::pair<std::size_t, std::size_t>> attack_hits;
    for (const auto& c : jailbreak) {
        if (c.kind != CorpusKind::Jailbreak) {
            throw DataError("corpus '" + c.name + "' is not a jailbreak corpus");
        }
        c.validate();
        const auto reports = run_corpus(c, config, backend, matrix, options.global_seed, options.jobs);
        compute_dr(c, reports);
        for (std::size_t i = 0; i < reports.size(); ++i) {
            auto& [hits, total] = attack_hits[c.prompts[i].source_tag.name()];
            ++total;
            hits += reports[i].decision == Decision::Jailbreak ? 1 : 0;
        }
        record(c, reports);
        all_jailbreak.insert(all_jailbreak.end(), reports.begin(), reports.end());
    }
    for (const auto& [attack, counts] : attack_hits) {
        report.per_attack_dr[attack] =
            static_cast<double>(counts.first) / static_cast<double>(counts.second);
        report.per_attack_count[attack] = counts.second;
    }
    for (const auto& c : benign) {
        c.validate();
        const auto reports = run_corpus(c, config, backend, matrix, options.global_seed, options.jobs);
        report.fr[c.name] = compute_fr(c, reports);
        record(c, reports);
    }
    if (!all_jailbreak.empty()) {
        std::vector<std::size_t> budgets;
        for (auto b : options.curve_budgets) {
            if (b >= 1 && b < config.budget) {
                budgets.push_back(b);
            }
        }
        std::sort(budgets.begin(), budgets.end());
        budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
        budgets.push_back(config.budget);
        report.dr_curve = curve_from_reports(all_jailbreak, budgets);
        report.queries = query_stats(all_jailbreak);
    }
    return report;
}

}  // namespace retrig
