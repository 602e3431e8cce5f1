#include "retrig/searcher.hpp"

#include <algorithm>
#include <cmath>

#include "retrig/errors.hpp"
#include "retrig/parallel.hpp"
#include "retrig/rng.hpp"

namespace retrig {

using nlohmann::json;

namespace {

constexpr double kCollapseWidth = 1e-6;

struct Candidate {
    DisruptionSpec disruption;
    SearchStage stage;
};

// Mutable state of one search. Every generation call goes through
// evaluate(), which is the only place the budget is charged.
class SearchRun {
public:
    SearchRun(const TokenizedPrompt& prompt, const SearchConfig& config, Backend& backend,
              const EmbeddingMatrix* matrix, std::size_t max_witnesses, std::size_t start_queries)
        : prompt_(prompt),
          config_(config),
          backend_(backend),
          matrix_(matrix),
          max_witnesses_(max_witnesses),
          queries_(start_queries),
          lo_(config.initial_lo),
          hi_(config.initial_hi) {
        config_.validate();
        if (prompt_.token_ids.empty()) {
            throw DataError("prompt '" + prompt_.prompt_id + "' has no tokens");
        }
        info_ = backend_.model_info();
        if (matrix_ != nullptr) {
            check_matrix_compatible(info_, *matrix_);
        }
        trace_.emplace_back(lo_, hi_);
    }

    bool done() const {
        return witnesses_.size() >= max_witnesses_ || queries_ >= config_.budget;
    }

    void run_guided() {
        std::vector<Candidate> grid;
        for (const auto& entry : config_.anchor_set.entries) {
            if (entry.token_id >= info_.vocab_size) {
                throw DataError("anchor token " + std::to_string(entry.token_id) +
                                " outside the model vocabulary");
            }
            for (float f : config_.fractions) {
                grid.push_back({DisruptionSpec::lerp_at(-1, entry.token_id, f), SearchStage::Guided});
            }
        }
        std::size_t next = 0;
        while (next < grid.size() && !done()) {
            const auto width = round_width();
            const auto end = std::min(grid.size(), next + width);
            std::vector<Candidate> batch(grid.begin() + static_cast<std::ptrdiff_t>(next),
                                         grid.begin() + static_cast<std::ptrdiff_t>(end));
            next = end;
            commit(batch, evaluate(batch));
        }
    }

    void run_random() {
        Rng rng(config_.rng_seed);
        const std::size_t len = prompt_.token_ids.size();
        while (!done()) {
            if (hi_ - lo_ < kCollapseWidth) {
                collapsed_ = true;
                break;
            }
            std::vector<Candidate> batch;
            const auto width = round_width();
            for (std::size_t i = 0; i < width; ++i) {
                const std::size_t pos =
                    rng.bernoulli(config_.last_token_probability) ? len - 1 : rng.index(len);
                const auto dim = static_cast<std::uint32_t>(rng.index(info_.embedding_dim));
                const auto delta =
                    std::clamp(static_cast<float>(rng.uniform(lo_, hi_)), static_cast<float>(lo_),
                               static_cast<float>(hi_));
                batch.push_back({DisruptionSpec::scalar_at(static_cast<std::int64_t>(pos), dim, delta),
                                 SearchStage::Random});
            }
            commit(batch, evaluate(batch), /*narrow=*/true);
        }
    }

    void run_sweep() {
        const std::size_t len = prompt_.token_ids.size();
        const auto n = static_cast<std::size_t>(
                           std::floor((config_.initial_hi - config_.initial_lo) / config_.sweep_step +
                                      1e-9)) +
                       1;
        std::size_t i = 0;
        while (i < n && !done()) {
            const auto width = std::min(round_width(), n - i);
            std::vector<Candidate> batch;
            for (std::size_t k = 0; k < width; ++k, ++i) {
                const double v = config_.initial_lo + static_cast<double>(i) * config_.sweep_step;
                const auto delta = static_cast<float>(std::round(v * 1e9) / 1e9);
                batch.push_back({DisruptionSpec::scalar_at(static_cast<std::int64_t>(len - 1), 0, delta),
                                 SearchStage::Sweep});
            }
            commit(batch, evaluate(batch));
        }
    }

    std::size_t queries() const { return queries_; }
    const std::vector<Witness>& witnesses() const { return witnesses_; }
    std::vector<Witness> take_witnesses() { return std::move(witnesses_); }
    const std::vector<Interval>& trace() const { return trace_; }

private:
    std::size_t round_width() const {
        return std::max<std::size_t>(
            1, std::min({config_.speculative_width, config_.budget - queries_, info_.max_concurrency}));
    }

    std::vector<Verdict> evaluate(const std::vector<Candidate>& batch) {
        std::vector<Verdict> verdicts(batch.size());
        const auto errors = parallel_for(batch.size(), batch.size(), [&](std::size_t i) {
            const auto out = backend_.generate(prompt_, {batch[i].disruption},
                                               config_.max_new_tokens, 0);
            verdicts[i] = classify_response(out.text, config_.classifier);
        });
        queries_ += batch.size();
        for (const auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
        return verdicts;
    }

    void commit(const std::vector<Candidate>& batch, const std::vector<Verdict>& verdicts,
                bool narrow = false) {
        const std::size_t base = queries_ - batch.size();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (witnesses_.size() >= max_witnesses_) {
                return;
            }
            const auto& c = batch[i];
            if (verdicts[i] == Verdict::Denial) {
                add_witness(c, base + i + 1);
            } else if (narrow && verdicts[i] == Verdict::Gibberish) {
                const double d = c.disruption.scalar().delta;
                const auto before = std::make_pair(lo_, hi_);
                if (d > 0.0) {
                    hi_ = std::min(hi_, d);
                } else if (d < 0.0) {
                    lo_ = std::max(lo_, d);
                }
                if (std::make_pair(lo_, hi_) != before) {
                    trace_.emplace_back(lo_, hi_);
                }
            }
        }
    }

    void add_witness(const Candidate& c, std::size_t query_index) {
        const bool seen = std::any_of(witnesses_.begin(), witnesses_.end(), [&](const Witness& w) {
            return w.disruption == c.disruption;
        });
        if (seen) {
            return;
        }
        Witness w;
        w.disruption = c.disruption;
        w.stage = c.stage;
        w.query_index = query_index;
        const auto pos = resolve_position(c.disruption.position, prompt_.token_ids.size());
        w.original_token_id = prompt_.token_ids[pos];
        if (matrix_ != nullptr && c.disruption.layer_index == 0) {
            w.disrupted_embedding = disrupted_embedding(*matrix_, prompt_, c.disruption);
        }
        witnesses_.push_back(std::move(w));
    }

    const TokenizedPrompt& prompt_;
    const SearchConfig& config_;
    Backend& backend_;
    const EmbeddingMatrix* matrix_;
    std::size_t max_witnesses_;
    std::size_t queries_;
    ModelInfo info_;
    double lo_;
    double hi_;
    bool collapsed_ = false;
    std::vector<Interval> trace_;
    std::vector<Witness> witnesses_;
};

DetectionReport make_report(const TokenizedPrompt& prompt, const SearchConfig& config) {
    DetectionReport r;
    r.prompt_id = prompt.prompt_id;
    r.seed = config.rng_seed;
    r.budget = config.budget;
    return r;
}

}  // namespace

void SearchConfig::validate() const {
    if (budget < 1) {
        throw DataError("search budget must be at least 1");
    }
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (!(fractions[i] > 0.0f && fractions[i] <= 1.0f)) {
            throw DataError("fractions must lie in (0, 1]");
        }
        if (i > 0 && !(fractions[i - 1] < fractions[i])) {
            throw DataError("fractions must be strictly increasing");
        }
    }
    if (!(initial_lo < initial_hi)) {
        throw DataError("initial interval needs lo < hi");
    }
    if (!(last_token_probability >= 0.0 && last_token_probability <= 1.0)) {
        throw DataError("last_token_probability must lie in [0, 1]");
    }
    if (!(sweep_step > 0.0)) {
        throw DataError("sweep_step must be positive");
    }
    classifier.validate();
}

json to_json(const SearchConfig& config) {
    return {{"budget", config.budget},
            {"fractions", config.fractions},
            {"initial_interval", {config.initial_lo, config.initial_hi}},
            {"last_token_probability", config.last_token_probability},
            {"rng_seed", config.rng_seed},
            {"anchor_set", to_json(config.anchor_set)},
            {"classifier", to_json(config.classifier)},
            {"max_new_tokens", config.max_new_tokens},
            {"speculative_width", config.speculative_width},
            {"sweep_step", config.sweep_step}};
}

SearchConfig search_config_from_json(const json& j) {
    SearchConfig c;
    try {
        c.budget = j.value("budget", c.budget);
        if (j.contains("fractions")) {
            c.fractions = j.at("fractions").get<std::vector<float>>();
        }
        if (j.contains("initial_interval")) {
            const auto& iv = j.at("initial_interval");
            c.initial_lo = iv.at(0).get<double>();
            c.initial_hi = iv.at(1).get<double>();
        }
        c.last_token_probability = j.value("last_token_probability", c.last_token_probability);
        c.rng_seed = j.value("rng_seed", c.rng_seed);
        c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
        c.speculative_width = j.value("speculative_width", c.speculative_width);
        c.sweep_step = j.value("sweep_step", c.sweep_step);
        if (j.contains("anchor_set")) {
            c.anchor_set = anchor_set_from_json(j.at("anchor_set"));
        }
        if (j.contains("classifier")) {
            c.classifier = classifier_config_from_json(j.at("classifier"));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed search config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string_view decision_name(Decision d) {
    switch (d) {
        case Decision::Jailbreak:
            return "jailbreak";
        case Decision::Benign:
            return "benign";
        case Decision::Error:
            return "error";
    }
    return "error";
}

Decision parse_decision(std::string_view name) {
    if (name == "jailbreak") {
        return Decision::Jailbreak;
    }
    if (name == "benign") {
        return Decision::Benign;
    }
    if (name == "error") {
        return Decision::Error;
    }
    throw DataError("unknown decision '" + std::string(name) + "'");
}

std::optional<std::size_t> DetectionReport::queries_to_witness() const {
    if (witnesses.empty()) {
        return std::nullopt;
    }
    return witnesses.front().query_index;
}

json to_json(const DetectionReport& report) {
    json ws = json::array();
    for (const auto& w : report.witnesses) {
        ws.push_back(to_json(w));
    }
    json trace = json::array();
    for (const auto& [lo, hi] : report.interval_trace) {
        trace.push_back({lo, hi});
    }
    json j = {{"prompt_id", report.prompt_id},
              {"decision", decision_name(report.decision)},
              {"witnesses", std::move(ws)},
              {"queries_used", report.queries_used},
              {"budget", report.budget},
              {"interval_trace", std::move(trace)},
              {"seed", report.seed}};
    if (!report.error.empty()) {
        j["error"] = report.error;
    }
    return j;
}

DetectionReport detection_report_from_json(const json& j) {
    DetectionReport r;
    try {
        r.prompt_id = j.at("prompt_id").get<std::string>();
        r.decision = parse_decision(j.at("decision").get<std::string>());
        for (const auto& w : j.at("witnesses")) {
            r.witnesses.push_back(witness_from_json(w));
        }
        r.queries_used = j.at("queries_used").get<std::size_t>();
        r.budget = j.value("budget", std::size_t{0});
        for (const auto& iv : j.value("interval_trace", json::array())) {
            r.interval_trace.emplace_back(iv.at(0).get<double>(), iv.at(1).get<double>());
        }
        r.seed = j.value("seed", std::uint64_t{0});
        r.error = j.value("error", std::string{});
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed detection report: ") + e.what());
    }
    return r;
}

std::vector<float> disrupted_embedding(const EmbeddingMatrix& matrix, const TokenizedPrompt& prompt,
                                       const DisruptionSpec& disruption) {
    if (disruption.layer_index != 0) {
        throw DataError("only layer-0 disruptions have an embedding");
    }
    const auto pos = resolve_position(disruption.position, prompt.token_ids.size());
    const TokenId original = prompt.token_ids[pos];
    if (disruption.is_anchor_lerp()) {
        const auto& a = disruption.anchor_lerp();
        return interpolate(matrix, original, a.anchor_token_id, a.fraction);
    }
    const auto row = matrix.row(original);
    std::vector<float> out(row.begin(), row.end());
    const auto& s = disruption.scalar();
    if (s.dim >= out.size()) {
        throw InvalidDisruption("dim out of range");
    }
    out[s.dim] += s.delta;
    return out;
}

GuidedOutcome guided_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                            Backend& backend, const EmbeddingMatrix* matrix) {
    if (config.anchor_set.entries.empty()) {
        throw DataError("guided search needs a non-empty anchor set");
    }
    SearchRun run(prompt, config, backend, matrix, 1, 0);
    run.run_guided();
    GuidedOutcome out;
    out.queries_spent = run.queries();
    if (!run.witnesses().empty()) {
        out.witness = run.witnesses().front();
    }
    return out;
}

RandomOutcome random_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                            Backend& backend, std::size_t start_queries,
                            const EmbeddingMatrix* matrix) {
    if (start_queries >= config.budget) {
        throw DataError("random search needs at least one call of remaining budget");
    }
    SearchRun run(prompt, config, backend, matrix, 1, start_queries);
    run.run_random();
    RandomOutcome out;
    out.queries_spent = run.queries();
    out.interval_trace = run.trace();
    if (!run.witnesses().empty()) {
        out.witness = run.witnesses().front();
    }
    return out;
}

DetectionReport detect(const TokenizedPrompt& prompt, const SearchConfig& config, Backend& backend,
                       const EmbeddingMatrix* matrix) {
    auto report = make_report(prompt, config);
    std::optional<SearchRun> run;
    try {
        run.emplace(prompt, config, backend, matrix, 1, 0);
        run->run_guided();
        run->run_random();
        report.queries_used = run->queries();
        report.interval_trace = run->trace();
        report.witnesses = run->take_witnesses();
        report.decision = report.witnesses.empty() ? Decision::Benign : Decision::Jailbreak;
    } catch (const std::exception& e) {
        report.decision = Decision::Error;
        report.error = e.what();
        if (run) {
            report.queries_used = run->queries();
            report.interval_trace = run->trace();
        }
    }
    return report;
}

std::vector<Witness> collect_witnesses(const TokenizedPrompt& prompt, const SearchConfig& config,
                                       Backend& backend, const EmbeddingMatrix* matrix,
                                       std::size_t m) {
    if (m < 1) {
        throw DataError("collect_witnesses needs m >= 1");
    }
    SearchRun run(prompt, config, backend, matrix, m, 0);
    run.run_guided();
    run.run_random();
    return run.take_witnesses();
}

DetectionReport sweep_search(const TokenizedPrompt& prompt, const SearchConfig& config,
                             Backend& backend, const EmbeddingMatrix* matrix) {
    auto report = make_report(prompt, config);
    std::optional<SearchRun> run;
    try {
        run.emplace(prompt, config, backend, matrix, 1, 0);
        run->run_sweep();
        report.queries_used = run->queries();
        report.witnesses = run->take_witnesses();
        report.decision = report.witnesses.empty() ? Decision::Benign : Decision::Jailbreak;
    } catch (const std::exception& e) {
        report.decision = Decision::Error;
        report.error = e.what();
        if (run) {
            report.queries_used = run->queries();
        }
    }
    return report;
}

Verdict replay_witness(const TokenizedPrompt& prompt, const Witness& witness, Backend& backend,
                       const ClassifierConfig& classifier, std::size_t max_new_tokens) {
    const auto out = backend.generate(prompt, {witness.disruption}, max_new_tokens, 0);
    return classify_response(out.text, classifier);
}

}  // namespace retrig
