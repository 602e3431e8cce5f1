#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "retrig/anchors.hpp"
#include "retrig/backend_factory.hpp"
#include "retrig/classifier.hpp"
#include "retrig/errors.hpp"
#include "retrig/evalharness.hpp"
#include "retrig/guard_service.hpp"
#include "retrig/http_backend.hpp"
#include "retrig/matrix_import.hpp"
#include "retrig/rng.hpp"
#include "retrig/scanner.hpp"
#include "retrig/searcher.hpp"
#include "retrig/simlab.hpp"
#include "retrig/suite.hpp"
#include "retrig/transfer.hpp"

namespace retrig::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    std::string backend;
    std::string matrix;
    std::string vocab;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string classifier;
};

struct Context {
    Globals g;
    std::ostream& out;
    std::ostream& err;

    // The matrix is loaded at most once per invocation.
    std::optional<EmbeddingMatrix> matrix_cache;
    std::unique_ptr<Backend> backend_cache;

    const EmbeddingMatrix* matrix() {
        if (g.matrix.empty()) {
            return nullptr;
        }
        if (!matrix_cache) {
            const fs::path path(g.matrix);
            const fs::path vocab = g.vocab.empty() ? vocab_path_for(path) : fs::path(g.vocab);
            matrix_cache = fs::exists(vocab) ? load_matrix(path, vocab) : load_matrix(path);
        }
        return &*matrix_cache;
    }

    const EmbeddingMatrix& require_matrix(std::string_view why) {
        const auto* m = matrix();
        if (m == nullptr) {
            throw DataError(std::string(why) + " needs --matrix");
        }
        return *m;
    }

    Backend& backend() {
        if (!backend_cache) {
            if (g.backend.empty()) {
                throw DataError("--backend is required (URL or sim:<bundle>)");
            }
            backend_cache = open_backend(g.backend, matrix());
        }
        return *backend_cache;
    }

    ClassifierConfig classifier() const {
        return g.classifier.empty() ? ClassifierConfig{} : load_classifier_config(g.classifier);
    }

    std::uint64_t seed_or(std::uint64_t fallback) {
        const auto s = g.seed.value_or(fallback);
        err << "seed: " << s << "\n";
        return s;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    f << text;
}

void emit(Context& ctx, const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        ctx.out << text;
    } else {
        write_text(path, text);
    }
}

CorpusFormat guess_format(const std::string& path, const std::string& explicit_format) {
    if (!explicit_format.empty()) {
        return parse_corpus_format(explicit_format);
    }
    const auto ext = fs::path(path).extension().string();
    if (ext == ".csv") {
        return CorpusFormat::AdvbenchCsv;
    }
    if (ext == ".jsonl") {
        return CorpusFormat::JbbJsonl;
    }
    return CorpusFormat::PlainTxt;
}

// Prompt from --prompt, or every prompt of --corpus.
struct PromptInput {
    std::string text;
    std::string id = "prompt";
    std::string corpus;
    std::string format;
    std::string attack;

    void add_to(CLI::App* app, bool allow_corpus = true) {
        app->add_option("--prompt", text, "Prompt text");
        app->add_option("--prompt-id", id, "Prompt id for --prompt")->capture_default_str();
        if (allow_corpus) {
            app->add_option("--corpus", corpus, "Corpus file instead of --prompt");
            app->add_option("--format", format,
                            "Corpus format: advbench_csv, jbb_jsonl, plain_txt (default: by extension)");
            app->add_option("--attack", attack, "Attack tag for corpus rows without one");
        }
    }

    std::vector<TokenizedPrompt> load(Context& ctx, CorpusKind kind = CorpusKind::Benign) const {
        if (!text.empty() && !corpus.empty()) {
            throw CLI::ValidationError("--prompt and --corpus are mutually exclusive");
        }
        if (!text.empty()) {
            return {make_prompt(ctx.backend(), id, text)};
        }
        if (corpus.empty()) {
            throw CLI::ValidationError("give --prompt or --corpus");
        }
        CorpusOptions opts;
        opts.jobs = ctx.g.jobs;
        if (!attack.empty()) {
            opts.attack_tag = SourceTag::parse(attack);
        }
        return load_corpus(corpus, guess_format(corpus, format), kind, ctx.backend(), opts).prompts;
    }
};

struct PlanFlags {
    std::string interval = "-30:30";
    double step = 0.05;
    std::uint32_t layer = 0;
    std::string tokens = "last";
    std::string dims = "0";
    bool joint = false;

    void add_to(CLI::App* app) {
        app->add_option("--interval", interval, "Strength range lo:hi")->capture_default_str();
        app->add_option("--step", step, "Strength step")->capture_default_str();
        app->add_option("--layer", layer, "0 = token embeddings, L > 0 = input of layer L")
            ->capture_default_str();
        app->add_option("--tokens", tokens,
                        "Token strategy: last | random:N[:SEED] | harmful:P,.. | fictitious:P,.. | "
                        "explicit:P,..")
            ->capture_default_str();
        app->add_option("--dims", dims, "Dims: 0,3,.. | random:K[:SEED]")->capture_default_str();
        app->add_flag("--joint-dims", joint, "Apply each delta to all chosen dims at once");
    }

    ScanPlan plan() const {
        ScanPlan p;
        std::tie(p.lo, p.hi) = parse_interval(interval);
        p.step = step;
        p.layer_index = layer;
        p.token_strategy = TokenStrategy::parse(tokens);
        p.dims = DimChoice::parse(dims);
        p.joint_dims = joint;
        p.validate();
        return p;
    }
};

struct SearchFlags {
    std::size_t budget = 50;
    std::size_t width = 1;
    std::size_t max_new_tokens = kDefaultMaxNewTokens;
    std::string interval = "-30:30";
    std::string anchors;

    void add_to(CLI::App* app) {
        app->add_option("--budget", budget, "Generation calls per prompt")->capture_default_str();
        app->add_option("--width", width, "Candidates evaluated concurrently per round")
            ->capture_default_str();
        app->add_option("--max-new-tokens", max_new_tokens, "Generation length")->capture_default_str();
        app->add_option("--interval", interval, "Initial strength range lo:hi")->capture_default_str();
        app->add_option("--anchors", anchors, "Anchor set JSON; without it the guided stage is skipped");
    }

    SearchConfig config(Context& ctx) const {
        SearchConfig c;
        c.budget = budget;
        c.speculative_width = width;
        c.max_new_tokens = max_new_tokens;
        std::tie(c.initial_lo, c.initial_hi) = parse_interval(interval);
        if (!anchors.empty()) {
            c.anchor_set = load_anchor_set(anchors);
        }
        c.classifier = ctx.classifier();
        c.validate();
        return c;
    }
};

std::string sweep_label(const ScanRecord& r) {
    std::string dims;
    for (const auto& d : r.disruptions) {
        if (!dims.empty()) {
            dims += '+';
        }
        dims += std::to_string(d.scalar().dim);
    }
    return "p" + std::to_string(r.position()) + "_d" + dims + "_l" +
           std::to_string(r.disruption().layer_index);
}

std::string safe_name(std::string s) {
    for (auto& c : s) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') {
            c = '_';
        }
    }
    return s;
}

int run_scan(Context& ctx, const PromptInput& input, const PlanFlags& flags, const std::string& out_dir,
             const std::string& log_path) {
    const auto plan = flags.plan();
    const auto prompts = input.load(ctx);
    const auto classifier = ctx.classifier();
    ctx.seed_or(plan.token_strategy.random_seed);
    std::vector<ScanRecord> log;
    bool failed = false;
    for (const auto& p : prompts) {
        auto result = brute_scan(p, plan, ctx.backend(), classifier, ctx.g.jobs);
        for (const auto& sweep : split_sweeps(result.records)) {
            const auto csv = export_strip(sweep);
            if (out_dir.empty()) {
                ctx.out << "# prompt=" << p.prompt_id << " " << sweep_label(sweep.front()) << "\n" << csv;
            } else {
                write_text(fs::path(out_dir) / (safe_name(p.prompt_id) + "_" + sweep_label(sweep.front()) + ".csv"),
                           csv);
            }
        }
        log.insert(log.end(), result.records.begin(), result.records.end());
        if (!result.complete) {
            ctx.err << "scan of '" << p.prompt_id << "' aborted: " << result.error << "\n";
            failed = true;
            break;
        }
    }
    if (!log_path.empty()) {
        write_text(log_path, to_jsonl(log));
    }
    return failed ? kBackendError : kOk;
}

int run_detect(Context& ctx, const PromptInput& input, const SearchFlags& flags, const std::string& out_path) {
    auto config = flags.config(ctx);
    const auto* matrix = ctx.matrix();
    if (!input.text.empty() && input.corpus.empty()) {
        const auto prompt = input.load(ctx).front();
        config.rng_seed = ctx.seed_or(derive_seed(0, prompt.text));
        const auto report = detect(prompt, config, ctx.backend(), matrix);
        emit(ctx, out_path, to_json(report).dump(2) + "\n");
        ctx.err << "decision: " << decision_name(report.decision) << "\n";
        switch (report.decision) {
            case Decision::Jailbreak:
                return kJailbreakFound;
            case Decision::Benign:
                return kOk;
            case Decision::Error:
                ctx.err << "error: " << report.error << "\n";
                return kBackendError;
        }
    }
    const Corpus corpus{"cli", CorpusKind::Benign, input.load(ctx)};
    const auto global = ctx.seed_or(0);
    const auto reports = run_corpus(corpus, config, ctx.backend(), matrix, global, ctx.g.jobs);
    std::string lines;
    std::size_t errors = 0;
    for (const auto& r : reports) {
        lines += to_json(r).dump() + "\n";
        errors += r.decision == Decision::Error ? 1 : 0;
    }
    emit(ctx, out_path, lines);
    return errors > 0 ? kBackendError : kOk;
}

int run_find_anchors(Context& ctx, const PromptInput& input, const PlanFlags& flags,
                     const std::string& scan_log, double coverage, std::size_t min_cases,
                     const std::string& metric, const std::string& out_path, const std::string& log_out) {
    const auto& matrix = ctx.require_matrix("find-anchors");
    AnchorOptions opts;
    opts.coverage_threshold = coverage;
    opts.min_cases = min_cases;
    opts.metric = parse_metric(metric);
    AnchorSet anchors;
    if (!scan_log.empty()) {
        const auto records = load_scan_log(scan_log);
        anchors = identify_anchors(witnesses_from_scan(records, matrix), matrix, opts);
    } else {
        const auto plan = flags.plan();
        ctx.seed_or(plan.token_strategy.random_seed);
        const auto prompts = input.load(ctx, CorpusKind::Jailbreak);
        auto result = bootstrap_anchors(prompts, ctx.backend(), matrix, plan, ctx.classifier(), opts,
                                        ctx.g.jobs);
        if (!log_out.empty()) {
            write_text(log_out, to_jsonl(result.scan_log));
        }
        anchors = std::move(result.anchors);
    }
    emit(ctx, out_path, to_json(anchors).dump(1) + "\n");
    return kOk;
}

struct TransferFlags {
    std::size_t m = 8;
    std::size_t k = 4;
    std::string target;
    std::string target_model;
    std::size_t target_concurrency = 4;
    bool self = false;
    std::string candidates_out;
    std::string metric = "cosine";
};

int run_transfer(Context& ctx, const PromptInput& input, const SearchFlags& sflags,
                 const TransferFlags& t, const std::string& out_path) {
    if (t.target.empty() == !t.self) {
        throw CLI::ValidationError("give exactly one of --target URL or --self");
    }
    const auto& matrix = ctx.require_matrix("transfer");
    auto config = sflags.config(ctx);
    const auto prompt = input.load(ctx).front();
    config.rng_seed = ctx.seed_or(derive_seed(0, prompt.text));
    const auto witnesses = collect_witnesses(prompt, config, ctx.backend(), &matrix, t.m);
    CandidateStats stats;
    const auto candidates =
        build_candidates(prompt, witnesses, matrix, t.k, &stats, parse_metric(t.metric));
    if (!t.candidates_out.empty()) {
        write_text(t.candidates_out, candidates_to_jsonl(candidates));
    }
    json summary = {{"prompt_id", prompt.prompt_id},
                    {"seed", config.rng_seed},
                    {"witnesses", witnesses.size()},
                    {"candidates", candidates.size()},
                    {"dropped_identical", stats.dropped_identical},
                    {"dropped_duplicates", stats.dropped_duplicates}};
    if (candidates.empty()) {
        summary["decision"] = "benign";
        summary["first_denying_candidate"] = nullptr;
        emit(ctx, out_path, summary.dump(2) + "\n");
        return kOk;
    }
    std::unique_ptr<TargetClient> client;
    if (t.self) {
        client = std::make_unique<BackendTarget>(ctx.backend(), config.max_new_tokens);
    } else {
        ChatCompletionsTarget::Options opts;
        opts.endpoint = t.target;
        opts.model = t.target_model;
        opts.max_concurrent = t.target_concurrency;
        opts.max_tokens = config.max_new_tokens;
        client = std::make_unique<ChatCompletionsTarget>(opts);
    }
    const auto probe = probe_target(candidates, *client, config.classifier, ctx.g.jobs);
    summary["decision"] = probe_decision_name(probe.decision);
    summary["first_denying_candidate"] =
        probe.first_denying_candidate ? json(*probe.first_denying_candidate) : json(nullptr);
    summary["probes_issued"] = probe.probes_issued;
    summary["probe_failures"] = probe.failures;
    emit(ctx, out_path, summary.dump(2) + "\n");
    return probe.decision == ProbeResult::Decision::Error ? kBackendError : kOk;
}

struct EvalFlags {
    std::vector<std::string> jailbreak;
    std::vector<std::string> benign;
    std::string format;
    std::string attack;
    std::vector<std::size_t> curve = {1, 2, 4, 8, 16, 32, 50};
    std::string out;
    bool json_stdout = false;
};

int run_eval(Context& ctx, const SearchFlags& sflags, const EvalFlags& e) {
    if (e.jailbreak.empty() && e.benign.empty()) {
        throw CLI::ValidationError("give --jailbreak-corpus and/or --benign-corpus");
    }
    const auto config = sflags.config(ctx);
    const auto seed = ctx.seed_or(0);
    CorpusOptions opts;
    opts.jobs = ctx.g.jobs;
    if (!e.attack.empty()) {
        opts.attack_tag = SourceTag::parse(e.attack);
    }
    std::vector<Corpus> jb, bn;
    for (const auto& p : e.jailbreak) {
        jb.push_back(load_corpus(p, guess_format(p, e.format), CorpusKind::Jailbreak, ctx.backend(), opts));
    }
    CorpusOptions benign_opts;
    benign_opts.jobs = ctx.g.jobs;
    for (const auto& p : e.benign) {
        bn.push_back(load_corpus(p, guess_format(p, e.format), CorpusKind::Benign, ctx.backend(), benign_opts));
    }
    EvalOptions eo;
    eo.global_seed = seed;
    eo.jobs = ctx.g.jobs;
    eo.curve_budgets = e.curve;
    const auto report = evaluate(jb, bn, config, ctx.backend(), ctx.matrix(), eo);
    const auto body = to_json(report).dump(1) + "\n";
    if (!e.out.empty()) {
        write_text(e.out, body);
    }
    ctx.out << (e.json_stdout ? body : format_table(report));
    return kOk;
}

std::atomic<GuardService*> g_guard{nullptr};
std::atomic<BackendServer*> g_server{nullptr};

void on_signal(int) {
    if (auto* s = g_guard.load()) {
        s->stop();
    }
    if (auto* s = g_server.load()) {
        s->stop();
    }
}

int run_serve(Context& ctx, const std::string& config_path, int port_override) {
    auto config = load_guard_config(config_path);
    if (port_override >= 0) {
        config.port = port_override;
    }
    if (!ctx.g.classifier.empty()) {
        config.search.classifier = ctx.classifier();
    }
    std::optional<EmbeddingMatrix> matrix;
    if (!config.matrix.empty()) {
        const auto vocab = vocab_path_for(config.matrix);
        matrix = fs::exists(vocab) ? load_matrix(config.matrix, vocab) : load_matrix(config.matrix);
    }
    auto backend = open_backend(config.backend, matrix ? &*matrix : nullptr, config.request_timeout);
    const auto info = backend->model_info();
    if (matrix) {
        check_matrix_compatible(info, *matrix);
    }
    GuardService service(config, *backend, matrix ? &*matrix : nullptr);
    ctx.err << "guard listening on " << config.host << ":" << config.port << " (backend "
            << info.model_id << ", seed " << config.search.rng_seed << ")\n";
    g_guard = &service;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    service.listen();
    g_guard = nullptr;
    return kOk;
}

int run_sim_serve(Context& ctx, const std::string& bundle_path, const std::string& host, int port) {
    auto backend = open_backend("sim:" + bundle_path, ctx.matrix());
    BackendServer server(*backend);
    ctx.err << "simulated backend on " << host << ":" << port << "\n";
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.listen(host, port);
    g_server = nullptr;
    return kOk;
}

int run_matrix_import(Context& ctx, const std::string& from, const std::string& vocab,
                      const std::string& model_id, const std::string& out) {
    const auto matrix = import_matrix(from, model_id, vocab);
    write_matrix(matrix, out);
    write_vocab(matrix.token_strings(), vocab_path_for(out));
    ctx.out << "wrote " << out << " (" << matrix.vocab_size() << " x " << matrix.dim() << ")\n";
    return kOk;
}

int run_matrix_inspect(Context& ctx, const std::string& path, std::optional<TokenId> nearest,
                       std::size_t k, const std::string& metric) {
    const fs::path p(path);
    const auto vocab = vocab_path_for(p);
    const auto matrix = fs::exists(vocab) ? load_matrix(p, vocab) : load_matrix(p);
    double min_norm = INFINITY, max_norm = 0.0, sum = 0.0;
    for (TokenId t = 0; t < matrix.vocab_size(); ++t) {
        const double n = matrix.row_norm(t);
        min_norm = std::min(min_norm, n);
        max_norm = std::max(max_norm, n);
        sum += n;
    }
    json info = {{"model_id", matrix.model_id()},
                 {"vocab_size", matrix.vocab_size()},
                 {"dim", matrix.dim()},
                 {"vocab_file", fs::exists(vocab) ? vocab.string() : ""},
                 {"row_norm", {{"min", min_norm}, {"max", max_norm},
                               {"mean", sum / static_cast<double>(matrix.vocab_size())}}}};
    if (nearest) {
        json list = json::array();
        for (const auto& m : emb2token(matrix, matrix.row(*nearest), k, parse_metric(metric))) {
            list.push_back({{"token_id", m.token_id}, {"token", m.token_string}, {"similarity", m.similarity}});
        }
        info["nearest"] = std::move(list);
    }
    ctx.out << info.dump(2) << "\n";
    return kOk;
}

int run_plant(Context& ctx, const std::string& out_dir, std::size_t jailbreak, std::size_t benign,
              double coupled, std::size_t vocab_size, std::size_t dim) {
    const auto seed = ctx.seed_or(0);
    simlab::SuiteOptions opts;
    opts.jailbreak = jailbreak;
    opts.benign = benign;
    opts.coupled_fraction = coupled;
    opts.world.vocab_size = vocab_size;
    opts.world.dim = dim;
    const auto suite = simlab::make_suite(seed, opts);
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_matrix(suite.world.matrix, dir / "world.embf");
    write_vocab(suite.world.matrix.token_strings(), vocab_path_for(dir / "world.embf"));
    simlab::write_sim_bundle({suite.world.model, suite.landscapes}, dir / "bundle.json");
    write_anchor_set(suite.anchors, dir / "anchors.json");
    auto jsonl = [](const std::vector<TokenizedPrompt>& prompts) {
        std::string s;
        for (const auto& p : prompts) {
            s += json{{"prompt_id", p.prompt_id}, {"prompt", p.text}, {"source", p.source_tag.name()}}.dump() +
                 "\n";
        }
        return s;
    };
    if (!suite.jailbreak.empty()) {
        write_text(dir / "jailbreak.jsonl", jsonl(suite.jailbreak));
    }
    if (!suite.benign.empty()) {
        write_text(dir / "benign.jsonl", jsonl(suite.benign));
    }
    ctx.out << "planted " << jailbreak << " jailbreak and " << benign << " benign prompts in " << out_dir
            << "\n";
    return kOk;
}

// "--interval -30:30" would otherwise read "-30:30" as a short flag.
std::vector<std::string> glue_interval_values(std::vector<std::string> args) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--interval" && i + 1 < args.size()) {
            out.push_back("--interval=" + args[i + 1]);
            ++i;
        } else {
            out.push_back(args[i]);
        }
    }
    return out;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Context ctx{{}, out, err, {}, {}};
    CLI::App app{"retrig: detect jailbreak prompts by re-triggering the model's denial"};
    app.name(args.empty() ? "retrig" : fs::path(args[0]).filename().string());
    app.require_subcommand(1);
    app.fallthrough();
    std::uint64_t seed = 0;
    app.add_option("--backend", ctx.g.backend, "Backend URL, or sim:<bundle.json>");
    app.add_option("--matrix", ctx.g.matrix, "EMBF1 embedding matrix (vocab sidecar <path>.vocab)");
    app.add_option("--vocab", ctx.g.vocab, "Vocabulary file overriding the sidecar");
    auto* seed_opt = app.add_option("--seed", seed, "Global seed");
    app.add_option("--jobs", ctx.g.jobs, "Backend concurrency cap")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--classifier", ctx.g.classifier, "Classifier config JSON");
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")->capture_default_str();

    std::function<int()> action;

    // scan
    auto* scan = app.add_subcommand("scan", "Brute-force strength sweep; one delta,verdict strip per sweep");
    PromptInput scan_in;
    PlanFlags scan_plan;
    std::string scan_out_dir, scan_log;
    scan_in.add_to(scan);
    scan_plan.add_to(scan);
    scan->add_option("--out-dir", scan_out_dir, "Write one strip CSV per sweep here instead of stdout");
    scan->add_option("--log", scan_log, "Write the full scan log as JSON lines");
    scan->callback([&] { action = [&] { return run_scan(ctx, scan_in, scan_plan, scan_out_dir, scan_log); }; });

    // detect
    auto* det = app.add_subcommand("detect", "Search for a denial-eliciting disruption (exit 4 on jailbreak)");
    PromptInput det_in;
    SearchFlags det_flags;
    std::string det_out;
    det_in.add_to(det);
    det_flags.add_to(det);
    det->add_option("--out", det_out, "Report path (JSON; JSON lines for --corpus)");
    det->callback([&] { action = [&] { return run_detect(ctx, det_in, det_flags, det_out); }; });

    // find-anchors
    auto* fa = app.add_subcommand("find-anchors", "Build the anchor set from brute-force scans");
    PromptInput fa_in;
    PlanFlags fa_plan;
    std::string fa_log_in, fa_out, fa_log_out, fa_metric = "cosine";
    double fa_coverage = 0.9;
    std::size_t fa_min_cases = 200;
    fa_in.add_to(fa);
    fa_plan.add_to(fa);
    fa->add_option("--scan-log", fa_log_in, "Use an existing scan log instead of scanning");
    fa->add_option("--coverage", fa_coverage, "Cumulative frequency the anchor prefix must reach")
        ->capture_default_str();
    fa->add_option("--min-cases", fa_min_cases, "Minimum usable denial cases")->capture_default_str();
    fa->add_option("--metric", fa_metric, "cosine or neg_sq_euclidean")->capture_default_str();
    fa->add_option("--out", fa_out, "Anchor set path (default stdout)");
    fa->add_option("--log-out", fa_log_out, "Write the scan log as JSON lines");
    fa->callback([&] {
        action = [&] {
            return run_find_anchors(ctx, fa_in, fa_plan, fa_log_in, fa_coverage, fa_min_cases, fa_metric,
                                    fa_out, fa_log_out);
        };
    });

    // transfer
    auto* tr = app.add_subcommand("transfer", "Many-shot transfer of surrogate witnesses to a black-box target");
    PromptInput tr_in;
    SearchFlags tr_flags;
    tr_flags.budget = 200;
    TransferFlags tr_opts;
    std::string tr_out;
    tr_in.add_to(tr, false);
    tr_flags.add_to(tr);
    tr->add_option("-m,--witnesses", tr_opts.m, "Witnesses to collect on the surrogate")->capture_default_str();
    tr->add_option("-k,--top-k", tr_opts.k, "Token conversions per witness")->capture_default_str();
    tr->add_option("--target", tr_opts.target, "Chat-completions URL of the target");
    tr->add_option("--target-model", tr_opts.target_model, "Model name sent to the target");
    tr->add_option("--target-concurrency", tr_opts.target_concurrency, "Concurrent target calls")
        ->capture_default_str();
    tr->add_flag("--self", tr_opts.self, "Probe the surrogate backend itself");
    tr->add_option("--candidates-out", tr_opts.candidates_out, "Write candidates as JSON lines");
    tr->add_option("--metric", tr_opts.metric, "cosine or neg_sq_euclidean")->capture_default_str();
    tr->add_option("--out", tr_out, "Summary path (default stdout)");
    tr->callback([&] { action = [&] { return run_transfer(ctx, tr_in, tr_flags, tr_opts, tr_out); }; });

    // eval
    auto* ev = app.add_subcommand("eval", "Detection and false-alarm rates over corpora");
    SearchFlags ev_flags;
    EvalFlags ev_opts;
    ev_flags.add_to(ev);
    ev->add_option("--jailbreak-corpus", ev_opts.jailbreak, "Successful-jailbreak corpus (repeatable)");
    ev->add_option("--benign-corpus", ev_opts.benign, "Benign corpus (repeatable)");
    ev->add_option("--format", ev_opts.format, "advbench_csv, jbb_jsonl, plain_txt (default: by extension)");
    ev->add_option("--attack", ev_opts.attack, "Attack tag for jailbreak rows without one");
    ev->add_option("--curve", ev_opts.curve, "Budgets for the DR curve")->delimiter(',')->capture_default_str();
    ev->add_option("--out", ev_opts.out, "Write the JSON report here");
    ev->add_flag("--json", ev_opts.json_stdout, "Print JSON instead of the table");
    ev->callback([&] { action = [&] { return run_eval(ctx, ev_flags, ev_opts); }; });

    // serve
    auto* sv = app.add_subcommand("serve", "Run the guard HTTP service");
    std::string sv_config;
    int sv_port = -1;
    sv->add_option("--config", sv_config, "Guard config JSON")->required();
    sv->add_option("--port", sv_port, "Override the configured port");
    sv->callback([&] { action = [&] { return run_serve(ctx, sv_config, sv_port); }; });

    // matrix
    auto* mx = app.add_subcommand("matrix", "Embedding matrix utilities");
    mx->require_subcommand(1);
    auto* mi = mx->add_subcommand("import", "Convert text vectors or .npy to EMBF1");
    std::string mi_from, mi_vocab, mi_model = "imported", mi_out;
    mi->add_option("--from", mi_from, "Text vectors (token v1 .. vD) or .npy")->required();
    mi->add_option("--vocab", mi_vocab, "Vocabulary file (needed for .npy)");
    mi->add_option("--model-id", mi_model, "Model id for the header")->capture_default_str();
    mi->add_option("--out", mi_out, "Output EMBF1 path")->required();
    mi->callback([&] { action = [&] { return run_matrix_import(ctx, mi_from, mi_vocab, mi_model, mi_out); }; });
    auto* mn = mx->add_subcommand("inspect", "Print header and norms; optional nearest tokens");
    std::string mn_path, mn_metric = "cosine";
    std::optional<TokenId> mn_token;
    std::size_t mn_k = 5;
    mn->add_option("path", mn_path, "EMBF1 file")->required();
    mn->add_option("--nearest", mn_token, "Token id to find neighbours of");
    mn->add_option("-k", mn_k, "Neighbours")->capture_default_str();
    mn->add_option("--metric", mn_metric, "cosine or neg_sq_euclidean")->capture_default_str();
    mn->callback([&] { action = [&] { return run_matrix_inspect(ctx, mn_path, mn_token, mn_k, mn_metric); }; });

    // sim-backend
    auto* sb = app.add_subcommand("sim-backend", "Simulated generation backend");
    sb->require_subcommand(1);
    auto* sbs = sb->add_subcommand("serve", "Serve a sim bundle over the wire protocol");
    std::string sb_bundle, sb_host = "127.0.0.1";
    int sb_port = 8080;
    sbs->add_option("--bundle", sb_bundle, "Sim bundle JSON")->required();
    sbs->add_option("--host", sb_host, "Listen host")->capture_default_str();
    sbs->add_option("--port", sb_port, "Listen port")->capture_default_str();
    sbs->callback([&] { action = [&] { return run_sim_serve(ctx, sb_bundle, sb_host, sb_port); }; });

    // plant
    auto* pl = app.add_subcommand("plant", "Write a synthetic world: matrix, sim bundle, anchors, corpora");
    std::string pl_dir;
    std::size_t pl_jb = 100, pl_bn = 100, pl_vocab = 256, pl_dim = 32;
    double pl_coupled = 0.5;
    pl->add_option("--out-dir", pl_dir, "Output directory")->required();
    pl->add_option("--jailbreak", pl_jb, "Planted jailbreak prompts")->capture_default_str();
    pl->add_option("--benign", pl_bn, "Planted benign prompts")->capture_default_str();
    pl->add_option("--coupled-fraction", pl_coupled, "Share of jailbreak landscapes on the guided grid")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    pl->add_option("--vocab-size", pl_vocab, "World vocabulary size")->capture_default_str();
    pl->add_option("--dim", pl_dim, "World embedding dim")->capture_default_str();
    pl->callback([&] { action = [&] { return run_plant(ctx, pl_dir, pl_jb, pl_bn, pl_coupled, pl_vocab, pl_dim); }; });

    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    rest = glue_interval_values(std::move(rest));
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(rest);
        if (*seed_opt) {
            ctx.g.seed = seed;
        }
        spdlog::set_level(spdlog::level::from_str(log_level));
        return action ? action() : kUsage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    } catch (const BackendError& e) {
        err << "backend error: " << e.what() << "\n";
        return kBackendError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
}

int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args(argv, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace retrig::cli
