// One PASS/FAIL line per acceptance criterion. Exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "retrig/anchors.hpp"
#include "retrig/embedding_store.hpp"
#include "retrig/evalharness.hpp"
#include "retrig/rng.hpp"
#include "retrig/scanner.hpp"
#include "retrig/searcher.hpp"
#include "retrig/simlab.hpp"
#include "retrig/suite.hpp"
#include "retrig/transfer.hpp"

using namespace retrig;
using namespace retrig::simlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
}

std::string fmt(double v, int prec = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

// Budget and narrowing invariants are collected from every detect run below.
struct InvariantLog {
    std::size_t runs = 0;
    std::size_t over_budget = 0;
    std::size_t bad_traces = 0;

    void add(const DetectionReport& r, std::size_t budget) {
        ++runs;
        if (r.queries_used > budget) {
            ++over_budget;
        }
        for (std::size_t i = 0; i < r.interval_trace.size(); ++i) {
            const auto [lo, hi] = r.interval_trace[i];
            bool ok = lo <= hi;
            if (i > 0) {
                ok = ok && lo >= r.interval_trace[i - 1].first && hi <= r.interval_trace[i - 1].second;
            }
            if (!ok) {
                ++bad_traces;
                break;
            }
        }
    }
} invariants;

// ---------------------------------------------------------------------------

std::vector<std::pair<TokenId, float>> brute_topk(const std::vector<float>& rows, std::size_t n, std::size_t d,
                                                  const std::vector<float>& q, std::size_t k,
                                                  SimilarityMetric metric) {
    double qn = 0.0;
    for (float v : q) {
        qn += static_cast<double>(v) * v;
    }
    qn = std::sqrt(qn);
    std::vector<std::pair<TokenId, float>> all(n);
    for (std::size_t t = 0; t < n; ++t) {
        const float* r = rows.data() + t * d;
        double s = 0.0;
        if (metric == SimilarityMetric::Cosine) {
            double rn = 0.0, dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                rn += static_cast<double>(r[j]) * r[j];
                dot += static_cast<double>(r[j]) * q[j];
            }
            rn = std::sqrt(rn);
            s = rn == 0.0 ? 0.0 : dot / (rn * qn);
        } else {
            for (std::size_t j = 0; j < d; ++j) {
                const double x = static_cast<double>(q[j]) - r[j];
                s -= x * x;
            }
        }
        all[t] = {static_cast<TokenId>(t), static_cast<float>(s)};
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    all.resize(std::min(k, n));
    return all;
}

Outcome nn_oracle() {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(20240601);
    std::size_t mismatches = 0;
    for (int c = 0; c < 1000; ++c) {
        const std::size_t n = 1 + rng.index(c % 10 == 0 ? 4000 : 400);
        const std::size_t d = 1 + rng.index(64);
        const bool coarse = rng.bernoulli(0.5);
        std::vector<float> rows(n * d);
        for (auto& v : rows) {
            v = coarse ? static_cast<float>(static_cast<int>(rng.index(5)) - 2) : static_cast<float>(rng.normal());
        }
        if (n > 3) {
            for (int dup = 0; dup < 3; ++dup) {
                const auto a = rng.index(n), b = rng.index(n);
                std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(a * d), d,
                            rows.begin() + static_cast<std::ptrdiff_t>(b * d));
            }
        }
        const EmbeddingMatrix m("m", n, d, rows);
        std::vector<float> q(d);
        do {
            for (auto& v : q) {
                v = coarse ? static_cast<float>(static_cast<int>(rng.index(5)) - 2) : static_cast<float>(rng.normal());
            }
        } while (std::all_of(q.begin(), q.end(), [](float v) { return v == 0.0f; }));
        const std::size_t k = 1 + rng.index(std::min<std::size_t>(n + 2, 50));
        const auto metric = rng.bernoulli(0.5) ? SimilarityMetric::Cosine : SimilarityMetric::NegSquaredEuclidean;
        const auto got = emb2token(m, q, k, metric);
        const auto want = brute_topk(rows, n, d, q, k, metric);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < got.size(); ++i) {
            same = got[i].token_id == want[i].first && got[i].similarity == want[i].second;
        }
        mismatches += same ? 0 : 1;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {mismatches == 0 && secs < 10.0,
            std::to_string(mismatches) + " mismatches in 1000 cases, " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------------------

Outcome scan_fidelity() {
    const auto world = make_world(31);
    std::size_t records = 0, wrong_verdicts = 0, bad_sizes = 0, bad_bounds = 0, regions = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        auto spec = plant_landscape(LandscapeKind::Jailbreak, 1000 + s);
        spec.prompt_id = "*";
        SimBackend b(world.model, {spec});
        const auto prompt = make_prompt(b, "scan-" + std::to_string(s), world.random_prompt(s));
        ScanPlan plan;
        const auto res = brute_scan(prompt, plan, b, ClassifierConfig{}, 4);
        records += res.records.size();
        if (!res.complete || res.records.size() != 1201) {
            ++bad_sizes;
            continue;
        }
        for (const auto& r : res.records) {
            if (r.verdict != lookup_verdict(spec, r.disruptions, prompt.token_ids.size())) {
                ++wrong_verdicts;
            }
        }
        // Maximal Denial runs in the strip against the planted intervals.
        std::vector<std::pair<double, double>> runs;
        for (std::size_t i = 0; i < res.records.size(); ++i) {
            if (res.records[i].verdict != Verdict::Denial) {
                continue;
            }
            const double d = res.records[i].delta();
            if (i > 0 && res.records[i - 1].verdict == Verdict::Denial) {
                runs.back().second = d;
            } else {
                runs.emplace_back(d, d);
            }
        }
        regions += spec.regions.size();
        if (runs.size() != spec.regions.size()) {
            ++bad_bounds;
            continue;
        }
        for (std::size_t i = 0; i < runs.size(); ++i) {
            if (std::abs(runs[i].first - spec.regions[i].lo) > 0.05 + 1e-6 ||
                std::abs(runs[i].second - spec.regions[i].hi) > 0.05 + 1e-6) {
                ++bad_bounds;
            }
        }
    }
    return {wrong_verdicts == 0 && bad_sizes == 0 && bad_bounds == 0,
            std::to_string(records) + " records, " + std::to_string(wrong_verdicts) + " verdict mismatches, " +
                std::to_string(bad_sizes) + " sweeps not 1201 points, " + std::to_string(bad_bounds) + "/" +
                std::to_string(regions) + " intervals off by more than 0.05"};
}

// ---------------------------------------------------------------------------

Outcome detection() {
    const auto suite = make_suite(101);
    auto b = suite.backend();
    SearchConfig cfg;
    cfg.anchor_set = suite.anchors;
    const Corpus jb{"jailbreak", CorpusKind::Jailbreak, suite.jailbreak};
    const Corpus bn{"benign", CorpusKind::Benign, suite.benign};
    const auto jr = run_corpus(jb, cfg, b, &suite.world.matrix, 7, 8);
    const auto br = run_corpus(bn, cfg, b, &suite.world.matrix, 7, 8);
    std::size_t bad_replays = 0, witnesses = 0, errors = 0;
    std::size_t missed_coupled = 0, missed_plain = 0;
    double narrowest_missed = 1e9;
    for (std::size_t i = 0; i < jr.size(); ++i) {
        const auto& r = jr[i];
        invariants.add(r, cfg.budget);
        errors += r.decision == Decision::Error;
        for (const auto& w : r.witnesses) {
            ++witnesses;
            if (replay_witness(suite.jailbreak[i], w, b, cfg.classifier) != Verdict::Denial) {
                ++bad_replays;
            }
        }
        if (r.decision != Decision::Jailbreak) {
            (suite.coupled[i] ? missed_coupled : missed_plain)++;
            double total = 0.0;
            for (const auto& reg : suite.landscapes[i].regions) {
                if (reg.kind == Region::Kind::Scalar) {
                    total += reg.hi - reg.lo;
                }
            }
            narrowest_missed = std::min(narrowest_missed, total);
        }
    }
    for (const auto& r : br) {
        invariants.add(r, cfg.budget);
        errors += r.decision == Decision::Error;
        for (const auto& w : r.witnesses) {
            (void)w;
            ++bad_replays;  // benign landscapes have no denial at all
        }
    }
    const double dr = compute_dr(jb, jr);
    const double fr = compute_fr(bn, br);
    std::string detail = "DR " + fmt(dr) + " FR " + fmt(fr) + " at budget 50 (100+100 prompts), " +
                         std::to_string(witnesses) + " witnesses, " + std::to_string(bad_replays) +
                         " failed replays, " + std::to_string(errors) + " errors";
    if (missed_coupled + missed_plain > 0) {
        detail += "; missed " + std::to_string(missed_coupled) + " coupled, " + std::to_string(missed_plain) +
                  " interval-only (smallest missed total width " + fmt(narrowest_missed) + ")";
    }
    return {dr == 1.0 && fr == 0.0 && bad_replays == 0 && errors == 0, detail};
}

// ---------------------------------------------------------------------------

Outcome efficiency() {
    SuiteOptions o;
    o.jailbreak = 200;
    o.benign = 0;
    o.coupled_fraction = 0.0;
    const auto suite = make_suite(202, o);
    auto b = suite.backend();
    std::string detail;
    bool pass = true;
    for (std::size_t budget : {std::size_t{1201}, std::size_t{50}}) {
        SearchConfig cfg;
        cfg.budget = budget;
        double rnd = 0.0, swp = 0.0;
        std::size_t rnd_hits = 0, swp_hits = 0;
        for (const auto& p : suite.jailbreak) {
            cfg.rng_seed = derive_seed(9, p.prompt_id);
            const auto r = random_search(p, cfg, b, 0, nullptr);
            const auto s = sweep_search(p, cfg, b, nullptr);
            invariants.add(s, budget);
            // A miss counts as the full budget.
            rnd += static_cast<double>(r.witness ? r.witness->query_index : budget);
            swp += static_cast<double>(s.witnesses.empty() ? budget : s.witnesses.front().query_index);
            rnd_hits += r.witness.has_value();
            swp_hits += !s.witnesses.empty();
            if (r.queries_spent > budget) {
                ++invariants.over_budget;
            }
        }
        const double n = static_cast<double>(suite.jailbreak.size());
        rnd /= n;
        swp /= n;
        pass = pass && rnd <= swp;
        if (!detail.empty()) {
            detail += "; ";
        }
        detail += "budget " + std::to_string(budget) + ": random " + fmt(rnd) + " (" + std::to_string(rnd_hits) +
                  "/200 found) vs sweep " + fmt(swp) + " (" + std::to_string(swp_hits) + "/200 found)";
    }
    return {pass, "mean queries to witness over 200 landscapes, " + detail};
}

// ---------------------------------------------------------------------------

Outcome dr_curve() {
    const auto suite = make_suite(303);
    auto b = suite.backend();
    SearchConfig cfg;
    cfg.anchor_set = suite.anchors;
    const std::vector<std::size_t> budgets = {1, 2, 4, 8, 16, 32, 50};
    const Corpus jb{"jailbreak", CorpusKind::Jailbreak, suite.jailbreak};
    const auto reports = run_corpus(jb, cfg, b, &suite.world.matrix, 11, 8);
    const auto curve = curve_from_reports(reports, budgets);
    const std::size_t grid = cfg.anchor_set.entries.size() * cfg.fractions.size();
    std::size_t guided = 0, late_guided = 0;
    for (const auto& r : reports) {
        invariants.add(r, cfg.budget);
        for (const auto& w : r.witnesses) {
            if (w.stage == SearchStage::Guided) {
                ++guided;
                late_guided += w.query_index > grid;
            }
        }
    }
    bool monotone = true;
    std::string shape;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        monotone = monotone && (i == 0 || curve[i].dr >= curve[i - 1].dr);
        shape += (i ? " " : "") + std::to_string(curve[i].budget) + ":" + fmt(curve[i].dr);
    }
    const double at50 = curve.back().dr;
    return {at50 >= 0.90 && monotone && late_guided == 0,
            "DR " + shape + (monotone ? ", non-decreasing" : ", NOT monotone") + "; " + std::to_string(guided) +
                " guided successes, " + std::to_string(late_guided) + " after call " + std::to_string(grid)};
}

// ---------------------------------------------------------------------------

Outcome budget_narrowing() {
    // Extra stress on top of the runs above: tiny budgets, speculative width.
    const auto suite = make_suite(404, [] {
        SuiteOptions o;
        o.jailbreak = 50;
        o.benign = 50;
        return o;
    }());
    auto b = suite.backend();
    for (std::size_t budget : {1, 3, 17, 50}) {
        for (std::size_t width : {1, 4}) {
            SearchConfig cfg;
            cfg.budget = budget;
            cfg.speculative_width = width;
            cfg.anchor_set = suite.anchors;
            for (const auto* set : {&suite.jailbreak, &suite.benign}) {
                for (const auto& p : *set) {
                    cfg.rng_seed = derive_seed(budget * 10 + width, p.prompt_id);
                    invariants.add(detect(p, cfg, b, nullptr), budget);
                }
            }
        }
    }
    return {invariants.over_budget == 0 && invariants.bad_traces == 0,
            std::to_string(invariants.runs) + " runs, " + std::to_string(invariants.over_budget) +
                " over budget, " + std::to_string(invariants.bad_traces) + " non-monotone or inverted traces"};
}

// ---------------------------------------------------------------------------

Outcome anchor_statistics() {
    const auto world = make_world(55, [] {
        WorldOptions w;
        w.vocab_size = 512;
        return w;
    }());
    // 1000 usable cases: five heavy tokens, then 64 tokens at 0.001 each.
    const std::vector<std::pair<std::size_t, std::size_t>> plan = {{0, 521}, {1, 266}, {2, 110}, {3, 21}, {4, 18}};
    std::vector<Witness> log;
    Rng rng(5);
    auto ordinary = [&] { return static_cast<TokenId>(6 + rng.index(world.matrix.vocab_size() - 6)); };
    auto row = [&](TokenId t) {
        const auto r = world.matrix.row(t);
        return std::vector<float>(r.begin(), r.end());
    };
    for (const auto& [axis, count] : plan) {
        for (std::size_t i = 0; i < count; ++i) {
            Witness w;
            w.original_token_id = ordinary();
            w.disrupted_embedding = row(w.original_token_id);
            w.disrupted_embedding[axis] += 4.0f;
            log.push_back(w);
        }
    }
    for (std::size_t i = 0; i < 64; ++i) {
        Witness w;
        w.original_token_id = 7;
        w.disrupted_embedding = row(static_cast<TokenId>(200 + i));
        log.push_back(w);
    }
    AnchorOptions opts;
    opts.min_cases = 1000;
    const auto set = identify_anchors(log, world.matrix, opts);
    const auto hist = conversion_histogram(log, world.matrix, opts.metric);
    const double want[] = {0.521, 0.266, 0.110, 0.021, 0.018};
    bool exact = hist.entries.size() >= 5;
    std::string freqs;
    for (std::size_t i = 0; exact && i < 5; ++i) {
        exact = hist.entries[i].token_id == world.anchor_ids[i] && hist.entries[i].frequency == want[i];
        freqs += (i ? " " : "") + hist.entries[i].token_string + "=" + fmt(hist.entries[i].frequency, 3);
    }
    double top3 = 0.0;
    for (std::size_t i = 0; i < 3 && i < hist.entries.size(); ++i) {
        top3 += hist.entries[i].frequency;
    }
    return {exact && set.entries.size() == 3,
            std::string("frequencies ") + (exact ? "exact" : "WRONG") + " (" + freqs + "); minimal prefix for " +
                "coverage 0.9 has " + std::to_string(set.entries.size()) + " entries (coverage " +
                fmt(set.coverage, 3) + "), expected 3; top-3 sum is " + fmt(top3, 3) + " < 0.9"};
}

// ---------------------------------------------------------------------------

// Stub target that denies any text containing `word` as a whole word.
class WordTarget final : public TargetClient {
public:
    explicit WordTarget(std::string word) : word_(std::move(word)) {}
    std::string chat(const std::string& text) override {
        std::istringstream in(text);
        for (std::string w; in >> w;) {
            if (w == word_) {
                return std::string(kDenialText);
            }
        }
        return std::string(kDefaultBaseReply);
    }

private:
    std::string word_;
};

Outcome transfer() {
    SuiteOptions o;
    o.jailbreak = 40;
    o.benign = 0;
    o.coupled_fraction = 0.0;
    const auto suite = make_suite(505, o);
    auto b = suite.backend();
    SearchConfig cfg;
    cfg.budget = 200;
    std::size_t over_cap = 0, dup = 0;
    std::vector<std::vector<TransferCandidate>> one(suite.jailbreak.size()), many(suite.jailbreak.size());
    std::set<std::string> words;
    for (std::size_t i = 0; i < suite.jailbreak.size(); ++i) {
        const auto& p = suite.jailbreak[i];
        cfg.rng_seed = derive_seed(13, p.prompt_id);
        const auto ws = collect_witnesses(p, cfg, b, &suite.world.matrix, 8);
        many[i] = build_candidates(p, ws, suite.world.matrix, 4);
        one[i] = build_candidates(p, {ws.begin(), ws.begin() + std::min<std::size_t>(1, ws.size())},
                                  suite.world.matrix, 1);
        over_cap += many[i].size() > ws.size() * 4;
        std::set<std::string> texts;
        for (const auto& c : many[i]) {
            dup += !texts.insert(c.text).second;
            std::istringstream in(c.text);
            for (std::string w; in >> w;) {
                words.insert(w);
            }
        }
    }
    // Every (prompt, target) pair over the enumerated word targets.
    std::size_t one_hits = 0, many_hits = 0, only_one = 0;
    for (const auto& w : words) {
        WordTarget t(w);
        for (std::size_t i = 0; i < suite.jailbreak.size(); ++i) {
            if (t.chat(suite.jailbreak[i].text) == kDenialText) {
                continue;  // target already refuses the unmodified prompt
            }
            const bool a = !one[i].empty() &&
                           probe_target(one[i], t, ClassifierConfig{}).decision == ProbeResult::Decision::Jailbreak;
            const bool m = !many[i].empty() &&
                           probe_target(many[i], t, ClassifierConfig{}).decision == ProbeResult::Decision::Jailbreak;
            one_hits += a;
            many_hits += m;
            only_one += a && !m;
        }
    }
    const bool pass = over_cap == 0 && dup == 0 && only_one == 0 && many_hits > one_hits;
    return {pass, std::to_string(words.size()) + " stub targets x " + std::to_string(suite.jailbreak.size()) +
                      " prompts: one-shot detects " + std::to_string(one_hits) + ", many-shot " +
                      std::to_string(many_hits) + ", one-shot-only " + std::to_string(only_one) + "; " +
                      std::to_string(over_cap) + " prompts over m*k, " + std::to_string(dup) + " duplicates"};
}

// ---------------------------------------------------------------------------

struct CliRun {
    int code;
    std::string out;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "retrig");
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    return {code, out.str()};
}

Outcome determinism() {
    const auto dir = fs::temp_directory_path() / ("retrig-acceptance-" + std::to_string(::getpid()));
    fs::create_directories(dir);
    struct Cleanup {
        fs::path p;
        ~Cleanup() {
            std::error_code ec;
            fs::remove_all(p, ec);
        }
    } cleanup{dir};
    if (cli({"plant", "--out-dir", dir.string(), "--jailbreak", "20", "--benign", "10", "--seed", "8"}).code != 0) {
        return {false, "plant failed"};
    }
    const auto backend = "sim:" + (dir / "bundle.json").string();
    const auto matrix = (dir / "world.embf").string();
    const auto anchors = (dir / "anchors.json").string();
    const auto jb = (dir / "jailbreak.jsonl").string();
    const auto bn = (dir / "benign.jsonl").string();
    const std::vector<std::vector<std::string>> commands = {
        {"--backend", backend, "--matrix", matrix, "--seed", "4", "--jobs", "4", "detect", "--corpus", jb,
         "--anchors", anchors},
        {"--backend", backend, "--matrix", matrix, "--seed", "4", "--jobs", "4", "eval", "--jailbreak-corpus", jb,
         "--benign-corpus", bn, "--anchors", anchors, "--json"},
        {"--backend", backend, "--matrix", matrix, "--seed", "4", "--jobs", "4", "find-anchors", "--corpus", jb,
         "--min-cases", "100"},
    };
    const char* names[] = {"detect", "eval", "find-anchors"};
    std::string detail;
    bool pass = true;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        const auto a = cli(commands[i]);
        const auto z = cli(commands[i]);
        const bool same = a.code == z.code && a.out == z.out && !a.out.empty() && a.code == 0;
        pass = pass && same;
        detail += std::string(i ? ", " : "") + names[i] + (same ? " identical" : " DIFFERENT") + " (" +
                  std::to_string(a.out.size()) + " bytes, exit " + std::to_string(a.code) + ")";
    }
    return {pass, detail};
}

}  // namespace

int main() {
    report("nn-oracle", nn_oracle);
    report("scan-fidelity", scan_fidelity);
    report("detection-dr-fr", detection);
    report("efficiency", efficiency);
    report("dr-vs-budget", dr_curve);
    report("budget-narrowing", budget_narrowing);
    report("anchor-statistics", anchor_statistics);
    report("transfer", transfer);
    report("determinism", determinism);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
